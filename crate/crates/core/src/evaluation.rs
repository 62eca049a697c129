//! Rollout and energy metrics, and the evaluation grids over models, test
//! integrators and step sizes.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{DtPolicy, TrajectoryCell};
use crate::error::{Error, Result};
use crate::graphnet::SystemBatch;
use crate::integrators::Integrator;
use crate::models::{rollout_batch, ModelKind, ModelParams};
use crate::physics::{true_hamiltonian, SystemConfig, Trajectory};

/// Initial energies below this are rejected by [`energy_error`].
pub const ENERGY_FLOOR: f64 = 1e-9;

/// `sqrt(mean((a − b)²))`.
pub fn rms_difference(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Root-mean-square position error over every step after the shared
/// initial state, every particle and every dimension.
pub fn rollout_rmse(pred: &Trajectory<f64>, truth: &Trajectory<f64>) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("rollout has {} states, ground truth {}", pred.len(), truth.len())));
    }
    if pred.len() < 2 {
        return Err(Error::shape("a rollout needs at least one step"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in pred.states[1..].iter().zip(&truth.states[1..]) {
        if a.q.len() != b.q.len() {
            return Err(Error::shape("particle counts differ"));
        }
        sum += a.q.iter().zip(&b.q).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        count += a.q.len();
    }
    Ok((sum / count as f64).sqrt())
}

/// `|mean_t H(s_t) − H(s_0)| / H(s_0)` under the true Hamiltonian, with
/// the mean taken over the predicted states after the initial one.
pub fn energy_error(config: &SystemConfig<f64>, pred: &Trajectory<f64>) -> Result<f64> {
    if pred.len() < 2 {
        return Err(Error::shape("a rollout needs at least one step"));
    }
    let e0 = true_hamiltonian(config, pred.first());
    if !(e0 > ENERGY_FLOOR) {
        return Err(Error::DegenerateEnergy(e0));
    }
    let mean = pred.states[1..].iter().map(|s| true_hamiltonian(config, s)).sum::<f64>() / (pred.len() - 1) as f64;
    Ok((mean - e0).abs() / e0)
}

/// `sqrt(mean(v²))`; non-finite entries make the result infinite.
pub fn rms_pool(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    if values.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Serializes non-finite values as `null` and reads `null` back as +∞.
mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Metrics of one model on one `(test integrator, test dt)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Identifies the trained run (or `"TrueHamiltonian"`).
    pub run: String,
    pub model: ModelKind,
    pub train_integrator: Option<Integrator>,
    /// `None` for DeltaGN, which does not use one.
    pub test_integrator: Option<Integrator>,
    pub train_dt_policy: Option<DtPolicy>,
    pub test_dt: f64,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    #[serde(with = "finite_or_null")]
    pub rollout_rmse: f64,
    #[serde(with = "finite_or_null")]
    pub energy_error: f64,
    pub trajectories: usize,
    /// Rollouts that became non-finite.
    pub diverged: usize,
    /// Test integrator equals train integrator.
    pub diagonal: bool,
}

/// A model to evaluate together with how it was trained.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub run: String,
    pub params: ModelParams<f64>,
    pub train_integrator: Option<Integrator>,
    pub train_dt_policy: Option<DtPolicy>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
}

impl Candidate {
    pub fn true_hamiltonian() -> Self {
        Candidate {
            run: ModelKind::TrueHamiltonian.name().into(),
            params: ModelParams::true_hamiltonian(),
            train_integrator: None,
            train_dt_policy: None,
            seed: None,
            lr: None,
        }
    }
}

/// Per-trajectory metrics of one model over one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    pub rollout_rmse: Vec<f64>,
    pub energy_error: Vec<f64>,
}

/// Rolls every trajectory of `cell` out from its initial state, in
/// batches of at most `chunk` systems.
pub fn evaluate_cell(
    params: &ModelParams<f64>,
    integrator: Integrator,
    cell: &TrajectoryCell,
    chunk: usize,
) -> Result<CellMetrics> {
    let mut out = CellMetrics { rollout_rmse: Vec::new(), energy_error: Vec::new() };
    for records in cell.records.chunks(chunk.max(1)) {
        let configs: Vec<_> = records.iter().map(|r| &r.config).collect();
        let initial: Vec<_> = records.iter().map(|r| r.trajectory.first()).collect();
        let steps = records[0].trajectory.len() - 1;
        let batch = SystemBatch::new(&configs)?;
        let preds = rollout_batch(params, integrator, &batch, cell.dt, &initial, steps)?;
        for (pred, r) in preds.iter().zip(records) {
            if pred.states.iter().all(|s| s.is_finite()) {
                out.rollout_rmse.push(rollout_rmse(pred, &r.trajectory)?);
                out.energy_error.push(energy_error(&r.config, pred)?);
            } else {
                out.rollout_rmse.push(f64::INFINITY);
                out.energy_error.push(f64::INFINITY);
            }
        }
    }
    Ok(out)
}

/// RMS-pooled rollout error of `params` over several cells.
pub fn pooled_rollout_rmse(params: &ModelParams<f64>, integrator: Integrator, cells: &[TrajectoryCell]) -> Result<f64> {
    let mut all = Vec::new();
    for cell in cells {
        all.extend(evaluate_cell(params, integrator, cell, 100)?.rollout_rmse);
    }
    Ok(rms_pool(&all))
}

/// Evaluates every candidate under every test integrator on every cell
/// whose dt is in `test_dts` (all cells when `None`). Cells with the
/// same dt but different particle counts are pooled. A true-Hamiltonian
/// reference is added when absent. Results are ordered by candidate,
/// test integrator, then dt, independent of scheduling.
pub fn evaluate_grid(
    candidates: &[Candidate],
    test_integrators: &[Integrator],
    test_dts: Option<&[f64]>,
    cells: &[TrajectoryCell],
) -> Result<Vec<EvalResult>> {
    let mut all = candidates.to_vec();
    if !all.iter().any(|c| c.params.kind == ModelKind::TrueHamiltonian) {
        all.push(Candidate::true_hamiltonian());
    }
    for c in &all {
        c.params.validate()?;
    }
    let mut by_dt: BTreeMap<u64, Vec<&TrajectoryCell>> = BTreeMap::new();
    for cell in cells {
        if test_dts.map_or(true, |d| d.iter().any(|&x| (x - cell.dt).abs() < 1e-12)) {
            by_dt.entry(cell.dt.to_bits()).or_default().push(cell);
        }
    }
    if by_dt.is_empty() {
        return Err(Error::Missing("no trajectories for the requested step sizes".into()));
    }
    let mut jobs = Vec::new();
    for c in &all {
        let integrators: Vec<Option<Integrator>> = if c.params.kind.uses_integrator() {
            test_integrators.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        for integ in integrators {
            for group in by_dt.values() {
                jobs.push((c, integ, group));
            }
        }
    }
    jobs.par_iter()
        .map(|&(c, integ, group)| {
            let mut rmse = Vec::new();
            let mut energy = Vec::new();
            for cell in group {
                let m = evaluate_cell(&c.params, integ.unwrap_or(Integrator::Rk1), cell, 100)?;
                rmse.extend(m.rollout_rmse);
                energy.extend(m.energy_error);
            }
            Ok(EvalResult {
                run: c.run.clone(),
                model: c.params.kind,
                train_integrator: c.train_integrator,
                test_integrator: integ,
                train_dt_policy: c.train_dt_policy,
                test_dt: group[0].dt,
                seed: c.seed,
                lr: c.lr,
                rollout_rmse: rms_pool(&rmse),
                energy_error: rms_pool(&energy),
                trajectories: rmse.len(),
                diverged: rmse.iter().filter(|v| !v.is_finite()).count(),
                diagonal: integ.is_some() && integ == c.train_integrator,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::dataio::{generate_eval_trajectories, TrajectoryManifest};
    use crate::physics::State;

    fn traj(points: &[&[f64]]) -> Trajectory<f64> {
        Trajectory { dt: 0.1, states: points.iter().map(|q| State { q: q.to_vec(), p: vec![0.0; q.len()] }).collect() }
    }

    #[test]
    fn identical_rollouts_have_zero_error() {
        let t = traj(&[&[0.0, 0.0], &[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(rollout_rmse(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_its_magnitude() {
        let a = traj(&[&[0.0, 0.0, 1.0, 1.0], &[1.0, 2.0, 0.0, 0.0], &[3.0, 4.0, 5.0, 6.0]]);
        let b = traj(&[&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 1.0, 0.0], &[4.0, 4.0, 6.0, 6.0]]);
        // (1, 0) per particle: mean square over dims is 0.5
        assert!((rollout_rmse(&a, &b).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let c = traj(&[&[0.0], &[1.0], &[2.0]]);
        let d = traj(&[&[0.0], &[2.0], &[3.0]]);
        assert!((rollout_rmse(&c, &d).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_two_step_case() {
        let truth = traj(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let pred = traj(&[&[0.0, 0.0], &[0.3, 0.4], &[0.0, 0.0]]);
        assert!((rollout_rmse(&pred, &truth).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let a = traj(&[&[0.0], &[1.0]]);
        let b = traj(&[&[0.0], &[1.0], &[2.0]]);
        assert!(rollout_rmse(&a, &b).is_err());
    }

    #[test]
    fn energy_error_examples() {
        let config = SystemConfig::new(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let s = |px: f64| State { q: vec![0.0; 4], p: vec![px, 0.0, 0.0, 0.0] };
        // H = px² / 2
        let flat = Trajectory { dt: 0.1, states: vec![s(1.0), s(1.0), s(-1.0)] };
        assert_eq!(energy_error(&config, &flat).unwrap(), 0.0);
        let up = Trajectory { dt: 0.1, states: vec![s(1.0), s(1.1f64.sqrt()), s(1.1f64.sqrt())] };
        assert!((energy_error(&config, &up).unwrap() - 0.1).abs() < 1e-12);
        let rest = Trajectory { dt: 0.1, states: vec![s(0.0), s(0.0)] };
        assert!(matches!(energy_error(&config, &rest), Err(Error::DegenerateEnergy(_))));
    }

    #[test]
    fn pooling_is_root_mean_square() {
        assert!((rms_pool(&[3.0, 4.0]) - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rms_pool(&[1.0, f64::NAN]), f64::INFINITY);
    }

    fn small_cells() -> Vec<TrajectoryCell> {
        generate_eval_trajectories(&TrajectoryManifest {
            split: "test".into(),
            particle_counts: vec![4, 5],
            dts: vec![0.1, 0.2],
            count: 4,
            length: 20,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn ground_truth_and_true_hamiltonian_energy() {
        let cells = small_cells();
        for cell in &cells {
            for r in &cell.records {
                assert!(energy_error(&r.config, &r.trajectory).unwrap() < 1e-5);
            }
        }
        let th = ModelParams::true_hamiltonian();
        let m = evaluate_cell(&th, Integrator::Rk4, &cells[0], 3).unwrap();
        let e = rms_pool(&m.energy_error);
        assert!(e > 0.0 && e < 1e-3, "{e}");
    }

    #[test]
    fn grid_has_reference_row_and_diagonal_flags() {
        use rand::SeedableRng;
        let cells = small_cells();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let ogn = Candidate {
            run: "ogn".into(),
            params: ModelParams::init(ModelKind::OGN, &[8], false, &mut rng).unwrap(),
            train_integrator: Some(Integrator::Rk2),
            train_dt_policy: Some(DtPolicy::standard_fixed()),
            seed: Some(0),
            lr: Some(1e-3),
        };
        let delta = Candidate {
            run: "delta".into(),
            params: ModelParams::init(ModelKind::DeltaGN, &[8], false, &mut rng).unwrap(),
            train_integrator: None,
            ..ogn.clone()
        };
        let integs = [Integrator::Rk1, Integrator::Rk2];
        let grid = evaluate_grid(&[ogn.clone(), delta], &integs, Some(&[0.1]), &cells).unwrap();
        // OGN: 2 integrators, DeltaGN: 1 row, TrueHamiltonian: 2 integrators
        assert_eq!(grid.len(), 5);
        assert!(grid.iter().any(|r| r.model == ModelKind::TrueHamiltonian));
        assert!(grid.iter().all(|r| r.test_dt == 0.1 && r.trajectories == 8));
        let diag: Vec<_> = grid.iter().filter(|r| r.diagonal).collect();
        assert_eq!(diag.len(), 1);
        assert_eq!(diag[0].test_integrator, Some(Integrator::Rk2));
        let again = evaluate_grid(&[ogn], &integs, Some(&[0.1]), &cells).unwrap();
        assert_eq!(again[..2], grid[..2]);
        let all = evaluate_grid(&[], &integs, None, &cells).unwrap();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn non_finite_metrics_serialize_as_null() {
        let r = EvalResult {
            run: "x".into(),
            model: ModelKind::OGN,
            train_integrator: Some(Integrator::Rk4),
            test_integrator: Some(Integrator::S3),
            train_dt_policy: Some(DtPolicy::standard_fixed()),
            test_dt: 0.5,
            seed: Some(1),
            lr: Some(0.01),
            rollout_rmse: f64::INFINITY,
            energy_error: 0.25,
            trajectories: 3,
            diverged: 1,
            diagonal: false,
        };
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"rollout_rmse\":null"));
        assert_eq!(serde_json::from_str::<EvalResult>(&text).unwrap(), r);
    }

    proptest! {
        #[test]
        fn rollout_rmse_is_a_symmetric_metric(
            a in proptest::collection::vec(-5.0f64..5.0, 12),
            b in proptest::collection::vec(-5.0f64..5.0, 12),
        ) {
            let ta = traj(&[&[0.0; 4], &a[..4], &a[4..8], &a[8..]]);
            let tb = traj(&[&[0.0; 4], &b[..4], &b[4..8], &b[8..]]);
            let ab = rollout_rmse(&ta, &tb).unwrap();
            prop_assert_eq!(ab, rollout_rmse(&tb, &ta).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }
}
