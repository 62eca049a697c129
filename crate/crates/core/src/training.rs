//! Next-step training through the integrator, Adam, the learning-rate
//! schedule and the learning-rate sweep.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{param_gradient, Parameters, Tape, Var};
use crate::dataio::{DtPolicy, PairRecord, TrajectoryCell};
use crate::error::{Error, Result};
use crate::evaluation::pooled_rollout_rmse;
use crate::graphnet::{SystemBatch, HIDDEN_SIZES};
use crate::integrators::Integrator;
use crate::models::{BatchState, BatchStep, ModelKind, ModelParams};
use crate::physics::{State, DIM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean squared error over particles, dimensions and both channels.
pub fn mse_loss(pred: &State<f64>, target: &State<f64>) -> Result<f64> {
    if pred.q.len() != target.q.len() || pred.p.len() != target.p.len() {
        return Err(Error::shape("prediction and target differ in shape"));
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    Ok((sq(&pred.q, &target.q) + sq(&pred.p, &target.p)) / (pred.q.len() + pred.p.len()) as f64)
}

/// [`mse_loss`] on a tape; only positions and momenta enter the loss.
pub fn mse_loss_on_tape<'t, T: Scalar>(pred: &BatchState<'t, T>, q: &Tensor<T>, p: &Tensor<T>) -> Result<Var<'t, T>> {
    if pred.q.shape() != q.shape() || pred.p.shape() != p.shape() {
        return Err(Error::shape("prediction and target differ in shape"));
    }
    let tape = pred.q.tape();
    let dq = pred.q - tape.leaf(q.clone());
    let dp = pred.p - tape.leaf(p.clone());
    let count = (q.len() + p.len()) as f64;
    Ok((dq.square().sum() + dp.square().sum()).scale(T::of(1.0 / count)))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Parameters<T>>(params: &P) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros(), second: zeros() }
    }

    /// Applies one update. Non-finite gradients leave both the parameters
    /// and the optimizer state untouched.
    pub fn update<P: Parameters<T>>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients"));
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powf(self.step as f64));
        let c2 = T::of(1.0 - self.beta2.powf(self.step as f64));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let (one, gs) = (T::one(), grads.tensors());
        for (((w, g), m), v) in params.tensors_mut().into_iter().zip(gs).zip(&mut self.first).zip(&mut self.second) {
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential decay schedule with a floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub rate: f64,
    pub every: f64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { rate: 0.1, every: 2e5, floor: 1e-7 }
    }
}

impl LrSchedule {
    /// The floor never raises the rate above `lr0`, so a zero rate stays zero.
    pub fn at(&self, step: usize, lr0: f64) -> f64 {
        (lr0 * self.rate.powf(step as f64 / self.every)).max(self.floor.min(lr0))
    }
}

/// `max(lr0 · 0.1^(step / 2·10⁵), 10⁻⁷)`.
pub fn lr_at(step: usize, lr0: f64) -> f64 {
    LrSchedule::default().at(step, lr0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub integrator: Integrator,
    pub dt_policy: DtPolicy,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Validation cadence in steps.
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelKind, integrator: Integrator, dt_policy: DtPolicy) -> Self {
        TrainConfig {
            model,
            integrator,
            dt_policy,
            hidden: HIDDEN_SIZES.to_vec(),
            batch_size: 100,
            steps: 1_000_000,
            lr: 1e-3,
            schedule: LrSchedule::default(),
            eval_every: 1000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model == ModelKind::TrueHamiltonian {
            return Err(Error::Config("the true Hamiltonian has nothing to train".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("batch size, eval cadence and hidden sizes must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr < 1.0) {
            return Err(Error::Config(format!("learning rate {} outside [0, 1)", self.lr)));
        }
        self.dt_policy.validate()
    }

    /// DeltaGN sees the step size only when trained on variable steps.
    pub fn dt_feature(&self) -> bool {
        self.model == ModelKind::DeltaGN && self.dt_policy.is_variable()
    }

    pub fn run_name(&self) -> String {
        let dt = if self.dt_policy.is_variable() { "-vardt" } else { "" };
        // Four significant digits keep grid rates like 0.010000000000000004 readable.
        let lr: f64 = format!("{:.3e}", self.lr).parse().expect("formatted float parses");
        format!("{}-{}{dt}-lr{lr:e}-s{}", self.model, self.integrator, self.seed)
    }
}

/// One point of a training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean minibatch loss since the previous point (full training set at step 0).
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub params: ModelParams<f64>,
    pub final_params: ModelParams<f64>,
    pub curve: Vec<CurvePoint>,
    pub best_step: usize,
    pub best_val_loss: f64,
    /// Loss over the whole training set before the first update.
    pub initial_train_loss: f64,
    /// Loss over the whole training set after the last update.
    pub final_train_loss: f64,
}

/// Records grouped by particle count, so each minibatch is one batched graph.
struct Groups<'a> {
    by_n: Vec<Vec<&'a PairRecord>>,
    total: usize,
}

impl<'a> Groups<'a> {
    fn new(records: &'a [PairRecord]) -> Self {
        let mut map: BTreeMap<usize, Vec<&PairRecord>> = BTreeMap::new();
        for r in records {
            map.entry(r.config.n()).or_default().push(r);
        }
        Groups { by_n: map.into_values().collect(), total: records.len() }
    }

    /// A group chosen with probability proportional to its size, then
    /// `size` distinct records from it.
    fn minibatch(&self, rng: &mut impl Rng, size: usize) -> Vec<&'a PairRecord> {
        let mut pick = rng.gen_range(0..self.total);
        let group = self
            .by_n
            .iter()
            .find(|g| {
                if pick < g.len() {
                    true
                } else {
                    pick -= g.len();
                    false
                }
            })
            .expect("pick < total");
        sample(rng, group.len(), size.min(group.len())).into_iter().map(|i| group[i]).collect()
    }
}

fn step_for(records: &[&PairRecord]) -> BatchStep<f64> {
    let dt0 = records[0].dt;
    if records.iter().all(|r| r.dt == dt0) {
        BatchStep::Uniform(dt0)
    } else {
        let dts: Vec<f64> = records.iter().map(|r| r.dt).collect();
        BatchStep::per_system(&dts, records[0].config.n())
    }
}

fn stack(states: impl Iterator<Item = State<f64>>, rows: usize) -> (Tensor<f64>, Tensor<f64>) {
    let (mut q, mut p) = (Vec::with_capacity(rows * DIM), Vec::with_capacity(rows * DIM));
    for s in states {
        q.extend(s.q);
        p.extend(s.p);
    }
    (Tensor::from_vec(rows, DIM, q), Tensor::from_vec(rows, DIM, p))
}

/// Minibatch loss and, when `with_grad`, its parameter gradient.
pub fn batch_loss(
    params: &ModelParams<f64>,
    integrator: Integrator,
    records: &[&PairRecord],
    with_grad: bool,
) -> Result<(f64, Option<ModelParams<f64>>)> {
    let configs: Vec<_> = records.iter().map(|r| &r.config).collect();
    let batch = SystemBatch::new(&configs)?;
    let rows = batch.num_nodes();
    let (q_in, p_in) = stack(records.iter().map(|r| r.state_in.clone()), rows);
    let (q_out, p_out) = stack(records.iter().map(|r| r.state_out.clone()), rows);
    let tape = Tape::new();
    let mut model = params.bind(&tape, &batch);
    let s0 = BatchState::leaf(&tape, q_in, p_in);
    let pred = model.step(integrator, &step_for(records), &s0)?;
    let loss = mse_loss_on_tape(&pred, &q_out, &p_out)?;
    let value = loss.item();
    if !with_grad {
        return Ok((value, None));
    }
    let grads = param_gradient(loss, &model.leaves(), params)?;
    Ok((value, Some(grads)))
}

/// Mean loss over `records`, evaluated in chunks.
pub fn dataset_loss(params: &ModelParams<f64>, integrator: Integrator, records: &[PairRecord]) -> Result<f64> {
    let groups = Groups::new(records);
    let mut sum = 0.0;
    for g in &groups.by_n {
        for chunk in g.chunks(100) {
            sum += batch_loss(params, integrator, chunk, false)?.0 * chunk.len() as f64;
        }
    }
    Ok(sum / records.len().max(1) as f64)
}

fn check_dataset(config: &TrainConfig, records: &[PairRecord], name: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config(format!("{name} set is empty")));
    }
    if let DtPolicy::Fixed { dt } = config.dt_policy {
        if records.iter().any(|r| (r.dt - dt).abs() > 1e-12) {
            return Err(Error::Config(format!("{name} set does not match fixed dt {dt}")));
        }
    }
    Ok(())
}

/// Trains a model on next-step prediction. The returned parameters are
/// those with the lowest validation loss.
pub fn train(config: &TrainConfig, train_set: &[PairRecord], val_set: &[PairRecord]) -> Result<TrainOutcome> {
    train_with(config, train_set, val_set, |_| ())
}

/// [`train`] with a callback invoked on every curve point.
pub fn train_with(
    config: &TrainConfig,
    train_set: &[PairRecord],
    val_set: &[PairRecord],
    mut on_point: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(config, train_set, "training")?;
    check_dataset(config, val_set, "validation")?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(1);

    let mut params = ModelParams::init(config.model, &config.hidden, config.dt_feature(), &mut init_rng)?;
    let mut adam = Adam::new(&params);
    let groups = Groups::new(train_set);

    let initial_train_loss = dataset_loss(&params, config.integrator, train_set)?;
    if !initial_train_loss.is_finite() {
        return Err(Error::Diverged { step: 0, loss: initial_train_loss });
    }
    let mut best_val_loss = dataset_loss(&params, config.integrator, val_set)?;
    let mut best = params.clone();
    let mut best_step = 0;
    let first = CurvePoint { step: 0, train_loss: initial_train_loss, val_loss: best_val_loss, lr: config.lr };
    on_point(&first);
    let mut curve = vec![first];

    let mut running = 0.0;
    let mut since = 0usize;
    for step in 0..config.steps {
        let lr = config.schedule.at(step, config.lr);
        let records = groups.minibatch(&mut batch_rng, config.batch_size);
        let (loss, grads) = batch_loss(&params, config.integrator, &records, true)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam.update(&mut params, &grads.expect("requested"), lr)
            .map_err(|_| Error::Diverged { step, loss: f64::NAN })?;
        running += loss;
        since += 1;
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let val_loss = dataset_loss(&params, config.integrator, val_set)?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged { step: done, loss: val_loss });
            }
            if val_loss < best_val_loss {
                best_val_loss = val_loss;
                best = params.clone();
                best_step = done;
            }
            let point = CurvePoint { step: done, train_loss: running / since as f64, val_loss, lr };
            on_point(&point);
            curve.push(point);
            running = 0.0;
            since = 0;
        }
    }
    let final_train_loss = dataset_loss(&params, config.integrator, train_set)?;
    Ok(TrainOutcome {
        params: best,
        final_params: params,
        curve,
        best_step,
        best_val_loss,
        initial_train_loss,
        final_train_loss,
    })
}

/// `count` values spaced evenly in log scale from `from` to `to`.
pub fn log_grid(from: f64, to: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![from];
    }
    let (a, b) = (from.ln(), to.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

/// The initial learning rates searched at full scale.
pub fn full_lr_grid() -> Vec<f64> {
    log_grid(1e-1, 1e-4, 13)
}

/// How many of `k` ranked runs are reported: 4 of the full 13-value grid,
/// and a third of smaller grids (rounded up).
pub fn top_k(k: usize) -> usize {
    k.div_ceil(3).min(4)
}

/// One learning rate's result within a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub run: String,
    pub model: ModelKind,
    pub integrator: Integrator,
    pub lr: f64,
    pub seed: u64,
    /// 1-based rank by validation rollout error; diverged runs are unranked.
    pub rank: Option<usize>,
    pub selected: bool,
    pub val_rollout_rmse: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    /// Ranked runs first, then diverged runs in grid order.
    pub entries: Vec<SweepEntry>,
    /// Trained parameters, aligned with `entries` (`None` if diverged).
    pub params: Vec<Option<ModelParams<f64>>>,
    pub top: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Trains one run per learning rate (concurrently) and ranks them by
/// validation rollout error under the training integrator.
pub fn lr_sweep(
    base: &TrainConfig,
    grid: &[f64],
    train_set: &[PairRecord],
    val_set: &[PairRecord],
    val_trajectories: &[TrajectoryCell],
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Config("learning-rate grid is empty".into()));
    }
    base.validate()?;
    let runs: Vec<(SweepEntry, Option<ModelParams<f64>>)> = grid
        .par_iter()
        .map(|&lr| {
            let config = TrainConfig { lr, ..base.clone() };
            let mut entry = SweepEntry {
                run: config.run_name(),
                model: config.model,
                integrator: config.integrator,
                lr,
                seed: config.seed,
                rank: None,
                selected: false,
                val_rollout_rmse: None,
                best_val_loss: None,
                diverged: true,
            };
            match train(&config, train_set, val_set) {
                Ok(outcome) => {
                    let rmse = pooled_rollout_rmse(&outcome.params, config.integrator, val_trajectories)?;
                    entry.diverged = !rmse.is_finite();
                    entry.val_rollout_rmse = rmse.is_finite().then_some(rmse);
                    entry.best_val_loss = Some(outcome.best_val_loss);
                    Ok((entry, Some(outcome.params)))
                }
                Err(Error::Diverged { .. } | Error::NonFinite(_)) => Ok((entry, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let (mut ok, failed): (Vec<_>, Vec<_>) = runs.into_iter().partition(|(e, _)| e.val_rollout_rmse.is_some());
    if ok.is_empty() {
        return Err(Error::SweepDiverged);
    }
    ok.sort_by(|a, b| a.0.val_rollout_rmse.partial_cmp(&b.0.val_rollout_rmse).expect("finite"));
    let top = top_k(grid.len()).min(ok.len());
    for (i, (e, _)) in ok.iter_mut().enumerate() {
        e.rank = Some(i + 1);
        e.selected = i < top;
    }
    let chosen: Vec<f64> = ok[..top].iter().map(|(e, _)| e.val_rollout_rmse.expect("ranked")).collect();
    let (entries, params) = ok.into_iter().chain(failed).unzip();
    Ok(SweepReport { entries, params, top, median: median(&chosen), min: chosen[0], max: chosen[top - 1] })
}
