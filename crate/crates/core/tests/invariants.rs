use hogn::autodiff::{gradient, Tape};
use hogn::dataio::{generate_pair_dataset, DatasetManifest, DtPolicy};
use hogn::integrators::Integrator;
use hogn::models::{model_derivatives, model_hamiltonian, predict_step, ModelKind, ModelParams};
use hogn::physics::{
    hooke_force, potential_energy, sample_system, true_derivatives, true_hamiltonian, SpringField, State, SystemConfig,
};
use hogn::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn system(seed: u64, n: usize) -> (SystemConfig<f64>, State<f64>) {
    sample_system(&mut ChaCha8Rng::seed_from_u64(seed), n).unwrap()
}

fn model(kind: ModelKind, seed: u64) -> ModelParams<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    if kind == ModelKind::TrueHamiltonian {
        ModelParams::true_hamiltonian()
    } else {
        ModelParams::init(kind, &[16, 16], false, &mut r).unwrap()
    }
}

fn arb_state() -> impl Strategy<Value = (SystemConfig<f64>, State<f64>)> {
    (2usize..=6).prop_flat_map(|n| {
        (
            prop::collection::vec(0.1f64..1.0, n),
            prop::collection::vec(0.5f64..1.0, n),
            prop::collection::vec(-2.0f64..2.0, 2 * n),
            prop::collection::vec(-2.0f64..2.0, 2 * n),
        )
            .prop_map(|(m, k, q, p)| (SystemConfig::new(m, k).unwrap(), State::new(q, p).unwrap()))
    })
}

fn arb_kind() -> impl Strategy<Value = ModelKind> {
    prop::sample::select(ModelKind::ALL.to_vec())
}

fn arb_integrator() -> impl Strategy<Value = Integrator> {
    prop::sample::select(Integrator::ALL.to_vec())
}

fn permuted(c: &SystemConfig<f64>, s: &State<f64>, perm: &[usize]) -> (SystemConfig<f64>, State<f64>) {
    let pc = SystemConfig::new(
        perm.iter().map(|&i| c.masses()[i]).collect(),
        perm.iter().map(|&i| c.springs()[i]).collect(),
    )
    .unwrap();
    let ps = State {
        q: perm.iter().flat_map(|&i| s.q[2 * i..2 * i + 2].to_vec()).collect(),
        p: perm.iter().flat_map(|&i| s.p[2 * i..2 * i + 2].to_vec()).collect(),
    };
    (pc, ps)
}

proptest! {
    #[test]
    fn spring_forces_sum_to_zero((c, s) in arb_state()) {
        let f = true_derivatives(&c, &s).p;
        for k in 0..2 {
            let total: f64 = f.iter().skip(k).step_by(2).sum();
            prop_assert!(total.abs() < 1e-12, "net force {total}");
        }
    }

    #[test]
    fn spring_forces_ignore_translation((c, s) in arb_state(), dx in -3.0f64..3.0, dy in -3.0f64..3.0) {
        let moved: Vec<f64> = s.q.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { dx } else { dy }).collect();
        for (a, b) in hooke_force(&c, &moved).iter().zip(hooke_force(&c, &s.q)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let (v0, v1) = (potential_energy(&c, &s.q), potential_energy(&c, &moved));
        prop_assert!((v0 - v1).abs() < 1e-12 * v0.max(1.0));
    }

    #[test]
    fn euler_step_is_state_plus_dt_rate((c, s) in arb_state(), dt in 0.001f64..0.5) {
        let next = Integrator::Rk1.step(&dt, &s, &mut SpringField { config: &c }).unwrap();
        let d = true_derivatives(&c, &s);
        let q: Vec<f64> = s.q.iter().zip(&d.q).map(|(x, v)| x + dt * v).collect();
        let p: Vec<f64> = s.p.iter().zip(&d.p).map(|(x, v)| x + dt * v).collect();
        prop_assert_eq!(next, State { q, p });
    }

    #[test]
    fn gradient_of_a_constant_is_zero(v in -5.0f64..5.0, x in prop::collection::vec(-2.0f64..2.0, 1..6)) {
        let tape = Tape::new();
        let xv = tape.leaf(Tensor::column(x.clone()));
        let _used = xv.square().sum();
        let constant = tape.scalar(v).square();
        let g = gradient(constant, xv).unwrap();
        prop_assert!(!g.connected);
        prop_assert!(g.value.value().data().iter().all(|&d| d == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predictions_are_deterministic_and_finite(
        kind in arb_kind(), integ in arb_integrator(), seed in any::<u64>(), n in 2usize..=9, dt in 0.005f64..0.5
    ) {
        let params = model(kind, seed);
        let (c, s) = system(seed ^ 0x5eed, n);
        let a = predict_step(&params, integ, &c, dt, &s).unwrap();
        let b = predict_step(&params, integ, &c, dt, &s).unwrap();
        prop_assert!(a.is_finite());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn zero_step_is_the_identity(kind in arb_kind(), integ in arb_integrator(), seed in any::<u64>(), n in 2usize..=6) {
        // DeltaGN predicts a displacement without consulting dt.
        prop_assume!(kind.uses_integrator());
        let params = model(kind, seed);
        let (c, s) = system(seed ^ 1, n);
        prop_assert_eq!(predict_step(&params, integ, &c, 0.0, &s).unwrap(), s);
    }

    #[test]
    fn derivative_models_are_permutation_equivariant(
        kind in prop::sample::select(vec![ModelKind::OGN, ModelKind::HOGN, ModelKind::SeparableOGN, ModelKind::SeparableHOGN]),
        seed in any::<u64>(),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let params = model(kind, seed);
        let (c, s) = system(seed ^ 2, 6);
        let (pc, ps) = permuted(&c, &s, &perm);
        let d = model_derivatives(&params, &c, &s).unwrap();
        let pd = model_derivatives(&params, &pc, &ps).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            for k in 0..2 {
                prop_assert!((pd.q[2 * row + k] - d.q[2 * src + k]).abs() < 1e-12);
                prop_assert!((pd.p[2 * row + k] - d.p[2 * src + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn learned_hamiltonians_are_invariant(
        kind in prop::sample::select(vec![ModelKind::HOGN, ModelKind::SeparableHOGN]),
        seed in any::<u64>(),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        shift in (-1.0f64..1.0, -1.0f64..1.0),
    ) {
        let params = model(kind, seed);
        let (c, s) = system(seed ^ 3, 5);
        let h = model_hamiltonian(&params, &c, &s).unwrap();
        let (pc, ps) = permuted(&c, &s, &perm);
        prop_assert!((model_hamiltonian(&params, &pc, &ps).unwrap() - h).abs() < 1e-12);
        let moved = State {
            q: s.q.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { shift.0 } else { shift.1 }).collect(),
            p: s.p.clone(),
        };
        prop_assert!((model_hamiltonian(&params, &c, &moved).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn true_hamiltonian_model_matches_the_physics(seed in any::<u64>(), n in 2usize..=9) {
        let (c, s) = system(seed, n);
        let params = ModelParams::true_hamiltonian();
        let d = model_derivatives(&params, &c, &s).unwrap();
        let exact = true_derivatives(&c, &s);
        for (a, b) in d.q.iter().chain(&d.p).zip(exact.q.iter().chain(&exact.p)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        let h = model_hamiltonian(&params, &c, &s).unwrap();
        prop_assert!((h - true_hamiltonian(&c, &s)).abs() < 1e-10 * h.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn datasets_are_a_pure_function_of_the_manifest(seed in any::<u64>(), variable in any::<bool>()) {
        let policy = if variable { DtPolicy::standard_variable() } else { DtPolicy::standard_fixed() };
        let manifest = DatasetManifest { split: "p".into(), particle_counts: vec![3, 4], count: 5, dt_policy: policy, seed };
        let a = generate_pair_dataset(&manifest).unwrap();
        prop_assert_eq!(&a, &generate_pair_dataset(&manifest).unwrap());
        for r in &a {
            prop_assert!(r.resimulation_error() < 1e-6);
        }
    }
}
