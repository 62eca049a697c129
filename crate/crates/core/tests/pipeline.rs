//! Generate, train, checkpoint, evaluate and record metrics on a tiny budget.

use hogn::dataio::{
    generate_eval_trajectories, generate_pair_dataset, read_checkpoint, read_metrics, read_pairs, upsert_metrics,
    write_checkpoint, write_pairs, DatasetManifest, DtPolicy, MetricsLine, TrajectoryManifest, METRICS_SCHEMA,
};
use hogn::evaluation::{evaluate_grid, Candidate};
use hogn::integrators::Integrator;
use hogn::models::ModelKind;
use hogn::training::{train, TrainConfig};

#[test]
fn tiny_pipeline_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = |split: &str, count, seed| DatasetManifest {
        split: split.into(),
        particle_counts: vec![3, 4],
        count,
        dt_policy: DtPolicy::standard_fixed(),
        seed,
    };
    let train_manifest = manifest("train", 40, 1);
    let path = dir.path().join("pairs-train.jsonl");
    write_pairs(&path, &train_manifest, &generate_pair_dataset(&train_manifest).unwrap()).unwrap();
    let (read_manifest, train_set) = read_pairs(&path).unwrap();
    assert_eq!(read_manifest, train_manifest);
    assert_eq!(train_set.len(), 80);
    let val_set = generate_pair_dataset(&manifest("val", 10, 2)).unwrap();

    let config = TrainConfig {
        hidden: vec![16, 16],
        batch_size: 8,
        steps: 150,
        eval_every: 50,
        ..TrainConfig::new(ModelKind::HOGN, Integrator::Rk4, DtPolicy::standard_fixed())
    };
    let outcome = train(&config, &train_set, &val_set).unwrap();
    assert!(outcome.final_train_loss < outcome.initial_train_loss);
    assert_eq!(outcome.curve.len(), 4);

    let ckpt = dir.path().join("ckpt.bin");
    write_checkpoint(&ckpt, &outcome.params, &serde_json::json!({ "run": config.run_name() })).unwrap();
    let (params, meta) = read_checkpoint(&ckpt).unwrap();
    assert_eq!(params, outcome.params);
    assert_eq!(meta["run"], config.run_name());

    let cells = generate_eval_trajectories(&TrajectoryManifest {
        split: "test".into(),
        particle_counts: vec![3, 4],
        dts: vec![0.1, 0.2],
        count: 5,
        length: 20,
        seed: 3,
    })
    .unwrap();
    let candidate = Candidate {
        run: config.run_name(),
        params,
        train_integrator: Some(Integrator::Rk4),
        train_dt_policy: Some(config.dt_policy),
        seed: Some(config.seed),
        lr: Some(config.lr),
    };
    let results = evaluate_grid(&[candidate], &[Integrator::Rk2, Integrator::Rk4], None, &cells).unwrap();
    // trained model and the true-Hamiltonian reference, 2 integrators × 2 dts each
    assert_eq!(results.len(), 8);
    assert!(results.iter().all(|r| r.trajectories == 10 && r.rollout_rmse.is_finite()));
    let diagonal: Vec<_> = results.iter().filter(|r| r.diagonal).collect();
    assert_eq!(diagonal.len(), 2);
    assert!(diagonal.iter().all(|r| r.model == ModelKind::HOGN && r.test_integrator == Some(Integrator::Rk4)));
    let truth = results.iter().find(|r| {
        r.model == ModelKind::TrueHamiltonian && r.test_dt == 0.1 && r.test_integrator == Some(Integrator::Rk4)
    });
    assert!(truth.unwrap().rollout_rmse < 1e-3);

    let metrics = dir.path().join("metrics.jsonl");
    let lines: Vec<_> = results.into_iter().map(|r| MetricsLine::Eval { schema: METRICS_SCHEMA, result: r }).collect();
    upsert_metrics(&metrics, &lines).unwrap();
    assert_eq!(read_metrics(&metrics).unwrap(), lines);
}
