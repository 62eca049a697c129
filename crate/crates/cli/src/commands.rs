use std::path::{Path, PathBuf};

use hogn::dataio::{
    self, checkpoint_path, generate_eval_trajectories, generate_pair_dataset, pairs_path, read_checkpoint,
    read_metrics, read_pairs, read_trajectories, trajectories_path, upsert_metrics, write_checkpoint, write_jsonl,
    write_metrics, write_pairs, write_trajectories, CellMeta, MetricsLine, PairRecord, TrajectoryCell, METRICS_SCHEMA,
};
use hogn::evaluation::{evaluate_grid, Candidate};
use hogn::integrators::Integrator;
use hogn::models::{rollout, ModelKind, ModelParams};
use hogn::physics::{simulate_with_step, steps_for, SystemConfig, Trajectory, GENERATION_STEP};
use hogn::training::{lr_sweep, train_with, TrainConfig};
use hogn::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Config, TEST, TRAIN, VAL};
use crate::{Cli, Command, ConfigArgs, ModelArgs};

pub const ROLLOUT_FORMAT: &str = "hogn-rollout";

/// Runs one subcommand and returns a one-line JSON summary.
pub fn run(cli: Cli) -> Result<Value> {
    let out = cli.out_dir;
    match cli.command {
        Command::Generate { config } => generate(&out, &load(&config)?),
        Command::Train { config, model } => train(&out, &load(&config)?, &model),
        Command::Sweep { config, model } => sweep(&out, &load(&config)?, &model),
        Command::Evaluate { config, runs } => evaluate(&out, &load(&config)?, &runs),
        Command::Rollout { config, run, integrator, dt, steps, particles, index } => {
            let request = RolloutRequest { run, integrator, dt, steps, particles, index };
            rollout_command(&out, &load(&config)?, &request)
        }
        Command::Export { output, curves } => export(&out, output, curves),
    }
}

struct Loaded {
    config: Config,
    overrides: Vec<String>,
}

fn load(args: &ConfigArgs) -> Result<Loaded> {
    Ok(Loaded { config: Config::load(&args.config, &args.overrides)?, overrides: args.overrides.clone() })
}

/// Seed, configuration hash and version written next to every output.
/// Contains nothing run-specific beyond its inputs, so reruns reproduce it.
fn write_stanza(out: &Path, name: &str, loaded: Option<&Loaded>, args: Value) -> Result<PathBuf> {
    let path = out.join("repro").join(format!("{name}.json"));
    let mut stanza = json!({
        "command": name,
        "version": env!("CARGO_PKG_VERSION"),
        "arguments": args,
    });
    if let Some(l) = loaded {
        stanza["seed"] = json!(l.config.seed);
        stanza["config_hash"] = json!(l.config.hash());
        stanza["overrides"] = json!(l.overrides);
        stanza["config"] = serde_json::to_value(&l.config).expect("config serializes");
    }
    write_json(&path, &stanza)?;
    Ok(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.jsonl")
}

fn generate(out: &Path, loaded: &Loaded) -> Result<Value> {
    let c = &loaded.config;
    let mut files = Vec::new();
    let variants: &[bool] = if c.data.variable { &[false, true] } else { &[false] };
    for &variable in variants {
        for split in [TRAIN, VAL, TEST] {
            let manifest = c.pair_manifest(split, variable);
            let records = generate_pair_dataset(&manifest)?;
            let path = pairs_path(out, &manifest.split);
            write_pairs(&path, &manifest, &records)?;
            files.push(json!({ "path": path, "records": records.len() }));
        }
    }
    let mut val = c.trajectory_manifest(VAL);
    val.particle_counts = c.data.train_particle_counts.clone();
    val.dts = vec![c.sweep.rank_dt];
    for manifest in [c.trajectory_manifest(TEST), val] {
        for cell in generate_eval_trajectories(&manifest)? {
            let meta = CellMeta {
                split: manifest.split.clone(),
                n: cell.n,
                dt: cell.dt,
                length: manifest.length,
                seed: manifest.seed,
            };
            let path = trajectories_path(out, &manifest.split, cell.n, cell.dt);
            write_trajectories(&path, &meta, &cell.records)?;
            files.push(json!({ "path": path, "records": cell.records.len() }));
        }
    }
    let stanza = write_stanza(out, "generate", Some(loaded), json!({}))?;
    Ok(json!({ "status": "ok", "command": "generate", "files": files, "stanza": stanza }))
}

fn load_pairs(out: &Path, split: &str, variable: bool) -> Result<Vec<PairRecord>> {
    Ok(read_pairs(&pairs_path(out, &Config::split_name(split, variable)))?.1)
}

fn load_cells(out: &Path, split: &str, counts: &[usize], dts: &[f64]) -> Result<Vec<TrajectoryCell>> {
    let mut cells = Vec::new();
    for &n in counts {
        for &dt in dts {
            let (meta, records) = read_trajectories(&trajectories_path(out, split, n, dt))?;
            cells.push(TrajectoryCell { n: meta.n, dt: meta.dt, records });
        }
    }
    Ok(cells)
}

fn checkpoint_meta(loaded: &Loaded, train: &TrainConfig, extra: Value) -> Value {
    json!({
        "run": train.run_name(),
        "train": train,
        "config_hash": loaded.config.hash(),
        "version": env!("CARGO_PKG_VERSION"),
        "result": extra,
    })
}

fn train(out: &Path, loaded: &Loaded, args: &ModelArgs) -> Result<Value> {
    let config = loaded.config.train_config(args.model, args.integrator, args.variable);
    config.validate()?;
    let train_set = load_pairs(out, TRAIN, args.variable)?;
    let val_set = load_pairs(out, VAL, args.variable)?;
    let run = config.run_name();
    let outcome = train_with(&config, &train_set, &val_set, |p| {
        eprintln!("{run} step {} train {:.4e} val {:.4e} lr {:.3e}", p.step, p.train_loss, p.val_loss, p.lr);
    })?;

    let summary = json!({
        "best_step": outcome.best_step,
        "best_val_loss": outcome.best_val_loss,
        "initial_train_loss": outcome.initial_train_loss,
        "final_train_loss": outcome.final_train_loss,
    });
    let ckpt = checkpoint_path(out, &run);
    write_checkpoint(&ckpt, &outcome.params, &checkpoint_meta(loaded, &config, summary.clone()))?;
    let lines: Vec<_> = outcome
        .curve
        .iter()
        .map(|p| MetricsLine::Curve { schema: METRICS_SCHEMA, run: run.clone(), point: p.clone() })
        .collect();
    upsert_metrics(&metrics_path(out), &lines)?;
    let stanza = write_stanza(out, &format!("train-{run}"), Some(loaded), json!({ "run": run }))?;
    Ok(
        json!({ "status": "ok", "command": "train", "run": run, "checkpoint": ckpt, "summary": summary, "stanza": stanza }),
    )
}

fn sweep(out: &Path, loaded: &Loaded, args: &ModelArgs) -> Result<Value> {
    let c = &loaded.config;
    let base = c.train_config(args.model, args.integrator, args.variable);
    base.validate()?;
    let train_set = load_pairs(out, TRAIN, args.variable)?;
    let val_set = load_pairs(out, VAL, args.variable)?;
    let val_cells = load_cells(out, VAL, &c.data.train_particle_counts, &[c.sweep.rank_dt])?;
    let grid = c.lr_grid();
    let report = lr_sweep(&base, &grid, &train_set, &val_set, &val_cells)?;

    for (entry, params) in report.entries.iter().zip(&report.params) {
        if let (true, Some(params)) = (entry.selected, params) {
            let config = TrainConfig { lr: entry.lr, ..base.clone() };
            let extra = json!({ "sweep_rank": entry.rank, "val_rollout_rmse": entry.val_rollout_rmse });
            write_checkpoint(&checkpoint_path(out, &entry.run), params, &checkpoint_meta(loaded, &config, extra))?;
        }
    }
    let lines: Vec<_> =
        report.entries.iter().map(|e| MetricsLine::Sweep { schema: METRICS_SCHEMA, entry: e.clone() }).collect();
    upsert_metrics(&metrics_path(out), &lines)?;

    let dt = if args.variable { "-vardt" } else { "" };
    let name = format!("sweep-{}-{}{dt}", args.model, args.integrator);
    let report_json = json!({
        "grid": grid,
        "top": report.top,
        "median": report.median,
        "min": report.min,
        "max": report.max,
        "entries": report.entries,
    });
    let report_path = out.join(format!("{name}.json"));
    write_json(&report_path, &report_json)?;
    let stanza = write_stanza(out, &name, Some(loaded), json!({ "model": args.model, "integrator": args.integrator }))?;
    Ok(json!({
        "status": "ok",
        "command": "sweep",
        "report": report_path,
        "median": report.median,
        "selected": report.entries.iter().filter(|e| e.selected).map(|e| &e.run).collect::<Vec<_>>(),
        "stanza": stanza,
    }))
}

fn candidate_from_checkpoint(path: &Path) -> Result<Candidate> {
    let (params, meta) = read_checkpoint(path)?;
    let bad =
        |what: &str| Error::Format { path: path.to_path_buf(), reason: format!("checkpoint metadata lacks {what}") };
    let run = meta.get("run").and_then(Value::as_str).ok_or_else(|| bad("run"))?.to_string();
    let train: TrainConfig = serde_json::from_value(meta.get("train").cloned().ok_or_else(|| bad("train"))?)
        .map_err(|_| bad("a valid train config"))?;
    Ok(Candidate {
        run,
        train_integrator: params.kind.uses_integrator().then_some(train.integrator),
        params,
        train_dt_policy: Some(train.dt_policy),
        seed: Some(train.seed),
        lr: Some(train.lr),
    })
}

fn checkpoints_in(out: &Path) -> Result<Vec<String>> {
    let mut runs = Vec::new();
    let entries = match std::fs::read_dir(out) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::Missing(out.display().to_string())),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(run) = name.strip_prefix("ckpt-").and_then(|r| r.strip_suffix(".bin")) {
            runs.push(run.to_string());
        }
    }
    runs.sort();
    Ok(runs)
}

fn evaluate(out: &Path, loaded: &Loaded, runs: &[String]) -> Result<Value> {
    let c = &loaded.config;
    let runs = if runs.is_empty() { checkpoints_in(out)? } else { runs.to_vec() };
    let candidates =
        runs.iter().map(|r| candidate_from_checkpoint(&checkpoint_path(out, r))).collect::<Result<Vec<_>>>()?;
    let cells = load_cells(out, TEST, &c.data.eval_particle_counts, &c.evaluation.dts)?;
    let results = evaluate_grid(&candidates, &c.evaluation.integrators, Some(&c.evaluation.dts), &cells)?;
    let lines: Vec<_> =
        results.iter().map(|r| MetricsLine::Eval { schema: METRICS_SCHEMA, result: r.clone() }).collect();
    upsert_metrics(&metrics_path(out), &lines)?;
    let stanza = write_stanza(out, "evaluate", Some(loaded), json!({ "runs": runs }))?;
    Ok(json!({ "status": "ok", "command": "evaluate", "runs": runs, "rows": results.len(), "stanza": stanza }))
}

struct RolloutRequest {
    run: String,
    integrator: Integrator,
    dt: f64,
    steps: usize,
    particles: usize,
    index: usize,
}

#[derive(Serialize)]
struct RolloutRecord {
    source: &'static str,
    config: SystemConfig<f64>,
    trajectory: Trajectory<f64>,
}

fn rollout_command(out: &Path, loaded: &Loaded, req: &RolloutRequest) -> Result<Value> {
    let stride = steps_for(req.dt, GENERATION_STEP)?;
    if req.dt <= 0.0 || req.steps == 0 {
        return Err(Error::Config("rollout needs a positive dt and at least one step".into()));
    }
    let params = if req.run.eq_ignore_ascii_case(ModelKind::TrueHamiltonian.name()) {
        ModelParams::true_hamiltonian()
    } else {
        read_checkpoint(&checkpoint_path(out, &req.run))?.0
    };
    let seed = loaded.config.seed.wrapping_mul(1000).wrapping_add(500);
    let (system, initial) = dataio::sample_record_system(seed, req.particles, req.index)?;
    let predicted = rollout(&params, req.integrator, &system, req.dt, &initial, req.steps)?;
    let mut truth = simulate_with_step(&system, &initial, GENERATION_STEP, stride * req.steps).subsample(stride);
    truth.dt = req.dt;

    let name =
        format!("rollout-{}-{}-{}-{}-{}-{}", req.run, req.integrator, req.dt, req.steps, req.particles, req.index);
    let path = out.join(format!("{name}.jsonl"));
    let meta = json!({
        "run": req.run,
        "integrator": req.integrator,
        "dt": req.dt,
        "steps": req.steps,
        "particles": req.particles,
        "index": req.index,
        "seed": seed,
    });
    let records = [
        RolloutRecord { source: "model", config: system.clone(), trajectory: predicted },
        RolloutRecord { source: "ground_truth", config: system, trajectory: truth },
    ];
    write_jsonl(&path, ROLLOUT_FORMAT, &meta, &records)?;
    let stanza = write_stanza(out, &name, Some(loaded), meta)?;
    Ok(json!({ "status": "ok", "command": "rollout", "trajectory": path, "stanza": stanza }))
}

fn export(out: &Path, output: Option<PathBuf>, curves: bool) -> Result<Value> {
    let lines = read_metrics(&metrics_path(out))?;
    let mut kept: Vec<(u8, String, MetricsLine)> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for l in lines {
        let rank = match l {
            MetricsLine::Eval { .. } => 0,
            MetricsLine::Sweep { .. } => 1,
            MetricsLine::Curve { .. } if curves => 2,
            MetricsLine::Curve { .. } => continue,
        };
        let key = l.key();
        match index.get(&key) {
            Some(&i) => kept[i] = (rank, key, l),
            None => {
                index.insert(key.clone(), kept.len());
                kept.push((rank, key, l));
            }
        }
    }
    kept.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let table: Vec<MetricsLine> = kept.into_iter().map(|(_, _, l)| l).collect();
    let path = output.unwrap_or_else(|| out.join("export.jsonl"));
    write_metrics(&path, &table)?;
    let stanza = write_stanza(out, "export", None, json!({ "output": path, "curves": curves }))?;
    Ok(json!({ "status": "ok", "command": "export", "output": path, "rows": table.len(), "stanza": stanza }))
}
