//! Dataset generation and every on-disk artifact.
//!
//! Datasets, trajectories and metrics are line-delimited JSON: a header
//! line naming the format, its version and the record count, then one
//! record per line. Checkpoints are a JSON header line followed by the
//! weights as little-endian `f64`. Field names are listed in `FORMATS.md`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Parameters;
use crate::error::{Error, Result};
use crate::graphnet::{GnParams, Readout};
use crate::models::{ModelKind, ModelParams};
use crate::physics::{sample_system, simulate_with_step, State, SystemConfig, Trajectory, GENERATION_STEP};

pub const PAIRS_FORMAT: &str = "hogn-pairs";
pub const TRAJECTORIES_FORMAT: &str = "hogn-trajectories";
pub const CHECKPOINT_FORMAT: &str = "hogn-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Longest simulated trajectory a training pair is drawn from, in seconds.
pub const MAX_TRAJECTORY_DURATION: f64 = 4.0;

/// Step sizes of the stored evaluation trajectories.
pub const EVAL_DTS: [f64; 9] = [0.005, 0.01, 0.03, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5];

/// Particle counts of the full evaluation grid.
pub const EVAL_PARTICLE_COUNTS: [usize; 5] = [4, 5, 6, 8, 9];

/// Steps per evaluation trajectory.
pub const EVAL_LENGTH: usize = 20;

/// How far apart the two states of a training pair are.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DtPolicy {
    /// Every pair is `dt` apart, simulated at the standard generation step.
    Fixed { dt: f64 },
    /// `dt` uniform in `[min, max]`, rounded to a whole number of
    /// generation steps; the generation step itself is drawn per
    /// trajectory from `GENERATION_STEP · (1 ± jitter)`.
    Uniform { min: f64, max: f64, jitter: f64 },
}

impl DtPolicy {
    pub fn standard_fixed() -> Self {
        DtPolicy::Fixed { dt: 0.1 }
    }

    pub fn standard_variable() -> Self {
        DtPolicy::Uniform { min: 0.02, max: 0.2, jitter: 0.1 }
    }

    pub fn is_variable(&self) -> bool {
        matches!(self, DtPolicy::Uniform { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DtPolicy::Fixed { dt } => {
                crate::physics::steps_for(dt, GENERATION_STEP)?;
                if dt <= 0.0 {
                    return Err(Error::Config("fixed dt must be positive".into()));
                }
            }
            DtPolicy::Uniform { min, max, jitter } => {
                if !(min > 0.0 && max >= min && (0.0..1.0).contains(&jitter)) {
                    return Err(Error::Config(format!("invalid dt range [{min}, {max}] with jitter {jitter}")));
                }
            }
        }
        Ok(())
    }

    /// `(generation step, number of generation steps per pair)`.
    fn draw(&self, rng: &mut impl Rng) -> Result<(f64, usize)> {
        match *self {
            DtPolicy::Fixed { dt } => Ok((GENERATION_STEP, crate::physics::steps_for(dt, GENERATION_STEP)?)),
            DtPolicy::Uniform { min, max, jitter } => {
                let step = GENERATION_STEP * rng.gen_range(1.0 - jitter..=1.0 + jitter);
                let dt = rng.gen_range(min..=max);
                Ok((step, ((dt / step).round() as usize).max(1)))
            }
        }
    }
}

/// What to generate for one split of one-step pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub particle_counts: Vec<usize>,
    /// Pairs per particle count.
    pub count: usize,
    pub dt_policy: DtPolicy,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.particle_counts.is_empty() {
            return Err(Error::Config("a dataset needs at least one record".into()));
        }
        if self.particle_counts.iter().any(|&n| n < 2) {
            return Err(Error::Config("particle counts must be at least 2".into()));
        }
        self.dt_policy.validate()
    }

    pub fn total(&self) -> usize {
        self.count * self.particle_counts.len()
    }
}

/// Two states of one system `dt` apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub config: SystemConfig<f64>,
    pub dt: f64,
    pub state_in: State<f64>,
    pub state_out: State<f64>,
    /// Step the reference simulator used between the two states.
    pub generation_step: f64,
    /// Start of `state_in` along its trajectory, in generation steps.
    pub offset_steps: usize,
    pub seed: u64,
    pub stream: u64,
}

impl PairRecord {
    /// Number of generation steps between the two states.
    pub fn steps(&self) -> usize {
        (self.dt / self.generation_step).round() as usize
    }

    /// RMS position difference between the stored and a re-simulated output.
    pub fn resimulation_error(&self) -> f64 {
        let again = simulate_with_step(&self.config, &self.state_in, self.generation_step, self.steps());
        crate::evaluation::rms_difference(&again.last().q, &self.state_out.q)
    }
}

fn record_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws the system and initial state of record `index` among systems of
/// `n` particles, as the generators do for a given seed.
pub fn sample_record_system(seed: u64, n: usize, index: usize) -> Result<(SystemConfig<f64>, State<f64>)> {
    sample_system(&mut record_rng(seed, stream_id(n, index)), n)
}

/// Stream id of record `index` among systems of `n` particles.
fn stream_id(n: usize, index: usize) -> u64 {
    ((n as u64) << 40) | index as u64
}

fn generate_pair(policy: &DtPolicy, n: usize, seed: u64, stream: u64) -> Result<PairRecord> {
    let mut rng = record_rng(seed, stream);
    let (config, initial) = sample_system::<f64>(&mut rng, n)?;
    let (step, steps) = policy.draw(&mut rng)?;
    let dt = step * steps as f64;
    let total = (MAX_TRAJECTORY_DURATION / step).floor() as usize;
    let offset_steps = rng.gen_range(0..=total.saturating_sub(steps));
    let state_in = simulate_with_step(&config, &initial, step, offset_steps).states.pop().expect("non-empty");
    let state_out = simulate_with_step(&config, &state_in, step, steps).states.pop().expect("non-empty");
    Ok(PairRecord { config, dt, state_in, state_out, generation_step: step, offset_steps, seed, stream })
}

/// One pair per independently sampled trajectory, starting at a random
/// point within [`MAX_TRAJECTORY_DURATION`]. Records are grouped by
/// particle count in manifest order; each draws from its own stream, so
/// the result does not depend on thread scheduling.
pub fn generate_pair_dataset(manifest: &DatasetManifest) -> Result<Vec<PairRecord>> {
    manifest.validate()?;
    let jobs: Vec<(usize, usize)> =
        manifest.particle_counts.iter().flat_map(|&n| (0..manifest.count).map(move |i| (n, i))).collect();
    jobs.par_iter().map(|&(n, i)| generate_pair(&manifest.dt_policy, n, manifest.seed, stream_id(n, i))).collect()
}

/// What to generate for one split of evaluation trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub split: String,
    pub particle_counts: Vec<usize>,
    pub dts: Vec<f64>,
    /// Trajectories per `(n, dt)` cell.
    pub count: usize,
    /// Steps per trajectory; each stores `length + 1` states.
    pub length: usize,
    pub seed: u64,
}

impl TrajectoryManifest {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.length == 0 || self.particle_counts.is_empty() || self.dts.is_empty() {
            return Err(Error::Config("trajectory manifest must be non-empty with length ≥ 1".into()));
        }
        if self.particle_counts.iter().any(|&n| n < 2) {
            return Err(Error::Config("particle counts must be at least 2".into()));
        }
        for &dt in &self.dts {
            crate::physics::steps_for(dt, GENERATION_STEP)?;
            if dt <= 0.0 {
                return Err(Error::Config("trajectory dt must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Ground truth sampled every `dt` from an RK4 simulation at the
/// generation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub config: SystemConfig<f64>,
    pub trajectory: Trajectory<f64>,
    pub seed: u64,
    pub stream: u64,
}

/// All trajectories of one `(n, dt)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryCell {
    pub n: usize,
    pub dt: f64,
    pub records: Vec<TrajectoryRecord>,
}

/// Header metadata of a trajectory file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub split: String,
    pub n: usize,
    pub dt: f64,
    pub length: usize,
    pub seed: u64,
}

/// Trajectory `i` of particle count `n` starts from the same initial
/// condition at every `dt`, so cells differ only in sampling interval.
pub fn generate_eval_trajectories(manifest: &TrajectoryManifest) -> Result<Vec<TrajectoryCell>> {
    manifest.validate()?;
    let mut cells = Vec::with_capacity(manifest.particle_counts.len() * manifest.dts.len());
    for &n in &manifest.particle_counts {
        for &dt in &manifest.dts {
            let stride = crate::physics::steps_for(dt, GENERATION_STEP)?;
            let records = (0..manifest.count)
                .into_par_iter()
                .map(|i| {
                    let stream = stream_id(n, i);
                    let (config, initial) = sample_system::<f64>(&mut record_rng(manifest.seed, stream), n)?;
                    let fine = simulate_with_step(&config, &initial, GENERATION_STEP, stride * manifest.length);
                    let mut trajectory = fine.subsample(stride);
                    trajectory.dt = dt;
                    Ok(TrajectoryRecord { config, trajectory, seed: manifest.seed, stream })
                })
                .collect::<Result<Vec<_>>>()?;
            cells.push(TrajectoryCell { n, dt, records });
        }
    }
    Ok(cells)
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    format: String,
    version: u32,
    records: usize,
    meta: M,
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn check_version(path: &Path, format: &str, found_format: &str, found: u32) -> Result<()> {
    if found_format != format {
        return Err(format_error(path, format!("expected format {format:?}, found {found_format:?}")));
    }
    if found != FORMAT_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), kind: format.into(), found, expected: FORMAT_VERSION });
    }
    Ok(())
}

/// Writes a header line then one JSON record per line. The file is
/// written to a temporary sibling and renamed into place.
pub fn write_jsonl<M: Serialize, R: Serialize>(path: &Path, format: &str, meta: &M, records: &[R]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let header = Header { format: format.to_string(), version: FORMAT_VERSION, records: records.len(), meta };
        serde_json::to_writer(&mut w, &header).map_err(|e| format_error(path, e.to_string()))?;
        w.write_all(b"\n")?;
        for r in records {
            serde_json::to_writer(&mut w, r).map_err(|e| format_error(path, e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a file written by [`write_jsonl`]; any missing, extra or
/// malformed line is an error.
pub fn read_jsonl<M: DeserializeOwned, R: DeserializeOwned>(path: &Path, format: &str) -> Result<(M, Vec<R>)> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| format_error(path, "empty file"))??;
    let header: Header<serde_json::Value> =
        serde_json::from_str(&first).map_err(|e| format_error(path, format!("header: {e}")))?;
    check_version(path, format, &header.format, header.version)?;
    let meta: M = serde_json::from_value(header.meta).map_err(|e| format_error(path, format!("header: {e}")))?;
    let mut records = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if i >= header.records {
            return Err(format_error(path, format!("more than the {} declared records", header.records)));
        }
        let r = serde_json::from_str(&line).map_err(|e| format_error(path, format!("record {i}: {e}")))?;
        records.push(r);
    }
    if records.len() != header.records {
        return Err(format_error(path, format!("truncated: {} of {} records", records.len(), header.records)));
    }
    Ok((meta, records))
}

fn check_config(path: &Path, config: &SystemConfig<f64>) -> Result<()> {
    SystemConfig::new(config.masses().to_vec(), config.springs().to_vec())
        .map(|_| ())
        .map_err(|e| format_error(path, e.to_string()))
}

pub fn pairs_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("pairs-{split}.jsonl"))
}

pub fn trajectories_path(dir: &Path, split: &str, n: usize, dt: f64) -> PathBuf {
    dir.join(format!("traj-{split}-{n}-{dt}.jsonl"))
}

pub fn write_pairs(path: &Path, manifest: &DatasetManifest, records: &[PairRecord]) -> Result<()> {
    write_jsonl(path, PAIRS_FORMAT, manifest, records)
}

pub fn read_pairs(path: &Path) -> Result<(DatasetManifest, Vec<PairRecord>)> {
    let (m, records): (DatasetManifest, Vec<PairRecord>) = read_jsonl(path, PAIRS_FORMAT)?;
    for r in &records {
        check_config(path, &r.config)?;
        if !(r.dt > 0.0) || r.state_in.n() != r.config.n() || r.state_out.n() != r.config.n() {
            return Err(format_error(path, "pair record with inconsistent shapes or dt"));
        }
    }
    Ok((m, records))
}

pub fn write_trajectories(path: &Path, meta: &CellMeta, records: &[TrajectoryRecord]) -> Result<()> {
    write_jsonl(path, TRAJECTORIES_FORMAT, meta, records)
}

pub fn read_trajectories(path: &Path) -> Result<(CellMeta, Vec<TrajectoryRecord>)> {
    let (m, records): (CellMeta, Vec<TrajectoryRecord>) = read_jsonl(path, TRAJECTORIES_FORMAT)?;
    for r in &records {
        check_config(path, &r.config)?;
        if r.trajectory.states.len() != m.length + 1 || r.trajectory.states.iter().any(|s| s.n() != m.n) {
            return Err(format_error(path, "trajectory does not match its header"));
        }
    }
    Ok((m, records))
}

/// Layout of one network, enough to rebuild it from a flat weight array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetLayout {
    pub node_features: usize,
    pub hidden: Vec<usize>,
    pub readout: Readout,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    kind: ModelKind,
    dt_feature: bool,
    nets: Vec<NetLayout>,
    scalars: usize,
    meta: serde_json::Value,
}

/// Writes a checkpoint: one JSON header line, then every weight in
/// [`Parameters`] order as a little-endian `f64`.
pub fn write_checkpoint(path: &Path, params: &ModelParams<f64>, meta: &serde_json::Value) -> Result<()> {
    params.validate()?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: FORMAT_VERSION,
        kind: params.kind,
        dt_feature: params.dt_feature,
        nets: params
            .nets
            .iter()
            .map(|n| NetLayout {
                node_features: n.node_features(),
                hidden: n.hidden_sizes(),
                readout: n.readout,
                output: n.output_size(),
            })
            .collect(),
        scalars: params.num_scalars(),
        meta: meta.clone(),
    };
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut w, &header).map_err(|e| format_error(path, e.to_string()))?;
        w.write_all(b"\n")?;
        for t in params.tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`], returning the
/// parameters and the free-form metadata stored with them.
pub fn read_checkpoint(path: &Path) -> Result<(ModelParams<f64>, serde_json::Value)> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
            _ => Error::Io(e),
        })?
        .read_to_end(&mut bytes)?;
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| format_error(path, "missing header line"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| format_error(path, format!("header: {e}")))?;
    check_version(path, CHECKPOINT_FORMAT, &header.format, header.version)?;
    let body = &bytes[split + 1..];
    if body.len() != header.scalars * 8 {
        return Err(format_error(path, format!("expected {} weight bytes, found {}", header.scalars * 8, body.len())));
    }
    if header.nets.iter().any(|n| n.hidden.is_empty()) {
        return Err(format_error(path, "network without hidden layers"));
    }
    let mut params = ModelParams {
        kind: header.kind,
        dt_feature: header.dt_feature,
        nets: header.nets.iter().map(|n| GnParams::zeros(n.node_features, &n.hidden, n.readout, n.output)).collect(),
    };
    if params.num_scalars() != header.scalars {
        return Err(format_error(path, "layout does not match the declared weight count"));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = values.next().expect("length checked");
        }
    }
    params.validate().map_err(|e| format_error(path, e.to_string()))?;
    Ok((params, header.meta))
}

pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("ckpt-{name}.bin"))
}

/// Schema version stamped on every metrics line.
pub const METRICS_SCHEMA: u32 = 1;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricsLine {
    Curve {
        schema: u32,
        run: String,
        #[serde(flatten)]
        point: crate::training::CurvePoint,
    },
    Eval {
        schema: u32,
        #[serde(flatten)]
        result: crate::evaluation::EvalResult,
    },
    Sweep {
        schema: u32,
        #[serde(flatten)]
        entry: crate::training::SweepEntry,
    },
}

impl MetricsLine {
    pub fn schema(&self) -> u32 {
        match self {
            MetricsLine::Curve { schema, .. }
            | MetricsLine::Eval { schema, .. }
            | MetricsLine::Sweep { schema, .. } => *schema,
        }
    }

    /// Identity used by [`upsert_metrics`]: a later line with the same key
    /// replaces an earlier one.
    pub fn key(&self) -> String {
        match self {
            MetricsLine::Curve { run, point, .. } => format!("curve/{run}/{}", point.step),
            MetricsLine::Eval { result: r, .. } => {
                let integ = r.test_integrator.map_or_else(|| "-".to_string(), |i| i.to_string());
                format!("eval/{}/{integ}/{}", r.run, r.test_dt)
            }
            MetricsLine::Sweep { entry, .. } => format!("sweep/{}", entry.run),
        }
    }
}

/// Rewrites a metrics file with `lines` (via a temporary sibling).
pub fn write_metrics(path: &Path, lines: &[MetricsLine]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for l in lines {
            serde_json::to_writer(&mut w, l).map_err(|e| format_error(path, e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Merges `lines` into a metrics file: lines whose key already exists are
/// replaced in place, new keys are appended. Repeating an identical
/// update leaves the file byte-for-byte unchanged.
pub fn upsert_metrics(path: &Path, lines: &[MetricsLine]) -> Result<()> {
    let mut existing = match read_metrics(path) {
        Ok(v) => v,
        Err(Error::Missing(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    let mut index: std::collections::HashMap<String, usize> =
        existing.iter().enumerate().map(|(i, l)| (l.key(), i)).collect();
    for l in lines {
        match index.get(&l.key()) {
            Some(&i) => existing[i] = l.clone(),
            None => {
                index.insert(l.key(), existing.len());
                existing.push(l.clone());
            }
        }
    }
    write_metrics(path, &existing)
}

/// Appends lines to a metrics file, creating it if needed.
pub fn append_metrics(path: &Path, lines: &[MetricsLine]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(path)?);
    for l in lines {
        serde_json::to_writer(&mut w, l).map_err(|e| format_error(path, e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: MetricsLine =
            serde_json::from_str(&line).map_err(|e| format_error(path, format!("line {}: {e}", i + 1)))?;
        if l.schema() != METRICS_SCHEMA {
            return Err(Error::Version {
                path: path.to_path_buf(),
                kind: "metrics".into(),
                found: l.schema(),
                expected: METRICS_SCHEMA,
            });
        }
        out.push(l);
    }
    Ok(out)
}
