//! On-disk run layout, checkpoint/resume, and the completion manifest.
//!
//! ```text
//! <out>/config.json
//! <out>/events.jsonl
//! <out>/metrics.jsonl
//! <out>/metrics.csv            at completion
//! <out>/checkpoint/{generator.jsonl, verifier.jsonl, state.json}
//! <out>/manifest.json          at completion
//! ```
//!
//! A directory with a checkpoint and no manifest is resumed: the logs are
//! cut back to the lengths recorded in `state.json` and training carries on.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::Query;
use crate::error::{Error, Result};
use crate::metrics::{self, CycleRecord, F1_POSITIVE_CLASS, METRICS_SCHEMA_VERSION};
use crate::policy::{GeneratorPolicy, VerifierPolicy};
use crate::scheduler::{
    build_datasets, dataset_digest, evaluate, metrics_digest, run_cycle_or_rewind, Decode, EvalReport, EventSink,
    PhaseCounters, QueryStream, RunData, ScheduleConfig, TrainState,
};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const EVENTS_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub metrics_schema_version: u32,
    pub events_schema_version: u32,
    pub checkpoint_schema_version: u32,
    pub f1_positive_class: String,
    pub preset: Option<String>,
    pub algo: crate::scheduler::Algo,
    pub seed: u64,
    pub config_digest: String,
    pub train_digest: String,
    pub eval_digest: String,
    pub metrics_digest: String,
    pub cycles_completed: u64,
    pub ended_early: bool,
    pub counters: PhaseCounters,
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
}

/// Everything besides the policies needed to pick a run back up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub schema_version: u32,
    pub config_digest: String,
    pub cycle: u64,
    pub counters: PhaseCounters,
    pub g_stream: QueryStream,
    pub v_stream: QueryStream,
    pub records: Vec<CycleRecord>,
    pub initial_eval: EvalReport,
    pub events_bytes: u64,
    pub metrics_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn csv_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    fn state_path(&self) -> PathBuf {
        self.checkpoint_dir().join("state.json")
    }

    pub fn generator_path(&self) -> PathBuf {
        self.checkpoint_dir().join("generator.jsonl")
    }

    pub fn verifier_path(&self) -> PathBuf {
        self.checkpoint_dir().join("verifier.jsonl")
    }

    pub fn is_complete(&self) -> bool {
        self.manifest_path().is_file()
    }

    pub fn read_manifest(&self) -> Result<Manifest> {
        let path = self.manifest_path();
        if !path.is_file() {
            return Err(Error::MissingManifest(self.root.clone()));
        }
        read_json(&path)
    }

    pub fn read_config(&self) -> Result<ScheduleConfig> {
        read_json(&self.config_path())
    }

    pub fn read_metrics(&self) -> Result<Vec<CycleRecord>> {
        let path = self.metrics_path();
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?);
        }
        Ok(out)
    }

    pub fn read_events(&self) -> Result<Vec<Value>> {
        let path = self.events_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e)))
            .collect()
    }

    pub fn load_generator(&self) -> Result<GeneratorPolicy> {
        let path = self.generator_path();
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        GeneratorPolicy::read_jsonl(BufReader::new(f))
    }

    /// `None` for runs without a verifier.
    pub fn load_verifier(&self) -> Result<Option<VerifierPolicy>> {
        let path = self.verifier_path();
        if !path.exists() {
            return Ok(None);
        }
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        VerifierPolicy::read_jsonl(BufReader::new(f)).map(Some)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Write to a sibling temp file, then rename over the target.
fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(f);
    write(&mut w)?;
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Error::json(path.display().to_string(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    })
}

/// Appends one JSON document per line and counts bytes written.
struct JsonlAppender {
    path: PathBuf,
    out: BufWriter<File>,
    bytes: u64,
}

impl JsonlAppender {
    /// Opens `path` cut back to `keep` bytes.
    fn open(path: PathBuf, keep: u64) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.set_len(keep).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(f);
        use std::io::Seek;
        out.seek(std::io::SeekFrom::End(0)).map_err(|e| Error::io(&path, e))?;
        Ok(JsonlAppender { path, out, bytes: keep })
    }

    fn push_line(&mut self, line: &str) -> Result<()> {
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| Error::io(&self.path, e))?;
        self.bytes += line.len() as u64 + 1;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl EventSink for JsonlAppender {
    fn record(&mut self, event: Value) -> Result<()> {
        let line = serde_json::to_string(&event).expect("event serializes");
        self.push_line(&line)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub manifest: Manifest,
    /// Picked up from an existing checkpoint.
    pub resumed: bool,
    /// The directory already held a finished run with this config.
    pub already_complete: bool,
}

/// Trains `cfg` inside `dir`, resuming if a checkpoint is there.
pub fn run_in_dir(cfg: &ScheduleConfig, dir: &RunDir, preset: Option<&str>) -> Result<RunOutcome> {
    run_in_dir_until(cfg, dir, preset, None)
}

/// As [`run_in_dir`], stopping without a manifest once `stop_after` cycles
/// are checkpointed. Used to exercise resume.
pub fn run_in_dir_until(
    cfg: &ScheduleConfig,
    dir: &RunDir,
    preset: Option<&str>,
    stop_after: Option<u64>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let digest = cfg.digest();
    if dir.is_complete() {
        let manifest = dir.read_manifest()?;
        if manifest.config_digest != digest {
            return Err(Error::config(format!(
                "{} holds a finished run with a different config",
                dir.root().display()
            )));
        }
        return Ok(RunOutcome { manifest, resumed: false, already_complete: true });
    }
    fs::create_dir_all(dir.checkpoint_dir()).map_err(|e| Error::io(dir.checkpoint_dir(), e))?;

    let (train, eval) = build_datasets(cfg)?;
    if train.is_empty() {
        return Err(Error::usage("empty training set"));
    }
    let data = RunData { cfg, train: &train, eval: &eval };

    let checkpoint: Option<CheckpointState> = if dir.state_path().is_file() {
        let ck: CheckpointState = read_json(&dir.state_path())?;
        if ck.config_digest != digest {
            return Err(Error::config(format!(
                "checkpoint in {} was written with a different config",
                dir.root().display()
            )));
        }
        Some(ck)
    } else {
        None
    };
    let resumed = checkpoint.is_some();

    let (mut state, initial, events_keep, metrics_keep) = match checkpoint {
        Some(ck) => {
            let state = TrainState {
                generator: dir.load_generator()?,
                verifier: dir.load_verifier()?,
                cycle: ck.cycle,
                counters: ck.counters,
                g_stream: ck.g_stream,
                v_stream: ck.v_stream,
                records: ck.records,
            };
            (state, ck.initial_eval, ck.events_bytes, ck.metrics_bytes)
        }
        None => {
            write_json_atomic(&dir.config_path(), cfg)?;
            let state = TrainState::initial(cfg, train.len());
            let initial = evaluate(&state.generator, &eval, Decode::Greedy)?;
            (state, initial, 0, 0)
        }
    };

    let mut events = JsonlAppender::open(dir.events_path(), events_keep)?;
    let mut metrics_out = JsonlAppender::open(dir.metrics_path(), metrics_keep)?;
    if !resumed {
        checkpoint_now(dir, &digest, &state, &initial, &mut events, &mut metrics_out)?;
    }

    let mut ended_early = false;
    while state.cycle < cfg.total_cycles {
        if stop_after.is_some_and(|s| state.cycle >= s) {
            let manifest = provisional_manifest(cfg, preset, &digest, &train, &eval, &state, &initial)?;
            return Ok(RunOutcome { manifest, resumed, already_complete: false });
        }
        let cycle = state.cycle;
        let at = |e: Error| Error::CycleIo { cycle, source: Box::new(e) };
        if run_cycle_or_rewind(&mut state, &data, &mut events).map_err(at)? {
            ended_early = true;
            break;
        }
        let record = state.records.last().expect("cycle appends a record");
        metrics_out.push_line(&record.to_json_line()).map_err(at)?;
        checkpoint_now(dir, &digest, &state, &initial, &mut events, &mut metrics_out).map_err(at)?;
    }
    // drop any events from a rewound partial cycle
    if ended_early {
        let ck: CheckpointState = read_json(&dir.state_path())?;
        drop(events);
        JsonlAppender::open(dir.events_path(), ck.events_bytes)?.flush()?;
    }

    let csv = dir.csv_path();
    write_atomic(&csv, |w| metrics::write_csv(w, &state.records).map_err(|e| Error::io(&csv, e)))?;
    let mut manifest = provisional_manifest(cfg, preset, &digest, &train, &eval, &state, &initial)?;
    manifest.ended_early = ended_early;
    write_json_atomic(&dir.manifest_path(), &manifest)?;
    Ok(RunOutcome { manifest, resumed, already_complete: false })
}

fn provisional_manifest(
    cfg: &ScheduleConfig,
    preset: Option<&str>,
    digest: &str,
    train: &[Query],
    eval: &[Query],
    state: &TrainState,
    initial: &EvalReport,
) -> Result<Manifest> {
    Ok(Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        metrics_schema_version: METRICS_SCHEMA_VERSION,
        events_schema_version: EVENTS_SCHEMA_VERSION,
        checkpoint_schema_version: CHECKPOINT_SCHEMA_VERSION,
        f1_positive_class: F1_POSITIVE_CLASS.to_string(),
        preset: preset.map(str::to_string),
        algo: cfg.algo,
        seed: cfg.seed,
        config_digest: digest.to_string(),
        train_digest: dataset_digest(train),
        eval_digest: dataset_digest(eval),
        metrics_digest: metrics_digest(&state.records),
        cycles_completed: state.cycle,
        ended_early: false,
        counters: state.counters,
        initial_eval: initial.clone(),
        final_eval: evaluate(&state.generator, eval, Decode::Greedy)?,
    })
}

fn checkpoint_now(
    dir: &RunDir,
    digest: &str,
    state: &TrainState,
    initial: &EvalReport,
    events: &mut JsonlAppender,
    metrics_out: &mut JsonlAppender,
) -> Result<()> {
    events.flush()?;
    metrics_out.flush()?;
    let gpath = dir.generator_path();
    write_atomic(&gpath, |w| state.generator.write_jsonl(w))?;
    if let Some(v) = &state.verifier {
        let vpath = dir.verifier_path();
        write_atomic(&vpath, |w| v.write_jsonl(w))?;
    }
    let ck = CheckpointState {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config_digest: digest.to_string(),
        cycle: state.cycle,
        counters: state.counters,
        g_stream: state.g_stream.clone(),
        v_stream: state.v_stream.clone(),
        records: state.records.clone(),
        initial_eval: initial.clone(),
        events_bytes: events.bytes,
        metrics_bytes: metrics_out.bytes,
    };
    write_json_atomic(&dir.state_path(), &ck)
}
