//! Durable run storage.
//!
//! One directory per run:
//!
//! ```text
//! <root>/<run_id>/meta.json            run summary, rewritten on status changes
//! <root>/<run_id>/trace.ndjson         append-only trace records
//! <root>/<run_id>/events.ndjson        append-only log events
//! <root>/<run_id>/checkpoints/000003.json
//! <root>/<run_id>/workspace/           default tool workspace
//! ```
//!
//! Checkpoints are written to a temporary file and renamed into place, after
//! the trace has been synced, so a checkpoint never points past durable
//! trace bytes.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use agentflow_core::step_id::StepId;
use agentflow_core::trace::{Message, TraceRecord, Usage};
use agentflow_core::value::{Map, Value};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::loader::hex;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run not found: {0}")]
    NotFound(String),
    #[error("no checkpoint for run {0}")]
    CheckpointNotFound(String),
    #[error("corrupt checkpoint {path}: {message}")]
    CorruptCheckpoint { path: String, message: String },
    #[error("corrupt trace {path} at byte {offset}: {message}")]
    CorruptTrace { path: String, offset: u64, message: String },
    #[error("workflow changed since the checkpoint (expected {expected}, found {found})")]
    HashMismatch { expected: String, found: String },
    #[error("storage error: {0}")]
    Io(String),
    /// Injected crash: the checkpoint was persisted, then the run stopped.
    #[error("killed after checkpoint {0}")]
    Killed(u64),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

/// Position in the trace file covered by a checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOffset {
    pub records: u64,
    pub bytes: u64,
}

/// State of one active module invocation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameSnapshot {
    pub vars: Map<String, Value>,
    #[serde(default)]
    pub conversation: Vec<Message>,
    /// Branch results of the latest `parallel`, for `gather`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gather: Option<Vec<Value>>,
}

/// Composite operation that has started but not finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenOp {
    pub context: Map<String, Value>,
    pub started_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step_id: StepId,
    pub label: String,
    pub usage: Usage,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: Vec<StepMetric>,
    pub total: Usage,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceRef {
    pub path: String,
    /// relative path -> sha256
    pub manifest: BTreeMap<String, String>,
}

impl WorkspaceRef {
    pub fn capture(path: &Path) -> WorkspaceRef {
        let mut manifest = BTreeMap::new();
        let mut stack = vec![path.to_path_buf()];
        while let Some(dir) = stack.pop() {
            let Ok(entries) = fs::read_dir(&dir) else { continue };
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else if let Ok(bytes) = fs::read(&p) {
                    let rel = p.strip_prefix(path).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                    manifest.insert(rel, hex(&Sha256::digest(&bytes)));
                }
            }
        }
        WorkspaceRef { path: path.display().to_string(), manifest }
    }
}

/// Final state recorded in the last checkpoint of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinishedState {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_value: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub run_id: String,
    pub seq: u64,
    pub workflow_hash: String,
    pub created_at: String,
    pub completed: Vec<StepId>,
    /// Control decisions keyed by step id (`id` or `id#iteration`).
    pub decisions: BTreeMap<String, Value>,
    pub open: BTreeMap<String, OpenOp>,
    /// Active frames keyed by the call's step id; "" is the root module.
    pub frames: BTreeMap<String, FrameSnapshot>,
    pub metrics: Metrics,
    pub trace: TraceOffset,
    pub workspace: WorkspaceRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<FinishedState>,
}

pub trait Durability: Send {
    fn append_record(&mut self, rec: &TraceRecord) -> Result<(), StoreError>;

    /// Persist `cp`; the store assigns `seq` and `trace`.
    fn save_checkpoint(&mut self, cp: &mut Checkpoint) -> Result<(), StoreError>;
}

/// Keeps everything in memory. For tests and skill sub-runs.
#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    pub records: Vec<TraceRecord>,
    pub checkpoints: Vec<Checkpoint>,
    bytes: u64,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Continue from a checkpoint with the records it covers.
    pub fn resume_from(records: Vec<TraceRecord>, cp: &Checkpoint) -> Self {
        let mut records = records;
        records.truncate(cp.trace.records as usize);
        MemoryStore { records, checkpoints: vec![cp.clone()], bytes: cp.trace.bytes }
    }

    /// Trace as it would be written to disk.
    pub fn trace_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in &self.records {
            out.extend(record_line(r));
        }
        out
    }
}

pub fn record_line(rec: &TraceRecord) -> Vec<u8> {
    let mut line = serde_json::to_vec(rec).expect("records serialize");
    line.push(b'\n');
    line
}

impl Durability for MemoryStore {
    fn append_record(&mut self, rec: &TraceRecord) -> Result<(), StoreError> {
        self.bytes += record_line(rec).len() as u64;
        self.records.push(rec.clone());
        Ok(())
    }

    fn save_checkpoint(&mut self, cp: &mut Checkpoint) -> Result<(), StoreError> {
        cp.seq = self.checkpoints.last().map_or(0, |c| c.seq + 1);
        cp.trace = TraceOffset { records: self.records.len() as u64, bytes: self.bytes };
        self.checkpoints.push(cp.clone());
        Ok(())
    }
}

/// Ignores everything.
#[derive(Debug, Default)]
pub struct NullStore;

impl Durability for NullStore {
    fn append_record(&mut self, _: &TraceRecord) -> Result<(), StoreError> {
        Ok(())
    }

    fn save_checkpoint(&mut self, _: &mut Checkpoint) -> Result<(), StoreError> {
        Ok(())
    }
}

/// Crash injection: persist checkpoints normally, then fail once `limit`
/// step checkpoints (not counting the initial one) are durable.
#[derive(Debug)]
pub struct KillAfter<D> {
    pub inner: D,
    pub limit: u64,
    seen: u64,
}

impl<D> KillAfter<D> {
    pub fn new(inner: D, limit: u64) -> Self {
        KillAfter { inner, limit, seen: 0 }
    }
}

impl<D: Durability> Durability for KillAfter<D> {
    fn append_record(&mut self, rec: &TraceRecord) -> Result<(), StoreError> {
        self.inner.append_record(rec)
    }

    fn save_checkpoint(&mut self, cp: &mut Checkpoint) -> Result<(), StoreError> {
        self.inner.save_checkpoint(cp)?;
        let step = self.seen;
        self.seen += 1;
        if step >= self.limit && cp.finished.is_none() {
            return Err(StoreError::Killed(cp.seq));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// On-disk store

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub workflow_path: String,
    pub workflow_hash: String,
    pub status: String,
    pub created_at: String,
    pub updated_at: String,
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub totals: Usage,
    #[serde(default)]
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Run this one was forked from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Mock script used, so resumes reuse it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workspace: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Store { root: root.into() }
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn create(&self, meta: &RunMeta) -> Result<RunDir, StoreError> {
        let dir = self.run_dir(&meta.run_id);
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::create_dir_all(dir.join("workspace"))?;
        let rd = RunDir::open_at(dir)?;
        rd.write_meta(meta)?;
        Ok(rd)
    }

    pub fn open(&self, run_id: &str) -> Result<RunDir, StoreError> {
        let dir = self.run_dir(run_id);
        if !dir.join("meta.json").exists() {
            return Err(StoreError::NotFound(run_id.to_string()));
        }
        RunDir::open_at(dir)
    }

    /// Summaries of every run, oldest first.
    pub fn list_runs(&self) -> Result<Vec<RunMeta>, StoreError> {
        let mut out = Vec::new();
        let Ok(entries) = fs::read_dir(&self.root) else {
            return Ok(out);
        };
        for e in entries.flatten() {
            let p = e.path().join("meta.json");
            if let Ok(text) = fs::read_to_string(&p) {
                if let Ok(m) = serde_json::from_str::<RunMeta>(&text) {
                    out.push(m);
                }
            }
        }
        out.sort_by(|a, b| (&a.created_at, &a.run_id).cmp(&(&b.created_at, &b.run_id)));
        Ok(out)
    }

    pub fn load_trace(&self, run_id: &str) -> Result<Vec<TraceRecord>, StoreError> {
        self.open(run_id)?.load_trace()
    }
}

#[derive(Debug)]
pub struct RunDir {
    pub dir: PathBuf,
    trace: File,
    records: u64,
    next_seq: u64,
}

impl RunDir {
    fn open_at(dir: PathBuf) -> Result<RunDir, StoreError> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let trace = OpenOptions::new().create(true).append(true).read(true).open(dir.join("trace.ndjson"))?;
        let next_seq = list_checkpoints(&dir)?.last().map_or(0, |(n, _)| n + 1);
        let records = count_lines(&dir.join("trace.ndjson"))?;
        Ok(RunDir { dir, trace, records, next_seq })
    }

    pub fn trace_path(&self) -> PathBuf {
        self.dir.join("trace.ndjson")
    }

    pub fn events_path(&self) -> PathBuf {
        self.dir.join("events.ndjson")
    }

    pub fn workspace_path(&self) -> PathBuf {
        self.dir.join("workspace")
    }

    pub fn read_meta(&self) -> Result<RunMeta, StoreError> {
        let p = self.dir.join("meta.json");
        let text = fs::read_to_string(&p)?;
        serde_json::from_str(&text).map_err(|e| StoreError::Io(format!("{}: {e}", p.display())))
    }

    pub fn write_meta(&self, meta: &RunMeta) -> Result<(), StoreError> {
        atomic_write(&self.dir.join("meta.json"), &serde_json::to_vec_pretty(meta).expect("meta serializes"))
    }

    pub fn load_trace(&self) -> Result<Vec<TraceRecord>, StoreError> {
        load_trace_file(&self.trace_path())
    }

    /// Newest checkpoint, failing closed if it cannot be read.
    pub fn latest_checkpoint(&self) -> Result<Checkpoint, StoreError> {
        let all = list_checkpoints(&self.dir)?;
        let (_, path) = all
            .last()
            .ok_or_else(|| StoreError::CheckpointNotFound(self.dir.display().to_string()))?;
        read_checkpoint(path)
    }

    pub fn checkpoint(&self, seq: u64) -> Result<Checkpoint, StoreError> {
        let p = self.dir.join("checkpoints").join(format!("{seq:06}.json"));
        if !p.exists() {
            return Err(StoreError::CheckpointNotFound(format!("{}#{seq}", self.dir.display())));
        }
        read_checkpoint(&p)
    }

    pub fn checkpoints(&self) -> Result<Vec<Checkpoint>, StoreError> {
        list_checkpoints(&self.dir)?.iter().map(|(_, p)| read_checkpoint(p)).collect()
    }

    /// Drop trace bytes written after `cp` (a crash between append and
    /// checkpoint leaves them behind).
    pub fn truncate_to(&mut self, cp: &Checkpoint) -> Result<(), StoreError> {
        self.trace.set_len(cp.trace.bytes)?;
        self.trace.seek(SeekFrom::End(0))?;
        self.records = cp.trace.records;
        Ok(())
    }
}

impl Durability for RunDir {
    fn append_record(&mut self, rec: &TraceRecord) -> Result<(), StoreError> {
        self.trace.write_all(&record_line(rec))?;
        self.records += 1;
        Ok(())
    }

    fn save_checkpoint(&mut self, cp: &mut Checkpoint) -> Result<(), StoreError> {
        self.trace.flush()?;
        self.trace.sync_data()?;
        cp.seq = self.next_seq;
        cp.trace = TraceOffset { records: self.records, bytes: self.trace.metadata()?.len() };
        let path = self.dir.join("checkpoints").join(format!("{:06}.json", cp.seq));
        atomic_write(&path, &serde_json::to_vec(cp).expect("checkpoint serializes"))?;
        self.next_seq += 1;
        Ok(())
    }
}

/// Write to `<path>.tmp`, sync, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>, StoreError> {
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir(dir.join("checkpoints")) else {
        return Ok(out);
    };
    for e in entries.flatten() {
        let p = e.path();
        if p.extension().is_some_and(|x| x == "json") {
            if let Some(n) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) {
                out.push((n, p));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, StoreError> {
    let corrupt = |message: String| StoreError::CorruptCheckpoint { path: path.display().to_string(), message };
    let text = fs::read_to_string(path).map_err(|e| corrupt(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))
}

fn count_lines(path: &Path) -> Result<u64, StoreError> {
    let mut buf = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut buf)?;
        }
        Err(_) => return Ok(0),
    }
    Ok(buf.iter().filter(|b| **b == b'\n').count() as u64)
}

/// Read an ndjson trace. A line that does not parse, or a final line with no
/// newline (torn write), is reported with its starting byte offset.
pub fn load_trace_file(path: &Path) -> Result<Vec<TraceRecord>, StoreError> {
    let f = File::open(path).map_err(|_| StoreError::NotFound(path.display().to_string()))?;
    let mut reader = BufReader::new(f);
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            break;
        }
        let corrupt = |message: String| StoreError::CorruptTrace { path: path.display().to_string(), offset, message };
        if line.last() != Some(&b'\n') {
            return Err(corrupt("truncated record".into()));
        }
        let rec: TraceRecord = serde_json::from_slice(&line).map_err(|e| corrupt(e.to_string()))?;
        out.push(rec);
        offset += n as u64;
    }
    Ok(out)
}
