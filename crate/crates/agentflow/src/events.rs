//! Run observability: log events with per-run sequence numbers.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use agentflow_core::step_id::StepId;
use agentflow_core::value::Value;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StepStarted,
    ModelTurn,
    ToolCall,
    StepCompleted,
    Limit,
    InputRequested,
    Checkpoint,
    RunFinished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub run_id: String,
    /// Starts at 1, strictly increasing per run.
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_id: Option<StepId>,
    pub kind: EventKind,
    pub payload: Value,
    pub timestamp: String,
}

/// Receives reports from a run. Parallel branches report concurrently.
pub trait Observer: Sync {
    fn event(&self, step_id: Option<&StepId>, kind: EventKind, payload: Value);
}

#[derive(Debug, Default)]
pub struct NullObserver;

impl Observer for NullObserver {
    fn event(&self, _: Option<&StepId>, _: EventKind, _: Value) {}
}

/// Append-only event log for one run: numbers events, keeps them in memory,
/// optionally mirrors them to `events.ndjson`, and wakes followers.
pub struct EventLog {
    run_id: String,
    clock: Box<dyn Clock>,
    inner: Mutex<(Vec<LogEvent>, Option<File>)>,
    notify: watch::Sender<u64>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").field("run_id", &self.run_id).finish()
    }
}

impl EventLog {
    pub fn new(run_id: impl Into<String>, clock: Box<dyn Clock>) -> Self {
        EventLog { run_id: run_id.into(), clock, inner: Mutex::new((Vec::new(), None)), notify: watch::channel(0).0 }
    }

    /// Continue an existing log file, keeping its numbering.
    pub fn with_file(run_id: impl Into<String>, clock: Box<dyn Clock>, path: &Path) -> std::io::Result<Self> {
        let existing: Vec<LogEvent> = match std::fs::read_to_string(path) {
            Ok(text) => text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect(),
            Err(_) => Vec::new(),
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let last = existing.last().map_or(0, |e| e.seq);
        let log = EventLog {
            run_id: run_id.into(),
            clock,
            inner: Mutex::new((existing, Some(file))),
            notify: watch::channel(last).0,
        };
        Ok(log)
    }

    /// Events with `seq > after`.
    pub fn since(&self, after: u64) -> Vec<LogEvent> {
        let g = self.inner.lock().expect("event lock");
        g.0.iter().filter(|e| e.seq > after).cloned().collect()
    }

    pub fn all(&self) -> Vec<LogEvent> {
        self.since(0)
    }

    pub fn last_seq(&self) -> u64 {
        *self.notify.borrow()
    }

    /// Wakes whenever a new event is appended.
    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.notify.subscribe()
    }
}

impl Observer for EventLog {
    fn event(&self, step_id: Option<&StepId>, kind: EventKind, payload: Value) {
        let mut g = self.inner.lock().expect("event lock");
        let seq = g.0.last().map_or(0, |e| e.seq) + 1;
        let ev = LogEvent {
            run_id: self.run_id.clone(),
            seq,
            step_id: step_id.cloned(),
            kind,
            payload,
            timestamp: self.clock.timestamp(),
        };
        if let Some(f) = &mut g.1 {
            let mut line = serde_json::to_vec(&ev).expect("events serialize");
            line.push(b'\n');
            if let Err(e) = f.write_all(&line) {
                log::warn!("cannot append event: {e}");
            }
        }
        g.0.push(ev);
        drop(g);
        self.notify.send_replace(seq);
    }
}

/// Forward to several observers.
pub struct Fanout<'a>(pub Vec<&'a dyn Observer>);

impl Observer for Fanout<'_> {
    fn event(&self, step_id: Option<&StepId>, kind: EventKind, payload: Value) {
        for o in &self.0 {
            o.event(step_id, kind, payload.clone());
        }
    }
}
