//! Tree-walking interpreter.
//!
//! Operations run in document order. Every finished operation produces one
//! trace record (composites after their bodies) and, on the main thread, a
//! checkpoint. Resuming re-walks the tree: finished operations are skipped,
//! control decisions already taken are read back from the checkpoint, and
//! module frames are restored from their snapshots.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use agentflow_core::analysis::{return_ref, LOOP_INDEX};
use agentflow_core::metrics::cost_of;
use agentflow_core::step_id::{IdPrefix, StepId};
use agentflow_core::template::{bind_parameters, expand_value};
use agentflow_core::trace::{Message, RecordSource, RecordStatus, TraceRecord, Usage, TRACE_SCHEMA_VERSION};
use agentflow_core::value::{
    add_numbers, lookup_path, parse_json_array, parse_json_object, render_text, values_equal, Map, ScopeView, Value,
};
use agentflow_core::workflow::{EffectiveConfig, OpKind, Operation, WorkflowSpec};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::{ModelBackend, ToolSchema};
use crate::clock::Clock;
use crate::events::{EventKind, Observer};
use crate::executor::{CancelToken, ExecError, Executor, SkillRunner, StepKind, StepRequest};
use crate::input::InputChannel;
use crate::loader::{canonical_origin, LoadError, Loader};
use crate::store::{Checkpoint, Durability, FinishedState, FrameSnapshot, Metrics, OpenOp, StepMetric, StoreError, WorkspaceRef};
use crate::tools::ToolRegistry;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error("step {step_id} failed: {message}")]
    StepFailure { step_id: String, message: String },
    #[error("step {step_id}: {what} limit exceeded")]
    LimitExceeded { step_id: String, what: String },
    #[error("interrupted: {0}")]
    Interrupted(String),
    #[error("cancelled")]
    Cancelled,
    #[error("trace diverged at step {step_id}: {message}")]
    TraceDiverged { step_id: String, message: String },
    #[error("step {step_id}: parallel branches both write `{name}`")]
    ParallelConflict { step_id: String, name: String },
    #[error("step {step_id}: no switch case matches {value}")]
    SwitchNoMatch { step_id: String, value: String },
    #[error("step {step_id}: for_each items are not a list ({found})")]
    NotAList { step_id: String, found: String },
    #[error("step {step_id}: no answer for input `{key}`")]
    InputUnavailable { step_id: String, key: String },
    #[error("step {step_id}: {source}")]
    Module { step_id: String, source: LoadError },
    #[error("invalid inputs: {0}")]
    Inputs(String),
}

impl RunError {
    fn step(id: &StepId, message: impl ToString) -> Self {
        RunError::StepFailure { step_id: id.to_string(), message: message.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
    Interrupted,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Failed => "failed",
            RunStatus::Interrupted => "interrupted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_id: String,
    pub status: RunStatus,
    pub return_value: Option<Value>,
    pub final_context: Map<String, Value>,
    pub metrics: Metrics,
    pub cost: f64,
    pub wall_ms: u64,
    pub error: Option<RunError>,
}

/// Shared, read-only collaborators of a run.
pub struct Services<'a> {
    pub backend: &'a dyn ModelBackend,
    pub tools: &'a dyn ToolRegistry,
    pub observer: &'a dyn Observer,
    pub input: &'a dyn InputChannel,
    pub loader: &'a Loader,
    pub clock: &'a dyn Clock,
    pub cancel: CancelToken,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_id: String,
    pub inputs: Map<String, Value>,
    pub workspace: PathBuf,
    /// Content hash of the root workflow, stored in checkpoints.
    pub workflow_hash: String,
    pub resume: Option<Checkpoint>,
    /// Recorded model-facing records to consume instead of calling the model.
    pub replay: Vec<TraceRecord>,
    pub token_price: Option<f64>,
    pub backoff: Duration,
}

/// First `n` model-facing records of a trace, in trace order, with the
/// recorded `input` answers that came before the last of them.
pub fn replay_prefix(trace: &[TraceRecord], n: usize) -> Vec<TraceRecord> {
    let mut out = Vec::new();
    let mut taken = 0;
    for r in trace {
        if taken == n {
            break;
        }
        if r.is_model_facing() {
            taken += 1;
            out.push(r.clone());
        } else if r.kind == "input" {
            out.push(r.clone());
        }
    }
    out
}

enum Flow {
    Next,
    Return(Value),
}

#[derive(Clone)]
struct Frame {
    key: String,
    spec: Arc<WorkflowSpec>,
    /// Canonical file path, for cycle detection.
    path: String,
    config: EffectiveConfig,
    vars: Map<String, Value>,
    locals: Vec<Map<String, Value>>,
    conversation: Vec<Message>,
    gather: Option<Vec<Value>>,
    /// Names assigned in this frame, in order (parallel merge and gather).
    written: Vec<String>,
}

impl Frame {
    fn scope(&self) -> ScopeView<'_> {
        let mut layers = vec![&self.vars];
        layers.extend(self.locals.iter());
        ScopeView::new(layers)
    }

    fn snapshot(&self) -> FrameSnapshot {
        FrameSnapshot { vars: self.vars.clone(), conversation: self.conversation.clone(), gather: self.gather.clone() }
    }
}

enum Sink<'d> {
    Durable(&'d mut dyn Durability),
    Buffer(Vec<TraceRecord>),
}

type Replay = Arc<Mutex<BTreeMap<StepId, TraceRecord>>>;

struct Runner<'s, 'd> {
    svc: &'s Services<'s>,
    sink: Sink<'d>,
    run_id: String,
    workflow_hash: String,
    workspace: PathBuf,
    backoff: Duration,
    frames: Vec<Frame>,
    /// Canonical paths of frames above this runner (parallel branches).
    outer_paths: Vec<String>,
    completed: Vec<StepId>,
    done: HashSet<StepId>,
    decisions: BTreeMap<String, Value>,
    open: BTreeMap<String, OpenOp>,
    restore: BTreeMap<String, FrameSnapshot>,
    metrics: Metrics,
    replay: Replay,
    cancels: Vec<CancelToken>,
}

fn ret_key(id: &StepId) -> String {
    format!("{id}^return")
}

/// Coerce text holding a JSON object into a map.
fn coerce_object(v: Value) -> Value {
    match &v {
        Value::String(s) => parse_json_object(s).map(Value::Object).unwrap_or(v),
        _ => v,
    }
}

fn diff_writes(after: &Map<String, Value>, before: &Map<String, Value>) -> Map<String, Value> {
    after
        .iter()
        .filter(|(k, v)| before.get(*k) != Some(*v))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

impl<'s, 'd> Runner<'s, 'd> {
    fn frame(&self) -> &Frame {
        self.frames.last().expect("frame")
    }

    fn frame_mut(&mut self) -> &mut Frame {
        self.frames.last_mut().expect("frame")
    }

    fn context(&self) -> Map<String, Value> {
        self.frame().scope().flatten()
    }

    fn assign(&mut self, name: &str, value: Value) {
        let f = self.frame_mut();
        f.vars.insert(name.to_string(), value);
        f.written.push(name.to_string());
    }

    fn check_cancel(&self) -> Result<(), RunError> {
        if self.svc.cancel.is_cancelled() || self.cancels.iter().any(CancelToken::is_cancelled) {
            Err(RunError::Cancelled)
        } else {
            Ok(())
        }
    }

    fn record(&self, id: &StepId, op: &OpKind, context: Map<String, Value>) -> TraceRecord {
        TraceRecord {
            schema_version: TRACE_SCHEMA_VERSION,
            step_id: id.clone(),
            kind: op.keyword().to_string(),
            name: op.name().map(str::to_string),
            label: op.label(),
            instruction: None,
            context,
            transcript: Vec::new(),
            output: None,
            writes: Map::new(),
            usage: Usage::default(),
            duration_ms: 0,
            status: RecordStatus::Completed,
            source: RecordSource::Live,
            detail: None,
        }
    }

    fn append(&mut self, rec: TraceRecord) -> Result<(), RunError> {
        if rec.is_model_facing() {
            self.metrics.total += rec.usage;
            self.metrics.steps.push(StepMetric {
                step_id: rec.step_id.clone(),
                label: rec.label.clone(),
                usage: rec.usage,
                duration_ms: rec.duration_ms,
            });
        }
        match &mut self.sink {
            Sink::Durable(d) => d.append_record(&rec).map_err(|e| RunError::Interrupted(e.to_string()))?,
            Sink::Buffer(b) => b.push(rec),
        }
        Ok(())
    }

    fn complete(&mut self, rec: TraceRecord, flow: &Flow) -> Result<(), RunError> {
        let id = rec.step_id.clone();
        let status = rec.status;
        self.append(rec)?;
        if let Flow::Return(v) = flow {
            self.decisions.insert(ret_key(&id), v.clone());
        }
        self.completed.push(id.clone());
        self.done.insert(id.clone());
        self.svc.observer.event(Some(&id), EventKind::StepCompleted, json!({"status": status.as_str()}));
        self.checkpoint(None)
    }

    fn build_checkpoint(&self, finished: Option<FinishedState>) -> Checkpoint {
        Checkpoint {
            run_id: self.run_id.clone(),
            seq: 0,
            workflow_hash: self.workflow_hash.clone(),
            created_at: self.svc.clock.timestamp(),
            completed: self.completed.clone(),
            decisions: self.decisions.clone(),
            open: self.open.clone(),
            frames: self.frames.iter().map(|f| (f.key.clone(), f.snapshot())).collect(),
            metrics: self.metrics.clone(),
            trace: Default::default(),
            workspace: WorkspaceRef::capture(&self.workspace),
            finished,
        }
    }

    fn checkpoint(&mut self, finished: Option<FinishedState>) -> Result<(), RunError> {
        if !matches!(self.sink, Sink::Durable(_)) {
            return Ok(());
        }
        let mut cp = self.build_checkpoint(finished);
        let Sink::Durable(d) = &mut self.sink else { unreachable!() };
        let r = d.save_checkpoint(&mut cp);
        match r {
            Ok(()) => {
                self.svc.observer.event(None, EventKind::Checkpoint, json!({"seq": cp.seq, "completed": cp.completed.len()}));
                Ok(())
            }
            Err(e @ StoreError::Killed(_)) => {
                self.svc.observer.event(None, EventKind::Checkpoint, json!({"seq": cp.seq, "completed": cp.completed.len()}));
                Err(RunError::Interrupted(e.to_string()))
            }
            Err(e) => Err(RunError::Interrupted(e.to_string())),
        }
    }

    fn body(&mut self, ops: &[Operation], prefix: &IdPrefix) -> Result<Flow, RunError> {
        for (i, op) in ops.iter().enumerate() {
            let id = prefix.child(i as u32 + 1);
            if let Flow::Return(v) = self.op(op, &id)? {
                return Ok(Flow::Return(v));
            }
        }
        Ok(Flow::Next)
    }

    fn op(&mut self, op: &Operation, id: &StepId) -> Result<Flow, RunError> {
        if self.done.contains(id) {
            return Ok(match self.decisions.get(&ret_key(id)) {
                Some(v) => Flow::Return(v.clone()),
                None => Flow::Next,
            });
        }
        self.check_cancel()?;
        self.svc.observer.event(Some(id), EventKind::StepStarted, json!({"kind": op.kind.keyword(), "label": op.kind.label()}));
        let composite = !op.kind.bodies().is_empty() || matches!(op.kind, OpKind::Call(_));
        if composite {
            return self.composite(op, id);
        }
        let context = self.context();
        let start = self.svc.clock.now_ms();
        let mut rec = self.record(id, &op.kind, context);
        match self.leaf(op, id, &mut rec) {
            Ok(flow) => {
                rec.duration_ms = self.svc.clock.now_ms().saturating_sub(start);
                self.complete(rec, &flow)?;
                Ok(flow)
            }
            Err(e) => {
                if !matches!(e, RunError::Interrupted(_) | RunError::Cancelled | RunError::TraceDiverged { .. }) {
                    rec.status = RecordStatus::Failed;
                    rec.duration_ms = self.svc.clock.now_ms().saturating_sub(start);
                    rec.detail = Some(json!({"error": e.to_string()}));
                    let _ = self.append(rec);
                }
                Err(e)
            }
        }
    }

    fn leaf(&mut self, op: &Operation, id: &StepId, rec: &mut TraceRecord) -> Result<Flow, RunError> {
        match &op.kind {
            OpKind::Task(inv) | OpKind::Step(inv) => {
                let kind = if matches!(op.kind, OpKind::Task(_)) { StepKind::Task } else { StepKind::Step };
                let instruction = inv.instruction.expand_text(&self.frame().scope()).map_err(|e| RunError::step(id, e))?;
                rec.instruction = Some(instruction.clone());
                self.model_step(kind, id, &op.kind.label(), &instruction, rec)?;
                if let (Some(target), Some(out)) = (&inv.save_as, &rec.output) {
                    rec.writes.insert(target.clone(), out.clone());
                    self.assign(target, out.clone());
                }
                Ok(Flow::Next)
            }
            OpKind::SetVariable { name, value } => {
                let v = expand_value(value, &self.frame().scope()).map_err(|e| RunError::step(id, e))?;
                rec.writes.insert(name.clone(), v.clone());
                self.assign(name, v);
                Ok(Flow::Next)
            }
            OpKind::Increment { name, by } => {
                let next = match self.frame().vars.get(name) {
                    None | Some(Value::Null) => add_numbers(&0.into(), by),
                    Some(Value::Number(n)) => add_numbers(n, by),
                    Some(other) => {
                        return Err(RunError::step(id, format!("`{name}` is not a number ({other})")));
                    }
                }
                .ok_or_else(|| RunError::step(id, "increment overflow"))?;
                rec.writes.insert(name.clone(), next.clone());
                self.assign(name, next);
                Ok(Flow::Next)
            }
            OpKind::Input { prompt, save_as } => {
                let text = prompt.expand_text(&self.frame().scope()).map_err(|e| RunError::step(id, e))?;
                rec.instruction = Some(text.clone());
                let v = match self.take_replay(id, &rec.label, "input")? {
                    Some(recorded) => {
                        rec.source = RecordSource::Replayed;
                        recorded.output.unwrap_or(Value::Null)
                    }
                    None => {
                        self.svc.observer.event(Some(id), EventKind::InputRequested, json!({"prompt": text, "key": save_as}));
                        self.svc.input.ask(id, save_as, &text).map_err(|e| match e {
                            crate::input::InputError::Cancelled => RunError::Cancelled,
                            _ => RunError::InputUnavailable { step_id: id.to_string(), key: save_as.clone() },
                        })?
                    }
                };
                rec.writes.insert(save_as.clone(), v.clone());
                rec.output = Some(v.clone());
                self.assign(save_as, v);
                Ok(Flow::Next)
            }
            OpKind::Gather { save_as } => {
                let items = self
                    .frame()
                    .gather
                    .clone()
                    .ok_or_else(|| RunError::step(id, "`gather` needs a preceding `parallel`"))?;
                let v = Value::Array(items);
                rec.writes.insert(save_as.clone(), v.clone());
                rec.output = Some(v.clone());
                self.assign(save_as, v);
                Ok(Flow::Next)
            }
            OpKind::Return { value } => {
                let scope = self.frame().scope();
                let v = match return_ref(value) {
                    Some(path) => lookup_path(&scope, &path)
                        .cloned()
                        .ok_or_else(|| RunError::step(id, format!("unbound variable `{}`", path.join("."))))?,
                    None => expand_value(value, &scope).map_err(|e| RunError::step(id, e))?,
                };
                let v = coerce_object(v);
                rec.output = Some(v.clone());
                Ok(Flow::Return(v))
            }
            _ => unreachable!("composite handled elsewhere"),
        }
    }

    fn take_replay(&self, id: &StepId, label: &str, kind: &str) -> Result<Option<TraceRecord>, RunError> {
        let mut q = self.replay.lock().expect("replay lock");
        if q.is_empty() {
            return Ok(None);
        }
        match q.remove(id) {
            Some(r) if r.kind == kind && r.label == label => Ok(Some(r)),
            Some(r) => Err(RunError::TraceDiverged {
                step_id: id.to_string(),
                message: format!("recorded {} `{}`, workflow has {kind} `{label}`", r.kind, r.label),
            }),
            None => match q.keys().next() {
                Some(first) if first < id => Err(RunError::TraceDiverged {
                    step_id: id.to_string(),
                    message: format!("recorded step {first} was not reached"),
                }),
                _ => Ok(None),
            },
        }
    }

    fn model_step(
        &mut self,
        kind: StepKind,
        id: &StepId,
        label: &str,
        instruction: &str,
        rec: &mut TraceRecord,
    ) -> Result<(), RunError> {
        if let Some(recorded) = self.take_replay(id, label, rec.kind.as_str())? {
            if kind == StepKind::Step {
                self.frame_mut().conversation.extend(recorded.transcript.iter().cloned());
            }
            rec.transcript = recorded.transcript;
            rec.output = recorded.output;
            rec.usage = recorded.usage;
            rec.status = recorded.status;
            rec.detail = recorded.detail;
            rec.source = RecordSource::Replayed;
            return Ok(());
        }
        let frame = self.frame();
        let config = frame.config.clone();
        let goal = frame.spec.goal.clone();
        let mut conversation = std::mem::take(&mut self.frame_mut().conversation);
        let host = SkillHost {
            svc: self.svc,
            config: &config,
            workspace: self.workspace.clone(),
            backoff: self.backoff,
            run_id: self.run_id.clone(),
            paths: self.outer_paths.iter().chain(self.frames.iter().map(|f| &f.path)).cloned().collect(),
            records: Mutex::new(Vec::new()),
            cancels: self.cancels.clone(),
        };
        let cancel = self.svc.cancel.clone();
        let result = {
            let exec = Executor {
                backend: self.svc.backend,
                tools: self.svc.tools,
                workspace: &self.workspace,
                observer: self.svc.observer,
                skills: (!config.registered_skills.is_empty()).then_some(&host as &dyn SkillRunner),
                cancel: &cancel,
                backoff: self.backoff,
            };
            let req = StepRequest { kind, step_id: id, label, goal: &goal, instruction, config: &config };
            exec.run_step(&req, &mut conversation)
        };
        self.frame_mut().conversation = conversation;
        for r in host.records.into_inner().expect("skill records") {
            self.append(r)?;
        }
        let res = result.map_err(|e| match e {
            ExecError::Cancelled => RunError::Cancelled,
            other => RunError::step(id, other),
        })?;
        rec.transcript = res.transcript;
        rec.output = Some(res.output);
        rec.usage = res.usage;
        if let Some(hit) = res.limit {
            rec.status = RecordStatus::Limit;
            rec.detail = Some(json!({"limit": format!("{hit:?}")}));
        }
        Ok(())
    }

    fn composite(&mut self, op: &Operation, id: &StepId) -> Result<Flow, RunError> {
        let key = id.to_string();
        let opened = match self.open.get(&key) {
            Some(o) => o.clone(),
            None => {
                let o = OpenOp { context: self.context(), started_ms: self.svc.clock.now_ms() };
                self.open.insert(key.clone(), o.clone());
                o
            }
        };
        let mut rec = self.record(id, &op.kind, opened.context.clone());
        let flow = match &op.kind {
            OpKind::If(o) => {
                let branch = match self.decisions.get(&key) {
                    Some(v) => v.as_u64().unwrap_or(0) as u32,
                    None => {
                        let c = o.condition.evaluate(&self.frame().scope()).map_err(|e| RunError::step(id, e))?;
                        let b = if c { 1 } else { 2 };
                        self.decisions.insert(key.clone(), b.into());
                        b
                    }
                };
                rec.detail = Some(json!({"branch": if branch == 1 { "then" } else { "else" }}));
                let ops = if branch == 1 { &o.then_ops } else { &o.else_ops };
                self.body(ops, &id.body(branch))?
            }
            OpKind::Switch(o) => {
                let branch = match self.decisions.get(&key) {
                    Some(v) => v.as_u64().unwrap_or(0) as usize,
                    None => {
                        let subject = o.subject.expand(&self.frame().scope()).map_err(|e| RunError::step(id, e))?;
                        let b = match o.cases.iter().position(|(lit, _)| {
                            values_equal(lit, &subject)
                                || matches!((lit, &subject), (l, Value::String(s)) if !l.is_string() && render_text(l) == *s)
                        }) {
                            Some(i) => i + 1,
                            None if o.default.is_some() => o.cases.len() + 1,
                            None => {
                                return Err(RunError::SwitchNoMatch { step_id: key, value: subject.to_string() });
                            }
                        };
                        self.decisions.insert(key.clone(), b.into());
                        b
                    }
                };
                let (label, ops) = if branch <= o.cases.len() {
                    (render_text(&o.cases[branch - 1].0), &o.cases[branch - 1].1)
                } else {
                    ("default".to_string(), o.default.as_ref().expect("default exists"))
                };
                rec.detail = Some(json!({"case": label}));
                self.body(ops, &id.body(branch as u32))?
            }
            OpKind::While(o) => {
                let mut k = 1u32;
                let mut flow = Flow::Next;
                loop {
                    let dkey = format!("{key}#{k}");
                    let go = match self.decisions.get(&dkey) {
                        Some(v) => v.as_bool().unwrap_or(false),
                        None => {
                            let c = o.condition.evaluate(&self.frame().scope()).map_err(|e| RunError::step(id, e))?;
                            self.decisions.insert(dkey, c.into());
                            c
                        }
                    };
                    if !go {
                        rec.detail = Some(json!({"iterations": k - 1}));
                        break;
                    }
                    if k > o.limit() {
                        rec.status = RecordStatus::Limit;
                        rec.detail = Some(json!({"iterations": k - 1, "limit_reached": o.limit()}));
                        self.svc.observer.event(
                            Some(id),
                            EventKind::Limit,
                            json!({"limit": "max_iterations", "value": o.limit()}),
                        );
                        break;
                    }
                    if let Flow::Return(v) = self.body(&o.body, &id.body(k))? {
                        flow = Flow::Return(v);
                        break;
                    }
                    k += 1;
                }
                flow
            }
            OpKind::ForEach(o) => {
                let items = match self.decisions.get(&key) {
                    Some(Value::Array(items)) => items.clone(),
                    _ => {
                        let v = expand_value(&o.items, &self.frame().scope()).map_err(|e| RunError::step(id, e))?;
                        let items = match v {
                            Value::Array(items) => items,
                            Value::String(s) => parse_json_array(&s).ok_or_else(|| RunError::NotAList {
                                step_id: key.clone(),
                                found: "text that is not a JSON array".into(),
                            })?,
                            other => {
                                return Err(RunError::NotAList {
                                    step_id: key.clone(),
                                    found: agentflow_core::value::type_name(&other).into(),
                                })
                            }
                        };
                        self.decisions.insert(key.clone(), Value::Array(items.clone()));
                        items
                    }
                };
                rec.detail = Some(json!({"iterations": items.len()}));
                let mut flow = Flow::Next;
                for (i, item) in items.into_iter().enumerate() {
                    let mut scope = Map::new();
                    scope.insert(o.item_name.clone(), item);
                    scope.insert(LOOP_INDEX.to_string(), (i as u64).into());
                    self.frame_mut().locals.push(scope);
                    let r = self.body(&o.body, &id.body(i as u32 + 1));
                    self.frame_mut().locals.pop();
                    if let Flow::Return(v) = r? {
                        flow = Flow::Return(v);
                        break;
                    }
                }
                flow
            }
            OpKind::Call(c) => {
                let v = self.call(c, id)?;
                rec.output = Some(v.clone());
                if v.is_null() {
                    rec.detail = Some(json!({"warning": "module returned no value"}));
                }
                if let Some(target) = &c.save_as {
                    self.assign(target, v);
                }
                Flow::Next
            }
            OpKind::Parallel(p) => {
                self.parallel(&p.branches, id)?;
                Flow::Next
            }
            _ => unreachable!("leaf handled elsewhere"),
        };
        if let Flow::Return(v) = &flow {
            rec.output = Some(v.clone());
        }
        rec.writes = diff_writes(&self.frame().vars, &opened.context);
        rec.duration_ms = self.svc.clock.now_ms().saturating_sub(opened.started_ms);
        self.open.remove(&key);
        self.complete(rec, &flow)?;
        Ok(flow)
    }

    fn call(&mut self, c: &agentflow_core::workflow::CallOp, id: &StepId) -> Result<Value, RunError> {
        let key = id.to_string();
        let stack: Vec<String> = self.outer_paths.iter().chain(self.frames.iter().map(|f| &f.path)).cloned().collect();
        let snap = self.restore.remove(&key);
        let caller = self.frame();
        let loaded = self
            .svc
            .loader
            .resolve_call(&stack, &caller.spec.origin, &c.module)
            .map_err(|e| match e {
                LoadError::DepthExceeded { limit } => {
                    RunError::LimitExceeded { step_id: key.clone(), what: format!("call depth {limit}") }
                }
                other => RunError::Module { step_id: key.clone(), source: other },
            })?;
        let config = caller.config.inherit(&loaded.spec.config, &loaded.spec.origin);
        let frame = match snap {
            Some(snap) => Frame {
                key: key.clone(),
                spec: loaded.spec.clone(),
                path: loaded.path.display().to_string(),
                config,
                vars: snap.vars,
                locals: Vec::new(),
                conversation: snap.conversation,
                gather: snap.gather,
                written: Vec::new(),
            },
            None => {
                let args = expand_value(&Value::Object(c.parameters.clone()), &caller.scope())
                    .map_err(|e| RunError::step(id, e))?;
                let Value::Object(args) = args else { unreachable!("object in, object out") };
                let vars = bind_parameters(&loaded.spec.parameters, &args).map_err(|e| RunError::step(id, e))?;
                Frame {
                    key: key.clone(),
                    spec: loaded.spec.clone(),
                    path: loaded.path.display().to_string(),
                    config,
                    vars,
                    locals: Vec::new(),
                    conversation: Vec::new(),
                    gather: None,
                    written: Vec::new(),
                }
            }
        };
        self.frames.push(frame);
        let spec = loaded.spec.clone();
        let r = self.body(&spec.body, &id.module());
        self.frames.pop();
        Ok(match r? {
            Flow::Return(v) => v,
            Flow::Next => Value::Null,
        })
    }

    fn branch_runner(&self, cancel: &CancelToken) -> Runner<'s, 'static> {
        let mut frame = self.frame().clone();
        frame.written.clear();
        let mut cancels = self.cancels.clone();
        cancels.push(cancel.clone());
        Runner {
            svc: self.svc,
            sink: Sink::Buffer(Vec::new()),
            run_id: self.run_id.clone(),
            workflow_hash: self.workflow_hash.clone(),
            workspace: self.workspace.clone(),
            backoff: self.backoff,
            frames: vec![frame],
            outer_paths: self.outer_paths.iter().chain(self.frames[..self.frames.len() - 1].iter().map(|f| &f.path)).cloned().collect(),
            completed: Vec::new(),
            done: HashSet::new(),
            decisions: BTreeMap::new(),
            open: BTreeMap::new(),
            restore: BTreeMap::new(),
            metrics: Metrics::default(),
            replay: self.replay.clone(),
            cancels,
        }
    }

    fn parallel(&mut self, branches: &[Vec<Operation>], id: &StepId) -> Result<(), RunError> {
        let cancel = CancelToken::default();
        let runners: Vec<Runner<'s, 'static>> = branches.iter().map(|_| self.branch_runner(&cancel)).collect();
        let results: Vec<(Runner<'s, 'static>, Result<Flow, RunError>)> = std::thread::scope(|s| {
            let handles: Vec<_> = runners
                .into_iter()
                .zip(branches)
                .enumerate()
                .map(|(i, (mut r, ops))| {
                    let cancel = cancel.clone();
                    s.spawn(move || {
                        let res = r.body(ops, &id.body(i as u32 + 1));
                        if res.is_err() {
                            cancel.cancel();
                        }
                        (r, res)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("branch thread panicked")).collect()
        });
        if results.iter().any(|(_, r)| r.is_err()) {
            let first = results
                .iter()
                .filter_map(|(_, r)| r.as_ref().err())
                .find(|e| !matches!(e, RunError::Cancelled))
                .or_else(|| results.iter().find_map(|(_, r)| r.as_ref().err()))
                .cloned()
                .expect("an error exists");
            return Err(first);
        }
        let mut owner: BTreeMap<String, usize> = BTreeMap::new();
        for (i, (r, _)) in results.iter().enumerate() {
            for name in r.frame().written.iter().collect::<BTreeSet<_>>() {
                if owner.insert(name.clone(), i).is_some() {
                    return Err(RunError::ParallelConflict { step_id: id.to_string(), name: name.clone() });
                }
            }
        }
        let mut gathered = Vec::new();
        for (r, _) in results {
            let f = r.frame();
            gathered.push(f.written.last().and_then(|n| f.vars.get(n)).cloned().unwrap_or(Value::Null));
            let writes: Vec<(String, Value)> =
                f.written.iter().map(|n| (n.clone(), f.vars[n].clone())).collect();
            let Sink::Buffer(records) = r.sink else { unreachable!("branches buffer") };
            for (n, v) in writes {
                self.assign(&n, v);
            }
            for rec in records {
                self.completed.push(rec.step_id.clone());
                self.done.insert(rec.step_id.clone());
                self.append(rec)?;
            }
            self.decisions.extend(r.decisions);
        }
        self.frame_mut().gather = Some(gathered);
        Ok(())
    }
}

/// Runs registered skills as nested, non-checkpointed workflow invocations.
struct SkillHost<'s> {
    svc: &'s Services<'s>,
    config: &'s EffectiveConfig,
    workspace: PathBuf,
    backoff: Duration,
    run_id: String,
    paths: Vec<String>,
    records: Mutex<Vec<TraceRecord>>,
    cancels: Vec<CancelToken>,
}

impl SkillRunner for SkillHost<'_> {
    fn schemas(&self) -> Vec<ToolSchema> {
        self.config
            .registered_skills
            .iter()
            .map(|(name, sref)| {
                let props: Map<String, Value> = self
                    .svc
                    .loader
                    .resolve_module(&sref.origin, &sref.module)
                    .map(|l| l.spec.parameters.keys().map(|k| (k.clone(), json!({}))).collect())
                    .unwrap_or_default();
                ToolSchema {
                    name: name.clone(),
                    description: format!("Run the `{name}` skill ({})", sref.module),
                    parameters: json!({"type": "object", "properties": props}),
                }
            })
            .collect()
    }

    fn is_skill(&self, name: &str) -> bool {
        self.config.registered_skills.contains_key(name)
    }

    fn run_skill(&self, name: &str, args: &Map<String, Value>, step: &StepId, invocation: u32) -> Result<Value, String> {
        let sref = &self.config.registered_skills[name];
        let loaded = self
            .svc
            .loader
            .resolve_call(&self.paths, &sref.origin, &sref.module)
            .map_err(|e| e.to_string())?;
        let vars = bind_parameters(&loaded.spec.parameters, args).map_err(|e| e.to_string())?;
        let frame = Frame {
            key: format!("{step}/skill{invocation}"),
            spec: loaded.spec.clone(),
            path: loaded.path.display().to_string(),
            config: self.config.inherit(&loaded.spec.config, &loaded.spec.origin),
            vars,
            locals: Vec::new(),
            conversation: Vec::new(),
            gather: None,
            written: Vec::new(),
        };
        let mut r = Runner {
            svc: self.svc,
            sink: Sink::Buffer(Vec::new()),
            run_id: self.run_id.clone(),
            workflow_hash: String::new(),
            workspace: self.workspace.clone(),
            backoff: self.backoff,
            frames: vec![frame],
            outer_paths: self.paths.clone(),
            completed: Vec::new(),
            done: HashSet::new(),
            decisions: BTreeMap::new(),
            open: BTreeMap::new(),
            restore: BTreeMap::new(),
            metrics: Metrics::default(),
            replay: Arc::new(Mutex::new(BTreeMap::new())),
            cancels: self.cancels.clone(),
        };
        let prefix = step.module().child(invocation).module();
        let res = r.body(&loaded.spec.body, &prefix);
        let Sink::Buffer(recs) = r.sink else { unreachable!() };
        self.records.lock().expect("skill records").extend(recs);
        match res.map_err(|e| e.to_string())? {
            Flow::Return(v) => Ok(v),
            Flow::Next => Ok(Value::Null),
        }
    }
}

/// Execute `spec` (or continue it from `opts.resume`).
pub fn run(spec: Arc<WorkflowSpec>, opts: RunOptions, svc: &Services<'_>, store: &mut dyn Durability) -> RunOutcome {
    let started = svc.clock.now_ms();
    let mut config = EffectiveConfig::default().inherit(&spec.config, &spec.origin);
    if let Some(p) = opts.token_price {
        config.token_price = p;
    }
    let price = config.token_price;
    let outcome = |status, return_value, final_context, metrics: Metrics, error| {
        let cost = cost_of(metrics.total.total, price);
        RunOutcome {
            run_id: opts.run_id.clone(),
            status,
            return_value,
            final_context,
            metrics,
            cost,
            wall_ms: svc.clock.now_ms().saturating_sub(started),
            error,
        }
    };
    if let Some(cp) = &opts.resume {
        if let Some(fin) = &cp.finished {
            let status = match fin.status.as_str() {
                "completed" => RunStatus::Completed,
                _ => RunStatus::Failed,
            };
            let ctx = cp.frames.get("").map(|f| f.vars.clone()).unwrap_or_default();
            return outcome(status, fin.return_value.clone(), ctx, cp.metrics.clone(), None);
        }
        let now = WorkspaceRef::capture(&opts.workspace);
        if now.manifest != cp.workspace.manifest {
            log::warn!("workspace {} changed since checkpoint {}", opts.workspace.display(), cp.seq);
        }
    }
    let mut restore = opts.resume.as_ref().map(|c| c.frames.clone()).unwrap_or_default();
    let root = match restore.remove("") {
        Some(snap) => Frame {
            key: String::new(),
            spec: spec.clone(),
            path: canonical_origin(&spec.origin),
            config: config.clone(),
            vars: snap.vars,
            locals: Vec::new(),
            conversation: snap.conversation,
            gather: snap.gather,
            written: Vec::new(),
        },
        None => match bind_parameters(&spec.parameters, &opts.inputs) {
            Ok(vars) => Frame {
                key: String::new(),
                spec: spec.clone(),
                path: canonical_origin(&spec.origin),
                config: config.clone(),
                vars,
                locals: Vec::new(),
                conversation: Vec::new(),
                gather: None,
                written: Vec::new(),
            },
            Err(e) => {
                let err = RunError::Inputs(e.to_string());
                svc.observer.event(None, EventKind::RunFinished, json!({"status": "failed", "error": err.to_string()}));
                return outcome(RunStatus::Failed, None, Map::new(), Metrics::default(), Some(err));
            }
        },
    };
    let resume = opts.resume.clone().unwrap_or_default();
    let replay: BTreeMap<StepId, TraceRecord> =
        opts.replay.iter().map(|r| (r.step_id.clone(), r.clone())).collect();
    let mut r = Runner {
        svc,
        sink: Sink::Durable(store),
        run_id: opts.run_id.clone(),
        workflow_hash: opts.workflow_hash.clone(),
        workspace: opts.workspace.clone(),
        backoff: opts.backoff,
        frames: vec![root],
        outer_paths: Vec::new(),
        done: resume.completed.iter().cloned().collect(),
        completed: resume.completed,
        decisions: resume.decisions,
        open: resume.open,
        restore,
        metrics: resume.metrics,
        replay: Arc::new(Mutex::new(replay)),
        cancels: Vec::new(),
    };
    let result = if opts.resume.is_none() { r.checkpoint(None) } else { Ok(()) }
        .and_then(|_| r.body(&spec.body, &IdPrefix::root()));
    let (status, ret, err) = match result {
        Ok(Flow::Return(v)) => (RunStatus::Completed, Some(v), None),
        Ok(Flow::Next) => (RunStatus::Completed, None, None),
        Err(e @ (RunError::Interrupted(_) | RunError::Cancelled)) => (RunStatus::Interrupted, None, Some(e)),
        Err(e) => (RunStatus::Failed, None, Some(e)),
    };
    let mut err = err;
    if status != RunStatus::Interrupted {
        let fin = FinishedState { status: status.as_str().into(), return_value: ret.clone() };
        if let Err(e) = r.checkpoint(Some(fin)) {
            err.get_or_insert(e);
        }
    }
    let ctx = r.frames[0].vars.clone();
    let mut payload = json!({"status": status.as_str(), "total_tokens": r.metrics.total.total});
    if let Some(e) = &err {
        payload["error"] = e.to_string().into();
    }
    svc.observer.event(None, EventKind::RunFinished, payload);
    outcome(status, ret, ctx, r.metrics, err)
}
