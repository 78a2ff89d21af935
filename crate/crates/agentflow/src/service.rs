//! HTTP/JSON service with server-sent event streams.
//!
//! Each run executes on its own thread. Its log events are numbered by the
//! run's [`EventLog`]; `GET /runs/{id}/events` replays everything after the
//! client's cursor (`?after=N` or `Last-Event-ID`) and then follows live.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use agentflow_core::analysis::Diagnostic;
use agentflow_core::contract::Contract;
use agentflow_core::graph::to_graph;
use agentflow_core::report::render_report;
use agentflow_core::step_id::StepId;
use agentflow_core::trace::Usage;
use agentflow_core::value::{Map, Value};
use agentflow_core::verify::{verify_plan, verify_trace};
use agentflow_core::workflow::EffectiveConfig;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{ModelBackend, Script, ScriptedBackend};
use crate::cli::Settings;
use crate::clock::SystemClock;
use crate::events::{EventKind, EventLog, LogEvent};
use crate::executor::CancelToken;
use crate::harness::{load_contract, Engine, HarnessError, NewRun, WorkspaceEnv};
use crate::input::{Answers, InputChannel, InputError};
use crate::loader::{content_hash, Loader};
use crate::parse::{parse_workflow, yaml_to_value};
use crate::store::{RunMeta, Store};
use crate::tools::BuiltinTools;
use crate::validate::validate_workflow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Queued,
    Running,
    WaitingInput,
    Completed,
    Failed,
    Interrupted,
}

impl RunState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Completed | RunState::Failed | RunState::Interrupted)
    }

    /// The declared status graph.
    pub fn can_move_to(self, next: RunState) -> bool {
        use RunState::*;
        matches!(
            (self, next),
            (Queued, Running)
                | (Running, WaitingInput)
                | (WaitingInput, Running)
                | (Running, Completed | Failed | Interrupted)
                | (WaitingInput, Interrupted)
        )
    }

    fn parse(s: &str) -> RunState {
        match s {
            "queued" => RunState::Queued,
            "running" => RunState::Running,
            "waiting_input" => RunState::WaitingInput,
            "completed" => RunState::Completed,
            "failed" => RunState::Failed,
            _ => RunState::Interrupted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingInput {
    pub step_id: StepId,
    pub key: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHandle {
    pub run_id: String,
    pub workflow_path: String,
    pub workflow_hash: String,
    pub status: RunState,
    pub created_at: String,
    pub updated_at: String,
    pub totals: Usage,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_input: Option<PendingInput>,
    /// Every status this run has held in this service, in order.
    #[serde(default)]
    pub history: Vec<RunState>,
}

struct SlotState {
    status: RunState,
    history: Vec<RunState>,
    pending: Option<PendingInput>,
    answer: Option<Value>,
}

impl SlotState {
    fn move_to(&mut self, next: RunState) {
        if self.status == next {
            return;
        }
        assert!(self.status.can_move_to(next), "illegal run transition {:?} -> {:?}", self.status, next);
        self.status = next;
        self.history.push(next);
    }
}

/// A run executing (or executed) by this process.
struct Slot {
    events: Arc<EventLog>,
    cancel: CancelToken,
    state: Mutex<SlotState>,
    wake: Condvar,
}

impl Slot {
    fn set(&self, next: RunState) {
        let mut g = self.state.lock().expect("slot lock");
        g.move_to(next);
        drop(g);
        self.wake.notify_all();
    }

    fn status(&self) -> RunState {
        self.state.lock().expect("slot lock").status
    }
}

/// `input` answers over the API: park in waiting_input until answered.
struct ApiInput {
    slot: Arc<Slot>,
    answers: Answers,
}

impl InputChannel for ApiInput {
    fn ask(&self, step_id: &StepId, key: &str, prompt: &str) -> Result<Value, InputError> {
        if let Ok(v) = self.answers.ask(step_id, key, prompt) {
            return Ok(v);
        }
        {
            let mut g = self.slot.state.lock().expect("slot lock");
            g.pending = Some(PendingInput { step_id: step_id.clone(), key: key.to_string(), prompt: prompt.to_string() });
            g.answer = None;
        }
        self.slot.set(RunState::WaitingInput);
        let mut g = self.slot.state.lock().expect("slot lock");
        loop {
            if let Some(v) = g.answer.take() {
                g.pending = None;
                return Ok(v);
            }
            if self.slot.cancel.is_cancelled() {
                return Err(InputError::Cancelled);
            }
            g = self.slot.wake.wait_timeout(g, Duration::from_millis(50)).expect("slot lock").0;
        }
    }
}

pub struct AppState {
    pub settings: Settings,
    pub store: Store,
    loader: Arc<Loader>,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
}

impl AppState {
    pub fn new(settings: Settings) -> Arc<AppState> {
        let store = Store::new(settings.store_root());
        Arc::new(AppState { settings, store, loader: Arc::new(Loader::new()), slots: Mutex::new(HashMap::new()) })
    }

    fn slot(&self, id: &str) -> Option<Arc<Slot>> {
        self.slots.lock().expect("slots lock").get(id).cloned()
    }

    fn handle(&self, meta: RunMeta) -> RunHandle {
        let slot = self.slot(&meta.run_id);
        let (status, history, pending) = match &slot {
            Some(s) => {
                let g = s.state.lock().expect("slot lock");
                (g.status, g.history.clone(), g.pending.clone())
            }
            None => {
                let st = RunState::parse(&meta.status);
                // A run left "running" by a previous process is no longer running.
                let st = if st.is_terminal() || st == RunState::Queued { st } else { RunState::Interrupted };
                (st, vec![st], None)
            }
        };
        RunHandle {
            run_id: meta.run_id,
            workflow_path: meta.workflow_path,
            workflow_hash: meta.workflow_hash,
            status,
            created_at: meta.created_at,
            updated_at: meta.updated_at,
            totals: meta.totals,
            cost: meta.cost,
            return_value: meta.return_value,
            error: meta.error,
            parent: meta.parent,
            pending_input: pending,
            history,
        }
    }

    fn handle_of(&self, id: &str) -> Result<RunHandle, ApiError> {
        let meta = self.store.open(id).and_then(|d| d.read_meta()).map_err(|_| ApiError::not_found(id))?;
        Ok(self.handle(meta))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        ApiError { status, body: json!({"error": message.to_string()}) }
    }

    fn bad_request(message: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown run {id}"))
    }

    fn conflict(message: impl ToString) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn invalid(diagnostics: &[Diagnostic]) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({"error": "workflow failed validation", "diagnostics": diagnostics}),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<HarnessError> for ApiError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Invalid(d) => ApiError::invalid(&d),
            HarnessError::Load(l) => {
                ApiError { status: StatusCode::UNPROCESSABLE_ENTITY, body: json!({"error": l.to_string()}) }
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other),
        }
    }
}

/// JSON body extraction that reports malformed input as 400.
fn body<T: serde::de::DeserializeOwned>(raw: &str) -> Result<T, ApiError> {
    serde_json::from_str(raw).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceBody {
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    path: Option<String>,
}

fn load_spec(
    state: &AppState,
    source: Option<&str>,
    path: Option<&str>,
) -> Result<Arc<agentflow_core::workflow::WorkflowSpec>, ApiError> {
    match (source, path) {
        (Some(src), _) => parse_workflow(src, path.unwrap_or("inline.yaml"))
            .map(Arc::new)
            .map_err(|e| {
                let pos = e.pos();
                ApiError {
                    status: StatusCode::UNPROCESSABLE_ENTITY,
                    body: json!({"error": e.to_string(), "diagnostics": [{
                        "severity": "error", "code": "parse", "message": e.to_string(),
                        "span": pos.map(|p| json!({"start": p, "end": p}))}]}),
                }
            }),
        (None, Some(p)) => state.loader.load_path(Path::new(p)).map(|l| l.spec.clone()).map_err(|e| {
            ApiError { status: StatusCode::UNPROCESSABLE_ENTITY, body: json!({"error": e.to_string()}) }
        }),
        (None, None) => Err(ApiError::bad_request("need `source` or `path`")),
    }
}

async fn validate(State(state): State<Arc<AppState>>, raw: String) -> Result<Json<Value>, ApiError> {
    let b: SourceBody = body(&raw)?;
    let src = match (&b.source, &b.path) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => std::fs::read_to_string(p).map_err(|e| ApiError::bad_request(format!("{p}: {e}")))?,
        _ => return Err(ApiError::bad_request("need `source` or `path`")),
    };
    let origin = b.path.clone().unwrap_or_else(|| "inline.yaml".into());
    match parse_workflow(&src, &origin) {
        Ok(spec) => {
            let diags = validate_workflow(&spec, &state.loader);
            let valid = !diags.iter().any(Diagnostic::is_error);
            Ok(Json(json!({"valid": valid, "diagnostics": diags})))
        }
        Err(e) => {
            let pos = e.pos();
            Ok(Json(json!({"valid": false, "diagnostics": [{
                "severity": "error", "code": "parse", "message": e.to_string(),
                "span": pos.map(|p| json!({"start": p, "end": p}))}]})))
        }
    }
}

async fn graph(State(state): State<Arc<AppState>>, raw: String) -> Result<Json<Value>, ApiError> {
    let b: SourceBody = body(&raw)?;
    let spec = load_spec(&state, b.source.as_deref(), b.path.as_deref())?;
    Ok(Json(json!({"name": spec.name, "graph": to_graph(&spec)})))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartBody {
    #[serde(default)]
    path: Option<String>,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    params: Map<String, Value>,
    /// Path of a mock script.
    #[serde(default)]
    mock: Option<String>,
    /// Inline mock script (YAML or JSON text).
    #[serde(default)]
    mock_script: Option<String>,
    #[serde(default)]
    answers: Map<String, Value>,
    #[serde(default)]
    workspace: Option<String>,
}

fn backend_for(state: &AppState, mock: Option<&str>) -> Result<Box<dyn ModelBackend>, String> {
    state.settings.backend(mock.map(Path::new))
}

/// Start the run thread for a registered run.
fn launch(
    state: &Arc<AppState>,
    run_id: &str,
    backend: Box<dyn ModelBackend>,
    answers: Answers,
) -> Result<Arc<Slot>, ApiError> {
    let dir = state.store.open(run_id).map_err(|_| ApiError::not_found(run_id))?;
    let events = EventLog::with_file(run_id, Box::new(SystemClock::default()), &dir.events_path())
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    let slot = Arc::new(Slot {
        events: Arc::new(events),
        cancel: CancelToken::default(),
        state: Mutex::new(SlotState {
            status: RunState::Queued,
            history: vec![RunState::Queued],
            pending: None,
            answer: None,
        }),
        wake: Condvar::new(),
    });
    state.slots.lock().expect("slots lock").insert(run_id.to_string(), slot.clone());
    let tools = BuiltinTools::new(state.settings.fixtures().map_err(ApiError::bad_request)?);
    let st = state.clone();
    let id = run_id.to_string();
    let s = slot.clone();
    std::thread::spawn(move || {
        s.set(RunState::Running);
        let input = ApiInput { slot: s.clone(), answers };
        let clock = SystemClock::default();
        let engine = Engine {
            store: &st.store,
            loader: &st.loader,
            backend: backend.as_ref(),
            tools: &tools,
            input: &input,
            clock: &clock,
            cancel: s.cancel.clone(),
            token_price: st.settings.token_price,
            backoff: Duration::from_millis(500),
        };
        let end = match engine.execute(&id, Vec::new(), Some(&s.events), false) {
            Ok(o) => match o.status {
                crate::interpreter::RunStatus::Completed => RunState::Completed,
                crate::interpreter::RunStatus::Failed => RunState::Failed,
                crate::interpreter::RunStatus::Interrupted => RunState::Interrupted,
            },
            Err(e) => {
                log::error!("run {id}: {e}");
                s.events.event(None, EventKind::RunFinished, json!({"status": "failed", "error": e.to_string()}));
                RunState::Failed
            }
        };
        let mut g = s.state.lock().expect("slot lock");
        if g.status == RunState::WaitingInput && end != RunState::Interrupted {
            g.move_to(RunState::Running);
        }
        g.pending = None;
        g.move_to(end);
        drop(g);
        s.wake.notify_all();
    });
    Ok(slot)
}

use crate::events::Observer as _;

async fn start_run(State(state): State<Arc<AppState>>, raw: String) -> Result<Response, ApiError> {
    let b: StartBody = body(&raw)?;
    let backend: Box<dyn ModelBackend> = match (&b.mock_script, &b.mock) {
        (Some(text), _) => Box::new(ScriptedBackend::new(
            Script::from_yaml(text, "mock_script").map_err(|e| ApiError::bad_request(e.to_string()))?,
        )),
        (None, m) => backend_for(&state, m.as_deref()).map_err(ApiError::bad_request)?,
    };
    let workflow = match (&b.source, &b.path) {
        (Some(src), _) => {
            // Inline sources are stored so resume and replay can reread them.
            let dir = state.store.root.join("sources");
            std::fs::create_dir_all(&dir).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
            let p = dir.join(format!("{}.yaml", content_hash(src)));
            std::fs::write(&p, src).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
            p
        }
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(ApiError::bad_request("need `source` or `path`")),
    };
    let req = NewRun {
        workflow,
        inputs: b.params,
        run_id: None,
        parent: None,
        mock: if b.mock_script.is_some() { None } else { b.mock.clone() },
        workspace: b.workspace.map(PathBuf::from),
    };
    let st = state.clone();
    let meta = tokio::task::spawn_blocking(move || {
        let input = Answers::default();
        let clock = SystemClock::default();
        let tools = BuiltinTools::default();
        let null = ScriptedBackend::new(Script::default());
        let engine = Engine {
            store: &st.store,
            loader: &st.loader,
            backend: &null,
            tools: &tools,
            input: &input,
            clock: &clock,
            cancel: CancelToken::default(),
            token_price: None,
            backoff: Duration::ZERO,
        };
        engine.create(&req)
    })
    .await
    .expect("create task")?;
    let id = meta.run_id.clone();
    launch(&state, &id, backend, Answers::new(b.answers))?;
    let handle = state.handle(meta);
    Ok((StatusCode::CREATED, Json(handle)).into_response())
}

async fn list_runs(State(state): State<Arc<AppState>>) -> Result<Json<Vec<RunHandle>>, ApiError> {
    let metas = state.store.list_runs().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok(Json(metas.into_iter().map(|m| state.handle(m)).collect()))
}

async fn get_run(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<RunHandle>, ApiError> {
    state.handle_of(&id).map(Json)
}

async fn get_trace(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let dir = state.store.open(&id).map_err(|_| ApiError::not_found(&id))?;
    let records = dir.load_trace().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok(Json(serde_json::to_value(records).expect("trace json")))
}

#[derive(Debug, Deserialize)]
struct Cursor {
    #[serde(default)]
    after: Option<u64>,
}

fn sse_event(e: &LogEvent) -> Event {
    let kind = serde_json::to_value(e.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    Event::default().id(e.seq.to_string()).event(kind).data(serde_json::to_string(e).expect("event json"))
}

/// Events after `cursor`, then live ones until the run is over.
fn follow(slot: Option<Arc<Slot>>, stored: Vec<LogEvent>, cursor: u64) -> impl Stream<Item = Result<Event, Infallible>> {
    struct St {
        slot: Option<Arc<Slot>>,
        buf: std::collections::VecDeque<LogEvent>,
        cursor: u64,
        rx: Option<tokio::sync::watch::Receiver<u64>>,
    }
    let rx = slot.as_ref().map(|s| s.events.subscribe());
    let buf = stored.into_iter().filter(|e| e.seq > cursor).collect();
    stream::unfold(St { slot, buf, cursor, rx }, |mut st| async move {
        loop {
            if let Some(e) = st.buf.pop_front() {
                st.cursor = e.seq;
                let ev = sse_event(&e);
                return Some((Ok(ev), st));
            }
            let slot = st.slot.clone()?;
            let fresh = slot.events.since(st.cursor);
            if !fresh.is_empty() {
                st.buf.extend(fresh);
                continue;
            }
            if slot.status().is_terminal() {
                // The run thread may still be appending its last events.
                let tail = slot.events.since(st.cursor);
                if tail.is_empty() {
                    return None;
                }
                st.buf.extend(tail);
                continue;
            }
            let rx = st.rx.as_mut()?;
            let _ = tokio::time::timeout(Duration::from_millis(100), rx.changed()).await;
        }
    })
}

async fn events(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<Cursor>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let dir = state.store.open(&id).map_err(|_| ApiError::not_found(&id))?;
    let header_cursor = match headers.get("last-event-id") {
        Some(h) => Some(
            h.to_str()
                .ok()
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| ApiError::bad_request("Last-Event-ID must be a sequence number"))?,
        ),
        None => None,
    };
    let cursor = q.after.or(header_cursor).unwrap_or(0);
    let slot = state.slot(&id);
    let stored = match &slot {
        Some(s) => s.events.since(cursor),
        None => EventLog::with_file(&id, Box::new(SystemClock::default()), &dir.events_path())
            .map(|l| l.since(cursor))
            .unwrap_or_default(),
    };
    Ok(Sse::new(follow(slot, stored, cursor)).keep_alive(KeepAlive::default()).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputBody {
    value: Value,
}

async fn answer(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    raw: String,
) -> Result<Json<RunHandle>, ApiError> {
    let b: InputBody = body(&raw)?;
    let slot = match state.slot(&id) {
        Some(s) => s,
        None => {
            state.handle_of(&id)?;
            return Err(ApiError::conflict("run is not waiting for input"));
        }
    };
    {
        let mut g = slot.state.lock().expect("slot lock");
        if g.status != RunState::WaitingInput || g.answer.is_some() {
            return Err(ApiError::conflict(format!("run is {:?}, not waiting for input", g.status)));
        }
        g.answer = Some(b.value);
        g.move_to(RunState::Running);
    }
    slot.wake.notify_all();
    state.handle_of(&id).map(Json)
}

async fn cancel(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<RunHandle>, ApiError> {
    let h = state.handle_of(&id)?;
    match state.slot(&id) {
        Some(slot) if !slot.status().is_terminal() => {
            slot.cancel.cancel();
            slot.wake.notify_all();
            state.handle_of(&id).map(Json)
        }
        _ => Err(ApiError::conflict(format!("run is {:?}; nothing to cancel", h.status))),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResumeBody {
    #[serde(default)]
    mock: Option<String>,
    #[serde(default)]
    answers: Map<String, Value>,
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for e in std::fs::read_dir(from)? {
        let e = e?;
        let t = to.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_dir(&e.path(), &t)?;
        } else {
            std::fs::copy(e.path(), t)?;
        }
    }
    Ok(())
}

/// Fork an interrupted or failed run into a new run that continues from the
/// source's latest checkpoint.
async fn resume(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    raw: String,
) -> Result<Response, ApiError> {
    let b: ResumeBody = if raw.trim().is_empty() { ResumeBody::default() } else { body(&raw)? };
    let h = state.handle_of(&id)?;
    if !matches!(h.status, RunState::Interrupted | RunState::Failed) {
        return Err(ApiError::conflict(format!("run is {:?}; only interrupted or failed runs resume", h.status)));
    }
    let src = state.store.open(&id).map_err(|_| ApiError::not_found(&id))?;
    let mut meta = src.read_meta().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    let current = std::fs::read_to_string(&meta.workflow_path).map(|s| content_hash(&s)).unwrap_or_default();
    if current != meta.workflow_hash {
        return Err(ApiError::conflict("workflow file changed since the run started"));
    }
    let new_id = uuid::Uuid::new_v4().to_string();
    let internal = |e: std::io::Error| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e);
    let to = state.store.run_dir(&new_id);
    copy_dir(&src.dir, &to).map_err(internal)?;
    let _ = std::fs::remove_file(to.join("events.ndjson"));
    meta.run_id = new_id.clone();
    meta.parent = Some(id.clone());
    meta.status = "queued".into();
    meta.error = None;
    let dir = state.store.open(&new_id).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    dir.write_meta(&meta).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    let mock = b.mock.or(meta.mock.clone());
    let backend = backend_for(&state, mock.as_deref()).map_err(ApiError::bad_request)?;
    launch(&state, &new_id, backend, Answers::new(b.answers))?;
    Ok((StatusCode::CREATED, Json(state.handle(meta))).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyPlanBody {
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    path: Option<String>,
    /// Contract as YAML/JSON text, or a path via `contracts_path`.
    #[serde(default)]
    contracts: Option<Value>,
    #[serde(default)]
    contracts_path: Option<String>,
    #[serde(default)]
    workspace: Option<String>,
}

fn contract_from(v: Option<Value>, path: Option<&str>) -> Result<Contract, ApiError> {
    match (v, path) {
        (Some(Value::String(text)), _) => {
            let v = yaml_to_value(&text, "contracts").map_err(|e| ApiError::bad_request(e.to_string()))?;
            serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("contracts: {e}")))
        }
        (Some(v), _) => serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("contracts: {e}"))),
        (None, Some(p)) => load_contract(Path::new(p)).map_err(|e| ApiError::bad_request(e.to_string())),
        (None, None) => Err(ApiError::bad_request("need `contracts` or `contracts_path`")),
    }
}

async fn verify_plan_route(State(state): State<Arc<AppState>>, raw: String) -> Result<Json<Value>, ApiError> {
    let b: VerifyPlanBody = body(&raw)?;
    let spec = load_spec(&state, b.source.as_deref(), b.path.as_deref())?;
    let contract = contract_from(b.contracts, b.contracts_path.as_deref())?;
    let tools = BuiltinTools::default();
    let ws = PathBuf::from(b.workspace.unwrap_or_else(|| ".".into()));
    let config = EffectiveConfig::default().inherit(&spec.config, &spec.origin);
    let env = WorkspaceEnv { workspace: &ws, tools: &tools, enabled: config.enabled_tools.as_deref() };
    let report = verify_plan(&spec, &contract, Some(&env)).map_err(|errs| ApiError {
        status: StatusCode::UNPROCESSABLE_ENTITY,
        body: json!({"error": "contract does not match the workflow",
                     "diagnostics": errs.iter().map(ToString::to_string).collect::<Vec<_>>()}),
    })?;
    Ok(Json(json!({"passed": report.passed, "text": render_report(&report), "report": report})))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyTraceBody {
    run_id: String,
    #[serde(default)]
    contracts: Option<Value>,
    #[serde(default)]
    contracts_path: Option<String>,
}

async fn verify_trace_route(State(state): State<Arc<AppState>>, raw: String) -> Result<Json<Value>, ApiError> {
    let b: VerifyTraceBody = body(&raw)?;
    let dir = state.store.open(&b.run_id).map_err(|_| ApiError::not_found(&b.run_id))?;
    let meta = dir.read_meta().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    let contract = contract_from(b.contracts, b.contracts_path.as_deref())?;
    let records = dir.load_trace().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    let spec = load_spec(&state, None, Some(&meta.workflow_path))?;
    let config = EffectiveConfig::default().inherit(&spec.config, &spec.origin);
    let tools = BuiltinTools::default();
    let ws = dir.workspace_path();
    let env = WorkspaceEnv { workspace: &ws, tools: &tools, enabled: config.enabled_tools.as_deref() };
    let report = verify_trace(&spec.name, &records, &contract, &env);
    Ok(Json(json!({"passed": report.passed, "text": render_report(&report), "report": report})))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/workflows/validate", post(validate))
        .route("/workflows/graph", post(graph))
        .route("/runs", post(start_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/events", get(events))
        .route("/runs/{id}/trace", get(get_trace))
        .route("/runs/{id}/input", post(answer))
        .route("/runs/{id}/resume", post(resume))
        .route("/runs/{id}/cancel", post(cancel))
        .route("/verify/plan", post(verify_plan_route))
        .route("/verify/trace", post(verify_trace_route))
        .with_state(state)
}

pub async fn serve(bind: &str, settings: Settings) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(settings))).await
}
