//! Durable runs on top of the interpreter: create, execute, resume, replay.

use std::path::{Path, PathBuf};
use std::time::Duration;

use agentflow_core::analysis::Diagnostic;
use agentflow_core::contract::Contract;
use agentflow_core::predicate::PredicateEnv;
use agentflow_core::value::{Map, Value};
use thiserror::Error;

use crate::backend::ModelBackend;
use crate::clock::Clock;
use crate::events::{EventLog, Fanout, Observer};
use crate::executor::CancelToken;
use crate::input::InputChannel;
use crate::interpreter::{self, replay_prefix, RunError, RunOptions, RunOutcome, Services};
use crate::loader::{content_hash, LoadError, Loader};
use crate::parse::yaml_to_value;
use crate::store::{RunMeta, Store, StoreError};
use crate::tools::{confine, ToolRegistry};
use crate::validate::validate_workflow;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("workflow has {} error(s): {}", .0.len(), .0.first().map(|d| d.message.as_str()).unwrap_or(""))]
    Invalid(Vec<Diagnostic>),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("contract {path}: {message}")]
    Contract { path: String, message: String },
    #[error("run {0} already finished")]
    Finished(String),
}

/// Load a contract sidecar (YAML).
pub fn load_contract(path: &Path) -> Result<Contract, HarnessError> {
    let bad = |message: String| HarnessError::Contract { path: path.display().to_string(), message };
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let v = yaml_to_value(&text, &path.display().to_string()).map_err(|e| bad(e.to_string()))?;
    serde_json::from_value(v).map_err(|e| bad(e.to_string()))
}

/// Predicate environment backed by a workspace directory and a tool registry.
pub struct WorkspaceEnv<'a> {
    pub workspace: &'a Path,
    pub tools: &'a dyn ToolRegistry,
    pub enabled: Option<&'a [String]>,
}

impl PredicateEnv for WorkspaceEnv<'_> {
    fn path_exists(&self, path: &str) -> bool {
        confine(self.workspace, path).is_ok_and(|p| p.exists())
    }

    fn tool_available(&self, name: &str) -> bool {
        self.tools.contains(name) && self.enabled.is_none_or(|e| e.iter().any(|t| t == name))
    }
}

#[derive(Debug, Clone, Default)]
pub struct NewRun {
    pub workflow: PathBuf,
    pub inputs: Map<String, Value>,
    pub run_id: Option<String>,
    pub parent: Option<String>,
    pub mock: Option<String>,
    /// Directory copied into the run's workspace before it starts.
    pub workspace: Option<PathBuf>,
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for e in std::fs::read_dir(from)? {
        let e = e?;
        let target = to.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_tree(&e.path(), &target)?;
        } else {
            std::fs::copy(e.path(), target)?;
        }
    }
    Ok(())
}

/// Everything a run needs besides its own state.
pub struct Engine<'a> {
    pub store: &'a Store,
    pub loader: &'a Loader,
    pub backend: &'a dyn ModelBackend,
    pub tools: &'a dyn ToolRegistry,
    pub input: &'a dyn InputChannel,
    pub clock: &'a dyn Clock,
    pub cancel: CancelToken,
    pub token_price: Option<f64>,
    pub backoff: Duration,
}

impl Engine<'_> {
    /// Validate the workflow and register a queued run.
    pub fn create(&self, req: &NewRun) -> Result<RunMeta, HarnessError> {
        let loaded = self.loader.load_path(&req.workflow)?;
        let errors: Vec<Diagnostic> =
            validate_workflow(&loaded.spec, self.loader).into_iter().filter(Diagnostic::is_error).collect();
        if !errors.is_empty() {
            return Err(HarnessError::Invalid(errors));
        }
        let now = self.clock.timestamp();
        let meta = RunMeta {
            run_id: req.run_id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().to_string()),
            workflow_path: loaded.path.display().to_string(),
            workflow_hash: loaded.hash.clone(),
            status: "queued".into(),
            created_at: now.clone(),
            updated_at: now,
            params: req.inputs.clone(),
            totals: Default::default(),
            cost: 0.0,
            return_value: None,
            error: None,
            parent: req.parent.clone(),
            mock: req.mock.clone(),
            workspace: req.workspace.as_ref().map(|p| p.display().to_string()),
        };
        let dir = self.store.create(&meta)?;
        if let Some(seed) = &req.workspace {
            copy_tree(seed, &dir.workspace_path()).map_err(|e| StoreError::Io(format!("{}: {e}", seed.display())))?;
        }
        Ok(meta)
    }

    /// Run (or continue) a registered run until it finishes or stops.
    /// A changed workflow file is refused unless `force` is set.
    pub fn execute(
        &self,
        run_id: &str,
        replay: Vec<agentflow_core::trace::TraceRecord>,
        events: Option<&EventLog>,
        force: bool,
    ) -> Result<RunOutcome, HarnessError> {
        let mut dir = self.store.open(run_id)?;
        let mut meta = dir.read_meta()?;
        let source = std::fs::read_to_string(&meta.workflow_path)
            .map_err(|_| LoadError::NotFound { path: meta.workflow_path.clone() })?;
        let hash = content_hash(&source);
        let resume = match dir.latest_checkpoint() {
            // A failed run restarts from its last checkpoint before the failure.
            Ok(cp) if cp.finished.as_ref().is_some_and(|f| f.status != "completed") => {
                dir.checkpoints()?.into_iter().rev().find(|c| c.finished.is_none())
            }
            Ok(cp) => Some(cp),
            Err(StoreError::CheckpointNotFound(_)) => None,
            Err(e) => return Err(e.into()),
        };
        if let Some(cp) = &resume {
            if cp.workflow_hash != hash && !force {
                return Err(StoreError::HashMismatch { expected: cp.workflow_hash.clone(), found: hash }.into());
            }
            if cp.finished.is_some() {
                return Err(HarnessError::Finished(run_id.to_string()));
            }
            dir.truncate_to(cp)?;
        }
        let loaded = self.loader.load_path(Path::new(&meta.workflow_path))?;
        let workspace = dir.workspace_path();
        meta.status = "running".into();
        meta.updated_at = self.clock.timestamp();
        dir.write_meta(&meta)?;

        let own;
        let log: &EventLog = match events {
            Some(l) => l,
            None => {
                own = EventLog::with_file(run_id, Box::new(crate::clock::SystemClock::default()), &dir.events_path())
                    .map_err(|e| StoreError::Io(e.to_string()))?;
                &own
            }
        };
        let fan = Fanout(vec![log as &dyn Observer]);
        let svc = Services {
            backend: self.backend,
            tools: self.tools,
            observer: &fan,
            input: self.input,
            loader: self.loader,
            clock: self.clock,
            cancel: self.cancel.clone(),
        };
        let opts = RunOptions {
            run_id: run_id.to_string(),
            inputs: meta.params.clone(),
            workspace,
            workflow_hash: hash.clone(),
            resume,
            replay,
            token_price: self.token_price,
            backoff: self.backoff,
        };
        let out = interpreter::run(loaded.spec.clone(), opts, &svc, &mut dir);
        meta.status = match &out.error {
            Some(RunError::Cancelled) => "interrupted".into(),
            _ => out.status.as_str().into(),
        };
        meta.workflow_hash = hash;
        meta.totals = out.metrics.total;
        meta.cost = out.cost;
        meta.return_value = out.return_value.clone();
        meta.error = out.error.as_ref().map(ToString::to_string);
        meta.updated_at = self.clock.timestamp();
        dir.write_meta(&meta)?;
        Ok(out)
    }

    pub fn start(&self, req: &NewRun) -> Result<RunOutcome, HarnessError> {
        let meta = self.create(req)?;
        self.execute(&meta.run_id, Vec::new(), None, false)
    }

    pub fn resume(&self, run_id: &str, force: bool) -> Result<RunOutcome, HarnessError> {
        self.execute(run_id, Vec::new(), None, force)
    }

    /// New run that reuses the first `n` model-facing records of `source`,
    /// optionally against an edited workflow file.
    pub fn replay(
        &self,
        source: &str,
        n: usize,
        workflow: Option<&Path>,
        run_id: Option<String>,
    ) -> Result<RunOutcome, HarnessError> {
        let src = self.store.open(source)?;
        let meta = src.read_meta()?;
        let prefix = replay_prefix(&src.load_trace()?, n);
        let req = NewRun {
            workflow: workflow.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&meta.workflow_path)),
            inputs: meta.params.clone(),
            run_id,
            parent: Some(source.to_string()),
            mock: meta.mock.clone(),
            workspace: meta.workspace.as_ref().map(PathBuf::from),
        };
        let created = self.create(&req)?;
        self.execute(&created.run_id, prefix, None, false)
    }
}
