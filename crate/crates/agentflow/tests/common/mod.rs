#![allow(dead_code)]

pub mod api;
pub mod shapes;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use agentflow::backend::{BackendError, ModelBackend, ModelRequest, ModelResponse, Script, ScriptedBackend};
use agentflow::clock::FixedClock;
use agentflow::events::{EventLog, Observer};
use agentflow::executor::CancelToken;
use agentflow::input::Answers;
use agentflow::interpreter::{run, RunOptions, RunOutcome, Services};
use agentflow::loader::{content_hash, Loader};
use agentflow::parse::yaml_to_value;
use agentflow::store::{Checkpoint, Durability};
use agentflow::tools::BuiltinTools;
use agentflow_core::trace::TraceRecord;
use agentflow_core::value::{Map, Value};
use agentflow_core::workflow::WorkflowSpec;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

pub fn read_map(rel: &str) -> Map<String, Value> {
    let text = std::fs::read_to_string(fixture(rel)).unwrap();
    match yaml_to_value(&text, rel).unwrap() {
        Value::Object(m) => m,
        other => panic!("{rel}: not a map: {other}"),
    }
}

pub fn script(rel: &str) -> Script {
    Script::load(&fixture(rel)).unwrap()
}

/// Fresh workspace seeded from fixtures/workspace.
pub fn workspace() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    for e in std::fs::read_dir(fixture("workspace")).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), d.path().join(e.file_name())).unwrap();
    }
    d
}

/// A fixture workflow with the mock script and inputs it runs under.
#[derive(Clone)]
pub struct Case {
    pub workflow: &'static str,
    pub script: Option<&'static str>,
    pub inputs: Option<&'static str>,
}

pub const CASES: &[Case] = &[
    Case { workflow: "research_assistant.yaml", script: Some("research.script.yaml"), inputs: None },
    Case {
        workflow: "extract_single_citation_module.yaml",
        script: Some("citation.script.yaml"),
        inputs: Some("citation.inputs.yaml"),
    },
    Case {
        workflow: "extract_single_citation.yaml",
        script: Some("citation.script.yaml"),
        inputs: Some("citation.inputs.yaml"),
    },
    Case { workflow: "loop.yaml", script: Some("loop.script.yaml"), inputs: None },
    Case { workflow: "while_true.yaml", script: None, inputs: None },
    Case { workflow: "three_step.yaml", script: Some("three_step.script.yaml"), inputs: None },
    Case { workflow: "parallel4.yaml", script: Some("parallel4.script.yaml"), inputs: None },
];

pub struct Rig {
    pub loader: Loader,
    pub backend: Box<dyn ModelBackend>,
    pub tools: BuiltinTools,
    pub answers: Answers,
    pub clock: FixedClock,
    pub cancel: CancelToken,
}

impl Rig {
    pub fn new(script: Option<Script>) -> Rig {
        Rig::with_backend(Box::new(ScriptedBackend::new(script.unwrap_or_default())))
    }

    pub fn with_backend(backend: Box<dyn ModelBackend>) -> Rig {
        Rig {
            loader: Loader::new(),
            backend,
            tools: BuiltinTools::default(),
            answers: Answers::default(),
            clock: FixedClock,
            cancel: CancelToken::default(),
        }
    }

    pub fn for_case(c: &Case) -> Rig {
        Rig::new(c.script.map(script))
    }

    pub fn spec(&self, rel: &str) -> Arc<WorkflowSpec> {
        self.loader.load_path(&fixture(rel)).unwrap().spec.clone()
    }

    pub fn run_spec(
        &self,
        spec: Arc<WorkflowSpec>,
        inputs: Map<String, Value>,
        ws: &Path,
        store: &mut dyn Durability,
        resume: Option<Checkpoint>,
        replay: Vec<TraceRecord>,
        observer: &dyn Observer,
    ) -> RunOutcome {
        let svc = Services {
            backend: self.backend.as_ref(),
            tools: &self.tools,
            observer,
            input: &self.answers,
            loader: &self.loader,
            clock: &self.clock,
            cancel: self.cancel.clone(),
        };
        let hash = std::fs::read_to_string(&spec.origin).map(|s| content_hash(&s)).unwrap_or_default();
        let opts = RunOptions {
            run_id: "test-run".into(),
            inputs,
            workspace: ws.to_path_buf(),
            workflow_hash: hash,
            resume,
            replay,
            token_price: None,
            backoff: Duration::ZERO,
        };
        run(spec, opts, &svc, store)
    }

    pub fn run_case(&self, c: &Case, ws: &Path, store: &mut dyn Durability, resume: Option<Checkpoint>) -> RunOutcome {
        let inputs = c.inputs.map(read_map).unwrap_or_default();
        let log = EventLog::new("test-run", Box::new(FixedClock));
        self.run_spec(self.spec(c.workflow), inputs, ws, store, resume, Vec::new(), &log)
    }
}

/// Scripted backend that logs which steps reached it.
#[derive(Clone)]
pub struct Spy {
    pub inner: Arc<ScriptedBackend>,
    pub calls: Arc<Mutex<Vec<String>>>,
}

impl Spy {
    pub fn new(rel: &str) -> Spy {
        Spy { inner: Arc::new(ScriptedBackend::new(script(rel))), calls: Arc::default() }
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }
}

impl ModelBackend for Spy {
    fn complete(&self, req: &ModelRequest<'_>) -> Result<ModelResponse, BackendError> {
        self.calls.lock().unwrap().push(req.step_id.to_string());
        self.inner.complete(req)
    }
}

