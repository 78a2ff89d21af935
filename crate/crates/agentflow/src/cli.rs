//! Command-line front end. `run_cli` is the whole program minus process
//! exit, so tests can drive it with captured output.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use agentflow_core::analysis::{Diagnostic, Severity};
use agentflow_core::graph::to_graph;
use agentflow_core::metrics::{aggregate_metrics, totals_line, Totals};
use agentflow_core::report::render_report;
use agentflow_core::value::{Map, Value};
use agentflow_core::verify::{verify_plan, verify_trace};
use agentflow_core::workflow::{EffectiveConfig, DEFAULT_TOKEN_PRICE};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use crate::backend::{ModelBackend, OpenAiBackend, Script, ScriptedBackend};
use crate::clock::SystemClock;
use crate::executor::CancelToken;
use crate::harness::{load_contract, Engine, HarnessError, NewRun, WorkspaceEnv};
use crate::input::{Answers, Interactive};
use crate::interpreter::{RunOutcome, RunStatus};
use crate::loader::Loader;
use crate::parse::{parse_workflow, yaml_to_value};
use crate::store::{RunMeta, Store};
use crate::tools::{BuiltinTools, ToolFixtures};
use crate::trace_view::render_trace;
use crate::validate::validate_workflow;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Config file contents; every field can be overridden from the environment.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub token_price: Option<f64>,
    pub store: Option<String>,
    pub tool_fixtures: Option<String>,
    pub bind: Option<String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings, String> {
        let Some(path) = path else { return Ok(Settings::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let v = yaml_to_value(&text, &path.display().to_string()).map_err(|e| e.to_string())?;
        if v.is_null() {
            return Ok(Settings::default());
        }
        serde_json::from_value(v).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// AGENTFLOW_BASE_URL, _MODEL, _API_KEY, _TOKEN_PRICE, _STORE.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), String> {
        if let Some(v) = get("AGENTFLOW_BASE_URL") {
            self.base_url = Some(v);
        }
        if let Some(v) = get("AGENTFLOW_MODEL") {
            self.model = Some(v);
        }
        if let Some(v) = get("AGENTFLOW_API_KEY") {
            self.api_key = Some(v);
        }
        if let Some(v) = get("AGENTFLOW_TOKEN_PRICE") {
            self.token_price = Some(v.parse().map_err(|_| format!("AGENTFLOW_TOKEN_PRICE: not a number: {v}"))?);
        }
        if let Some(v) = get("AGENTFLOW_STORE") {
            self.store = Some(v);
        }
        Ok(())
    }

    pub fn store_root(&self) -> PathBuf {
        PathBuf::from(self.store.as_deref().unwrap_or(".agentflow/runs"))
    }

    pub fn fixtures(&self) -> Result<ToolFixtures, String> {
        match &self.tool_fixtures {
            Some(p) => ToolFixtures::load(Path::new(p)),
            None => Ok(ToolFixtures::default()),
        }
    }

    /// Scripted mock if `mock` is given, else the configured HTTP backend.
    pub fn backend(&self, mock: Option<&Path>) -> Result<Box<dyn ModelBackend>, String> {
        if let Some(path) = mock {
            let script = Script::load(path).map_err(|e| e.to_string())?;
            return Ok(Box::new(ScriptedBackend::new(script)));
        }
        match &self.base_url {
            Some(url) => Ok(Box::new(OpenAiBackend::new(url.clone(), self.api_key.clone(), self.model.clone()))),
            None => Err("no model backend: pass --mock <script> or set AGENTFLOW_BASE_URL".into()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "agentflow", version, about = "Run and verify declarative agent workflows")]
pub struct Cli {
    /// Config file (YAML).
    #[arg(long, global = true, env = "AGENTFLOW_CONFIG")]
    pub config: Option<PathBuf>,
    /// Run store directory.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphFormat {
    Json,
    Dot,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute a workflow.
    Run {
        file: PathBuf,
        /// Workflow parameter, `key=value` (value parsed as JSON when possible).
        #[arg(long = "param", value_name = "K=V")]
        params: Vec<String>,
        /// YAML/JSON map of parameters.
        #[arg(long)]
        params_file: Option<PathBuf>,
        /// Scripted mock model.
        #[arg(long)]
        mock: Option<PathBuf>,
        /// Answers for `input` operations (YAML/JSON map).
        #[arg(long)]
        answers: Option<PathBuf>,
        /// Directory copied into the run workspace.
        #[arg(long)]
        workspace: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Check a workflow without running it.
    Validate { file: PathBuf },
    /// Print the workflow graph.
    Graph {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: GraphFormat,
    },
    /// Static contract verification.
    Verify {
        file: PathBuf,
        #[arg(long)]
        contracts: PathBuf,
        /// Workspace used for file-path checks.
        #[arg(long)]
        workspace: Option<PathBuf>,
    },
    /// Check a recorded run against contracts.
    VerifyTrace {
        run_id: String,
        #[arg(long)]
        contracts: PathBuf,
    },
    /// Continue an interrupted run from its latest checkpoint.
    Resume {
        run_id: String,
        /// Resume even if the workflow file changed.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        mock: Option<PathBuf>,
        #[arg(long)]
        answers: Option<PathBuf>,
    },
    /// New run reusing the first N model steps of a recorded run.
    Replay {
        run_id: String,
        #[arg(long)]
        steps: usize,
        /// Workflow to run (defaults to the recorded one).
        file: Option<PathBuf>,
        #[arg(long)]
        mock: Option<PathBuf>,
    },
    /// Stored runs.
    Runs {
        #[command(subcommand)]
        command: RunsCommand,
    },
    /// Recorded traces.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum RunsCommand {
    List,
}

#[derive(Debug, Subcommand)]
pub enum TraceCommand {
    Show { run_id: String },
}

struct Ctx<'a> {
    settings: Settings,
    json: bool,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

type CmdResult = Result<i32, (i32, String)>;

fn failed(e: impl ToString) -> (i32, String) {
    (EXIT_FAILED, e.to_string())
}

fn usage(e: impl ToString) -> (i32, String) {
    (EXIT_USAGE, e.to_string())
}

/// `key=value` pairs; values that parse as JSON keep their type.
pub fn parse_params(pairs: &[String]) -> Result<Map<String, Value>, String> {
    let mut out = Map::new();
    for p in pairs {
        let (k, v) = p.split_once('=').ok_or_else(|| format!("--param expects key=value, got `{p}`"))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        out.insert(k.trim().to_string(), value);
    }
    Ok(out)
}

fn read_map(path: &Path) -> Result<Map<String, Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    match yaml_to_value(&text, &path.display().to_string()).map_err(|e| e.to_string())? {
        Value::Object(m) => Ok(m),
        Value::Null => Ok(Map::new()),
        _ => Err(format!("{}: expected a mapping", path.display())),
    }
}

fn diag_line(origin: &str, d: &Diagnostic) -> String {
    let sev = match d.severity {
        Severity::Error => "error",
        Severity::Warning => "warning",
    };
    match d.span {
        Some(s) => format!("{origin}:{}:{}: {sev}[{}]: {}", s.start.line, s.start.column, d.code, d.message),
        None => format!("{origin}: {sev}[{}]: {}", d.code, d.message),
    }
}

fn outcome_json(o: &RunOutcome) -> Value {
    json!({
        "run_id": o.run_id,
        "status": o.status.as_str(),
        "return_value": o.return_value,
        "totals": o.metrics.total,
        "cost": o.cost,
        "wall_ms": o.wall_ms,
        "error": o.error.as_ref().map(ToString::to_string),
    })
}

impl Ctx<'_> {
    fn println(&mut self, s: impl AsRef<str>) {
        let _ = writeln!(self.out, "{}", s.as_ref());
    }

    fn print_json(&mut self, v: &Value) {
        let _ = writeln!(self.out, "{}", serde_json::to_string_pretty(v).expect("json"));
    }

    fn store(&self) -> Store {
        Store::new(self.settings.store_root())
    }

    fn report_outcome(&mut self, o: &RunOutcome) -> i32 {
        if self.json {
            self.print_json(&outcome_json(o));
        } else {
            self.println(format!("run_id: {}", o.run_id));
            self.println(format!("status: {}", o.status.as_str()));
            if let Some(v) = &o.return_value {
                self.println(format!("return: {v}"));
            }
            if let Some(e) = &o.error {
                let _ = writeln!(self.err, "error: {e}");
            }
            self.println(totals_line(&Totals { usage: o.metrics.total, cost: o.cost }));
        }
        if o.status == RunStatus::Completed {
            EXIT_OK
        } else {
            EXIT_FAILED
        }
    }

    fn harness_error(&mut self, e: HarnessError) -> CmdResult {
        if let HarnessError::Invalid(diags) = &e {
            for d in diags {
                let _ = writeln!(self.err, "{}", diag_line("workflow", d));
            }
        }
        Err(failed(e))
    }

    fn with_engine<T>(
        &mut self,
        mock: Option<&Path>,
        answers: Option<&Path>,
        f: impl FnOnce(&Engine<'_>) -> T,
    ) -> Result<T, (i32, String)> {
        let backend = self.settings.backend(mock).map_err(usage)?;
        let tools = BuiltinTools::new(self.settings.fixtures().map_err(usage)?);
        let answers = match answers {
            Some(p) => Answers::new(read_map(p).map_err(usage)?),
            None => Answers::default(),
        };
        let input = Interactive { answers };
        let store = self.store();
        let loader = Loader::new();
        let clock = SystemClock::default();
        let engine = Engine {
            store: &store,
            loader: &loader,
            backend: backend.as_ref(),
            tools: &tools,
            input: &input,
            clock: &clock,
            cancel: CancelToken::default(),
            token_price: self.settings.token_price,
            backoff: Duration::from_millis(500),
        };
        Ok(f(&engine))
    }

    fn dispatch(&mut self, cmd: Command) -> CmdResult {
        match cmd {
            Command::Run { file, params, params_file, mock, answers, workspace, run_id } => {
                let mut inputs = match &params_file {
                    Some(p) => read_map(p).map_err(usage)?,
                    None => Map::new(),
                };
                inputs.extend(parse_params(&params).map_err(usage)?);
                let mock_ref = mock.as_ref().map(|m| absolute(m).display().to_string());
                let req = NewRun {
                    workflow: file,
                    inputs,
                    run_id,
                    parent: None,
                    mock: mock_ref,
                    workspace: workspace.map(|w| absolute(&w)),
                };
                match self.with_engine(mock.as_deref(), answers.as_deref(), |e| e.start(&req))? {
                    Ok(o) => Ok(self.report_outcome(&o)),
                    Err(e) => self.harness_error(e),
                }
            }
            Command::Validate { file } => {
                let origin = file.display().to_string();
                let src = std::fs::read_to_string(&file).map_err(|e| failed(format!("{origin}: {e}")))?;
                let spec = match parse_workflow(&src, &origin) {
                    Ok(s) => s,
                    Err(e) => {
                        if self.json {
                            let pos = e.pos();
                            self.print_json(&json!({"valid": false, "diagnostics": [{
                                "severity": "error", "code": "parse", "message": e.to_string(),
                                "line": pos.map(|p| p.line), "column": pos.map(|p| p.column)}]}));
                        } else {
                            let _ = writeln!(self.err, "{e}");
                        }
                        return Ok(EXIT_FAILED);
                    }
                };
                let diags = validate_workflow(&spec, &Loader::new());
                let errors = diags.iter().filter(|d| d.is_error()).count();
                if self.json {
                    self.print_json(&json!({"valid": errors == 0, "diagnostics": diags}));
                } else {
                    for d in &diags {
                        let _ = writeln!(self.err, "{}", diag_line(&origin, d));
                    }
                    self.println(format!("{origin}: {errors} error(s), {} warning(s)", diags.len() - errors));
                }
                Ok(if errors == 0 { EXIT_OK } else { EXIT_FAILED })
            }
            Command::Graph { file, format } => {
                let spec = Loader::new().load_path(&file).map_err(failed)?.spec.clone();
                let graph = to_graph(&spec);
                match format {
                    GraphFormat::Json => self.print_json(&serde_json::to_value(&graph).expect("graph json")),
                    GraphFormat::Dot => {
                        let dot = graph.to_dot(&spec.name);
                        self.println(dot.trim_end());
                    }
                }
                Ok(EXIT_OK)
            }
            Command::Verify { file, contracts, workspace } => {
                let spec = Loader::new().load_path(&file).map_err(failed)?.spec.clone();
                let contract = load_contract(&contracts).map_err(failed)?;
                let tools = BuiltinTools::new(self.settings.fixtures().map_err(usage)?);
                let ws = workspace.unwrap_or_else(|| PathBuf::from("."));
                let config = EffectiveConfig::default().inherit(&spec.config, &spec.origin);
                let env = WorkspaceEnv { workspace: &ws, tools: &tools, enabled: config.enabled_tools.as_deref() };
                let report = match verify_plan(&spec, &contract, Some(&env)) {
                    Ok(r) => r,
                    Err(errs) => {
                        for e in &errs {
                            let _ = writeln!(self.err, "{}: {e}", contracts.display());
                        }
                        return Ok(EXIT_FAILED);
                    }
                };
                if self.json {
                    self.print_json(&serde_json::to_value(&report).expect("report json"));
                } else {
                    let text = render_report(&report);
                    self.println(text.trim_end());
                }
                Ok(if report.passed { EXIT_OK } else { EXIT_FAILED })
            }
            Command::VerifyTrace { run_id, contracts } => {
                let store = self.store();
                let dir = store.open(&run_id).map_err(failed)?;
                let meta = dir.read_meta().map_err(failed)?;
                let records = dir.load_trace().map_err(failed)?;
                let contract = load_contract(&contracts).map_err(failed)?;
                let loaded = Loader::new().load_path(Path::new(&meta.workflow_path)).map_err(failed)?;
                let config = EffectiveConfig::default().inherit(&loaded.spec.config, &loaded.spec.origin);
                let tools = BuiltinTools::new(self.settings.fixtures().map_err(usage)?);
                let ws = dir.workspace_path();
                let env = WorkspaceEnv { workspace: &ws, tools: &tools, enabled: config.enabled_tools.as_deref() };
                let report = verify_trace(&loaded.spec.name, &records, &contract, &env);
                if self.json {
                    self.print_json(&serde_json::to_value(&report).expect("report json"));
                } else {
                    let text = render_report(&report);
                    self.println(text.trim_end());
                }
                Ok(if report.passed { EXIT_OK } else { EXIT_FAILED })
            }
            Command::Resume { run_id, force, mock, answers } => {
                let meta = self.store().open(&run_id).and_then(|d| d.read_meta()).map_err(failed)?;
                let mock = mock.or_else(|| meta.mock.as_ref().map(PathBuf::from));
                match self.with_engine(mock.as_deref(), answers.as_deref(), |e| e.resume(&run_id, force))? {
                    Ok(o) => Ok(self.report_outcome(&o)),
                    Err(e) => self.harness_error(e),
                }
            }
            Command::Replay { run_id, steps, file, mock } => {
                let meta = self.store().open(&run_id).and_then(|d| d.read_meta()).map_err(failed)?;
                let mock = mock.or_else(|| meta.mock.as_ref().map(PathBuf::from));
                match self.with_engine(mock.as_deref(), None, |e| e.replay(&run_id, steps, file.as_deref(), None))? {
                    Ok(o) => Ok(self.report_outcome(&o)),
                    Err(e) => self.harness_error(e),
                }
            }
            Command::Runs { command: RunsCommand::List } => {
                let runs: Vec<RunMeta> = self.store().list_runs().map_err(failed)?;
                if self.json {
                    self.print_json(&serde_json::to_value(&runs).expect("runs json"));
                } else {
                    for r in &runs {
                        self.println(format!("{}  {:<11}  {}  {}", r.run_id, r.status, r.created_at, r.workflow_path));
                    }
                }
                Ok(EXIT_OK)
            }
            Command::Trace { command: TraceCommand::Show { run_id } } => {
                let store = self.store();
                let dir = store.open(&run_id).map_err(failed)?;
                let meta = dir.read_meta().map_err(failed)?;
                let records = dir.load_trace().map_err(failed)?;
                if self.json {
                    self.print_json(&serde_json::to_value(&records).expect("trace json"));
                    return Ok(EXIT_OK);
                }
                let model = Loader::new()
                    .load_path(Path::new(&meta.workflow_path))
                    .ok()
                    .and_then(|l| l.spec.config.model.clone());
                let price = self.settings.token_price.unwrap_or(DEFAULT_TOKEN_PRICE);
                let totals = aggregate_metrics(&records, price);
                let text = render_trace(&records, model.as_deref(), &totals);
                self.println(text.trim_end());
                Ok(EXIT_OK)
            }
            Command::Serve { bind } => {
                let bind = bind.or(self.settings.bind.clone()).unwrap_or_else(|| "127.0.0.1:8080".into());
                let rt = tokio::runtime::Runtime::new().map_err(failed)?;
                rt.block_on(crate::service::serve(&bind, self.settings.clone())).map_err(failed)?;
                Ok(EXIT_OK)
            }
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Parse `args` (including the program name) and run the command.
pub fn run_cli<I, T>(args: I, env: impl Fn(&str) -> Option<String>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    let mut settings = match Settings::load(cli.config.as_deref()) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    if let Err(e) = settings.apply_env(env) {
        let _ = writeln!(err, "error: {e}");
        return EXIT_USAGE;
    }
    if let Some(s) = &cli.store {
        settings.store = Some(s.display().to_string());
    }
    let mut ctx = Ctx { settings, json: cli.json, out, err };
    match ctx.dispatch(cli.command) {
        Ok(code) => code,
        Err((code, msg)) => {
            let _ = writeln!(ctx.err, "error: {msg}");
            if code == EXIT_USAGE {
                let _ = writeln!(ctx.err, "usage: agentflow <COMMAND> [OPTIONS]  (see --help)");
            }
            code
        }
    }
}
