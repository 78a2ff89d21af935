mod common;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use agentflow::backend::{BackendError, ModelBackend, ModelRequest, ModelResponse, Script};
use agentflow::clock::FixedClock;
use agentflow::events::{EventKind, EventLog, NullObserver};
use agentflow::interpreter::{RunError, RunStatus};
use agentflow::store::{MemoryStore, NullStore};
use agentflow_core::step_id::StepId;
use agentflow_core::trace::{Message, RecordStatus, Role, Usage};
use agentflow_core::value::{Map, Value};
use common::*;
use proptest::prelude::*;
use serde_json::json;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    if let Some(parent) = p.parent() {
        std::fs::create_dir_all(parent).unwrap();
    }
    std::fs::write(&p, text).unwrap();
    p
}

fn ids(store: &MemoryStore) -> Vec<String> {
    store.records.iter().map(|r| r.step_id.to_string()).collect()
}

/// Run inline workflow text with an inline mock script.
fn run_text(yaml: &str, script: &str, inputs: Map<String, Value>) -> (agentflow::interpreter::RunOutcome, MemoryStore) {
    let d = tempfile::tempdir().unwrap();
    let p = write(d.path(), "wf.yaml", yaml);
    let rig = Rig::new(Some(Script::from_yaml(script, "script").unwrap()));
    let spec = rig.loader.load_path(&p).unwrap().spec.clone();
    let mut store = MemoryStore::new();
    let out = rig.run_spec(spec, inputs, d.path(), &mut store, None, Vec::new(), &NullObserver);
    (out, store)
}

#[test]
fn loop_at_position_three_numbers_iterations() {
    let c = &CASES[3];
    let ws = workspace();
    let mut store = MemoryStore::new();
    let out = Rig::for_case(c).run_case(c, ws.path(), &mut store, None);
    assert_eq!(out.status, RunStatus::Completed, "{:?}", out.error);
    let leaf_ids: Vec<String> =
        ids(&store).into_iter().filter(|i| i.starts_with("3.")).collect();
    assert_eq!(leaf_ids, ["3.1.1", "3.1.2", "3.2.1", "3.2.2"]);
    assert_eq!(out.return_value, Some(json!(2)));
}

#[test]
fn research_assistant_runs_through_module_call() {
    let c = &CASES[0];
    let ws = workspace();
    let mut store = MemoryStore::new();
    let out = Rig::for_case(c).run_case(c, ws.path(), &mut store, None);
    assert_eq!(out.status, RunStatus::Completed, "{:?}", out.error);
    let ids = ids(&store);
    assert_eq!(ids.first().map(String::as_str), Some("1"));
    assert!(ids.contains(&"2/1.1.1".to_string()), "{ids:?}");
    assert!(ids.contains(&"2/1.2.1".to_string()), "{ids:?}");
    assert!(ids.contains(&"2/2".to_string()));
    let summary = out.final_context.get("paper_summary").and_then(Value::as_str).unwrap();
    assert!(summary.starts_with("Preference-based"));
    let report = std::fs::read_to_string(ws.path().join("outputs/report.md")).unwrap();
    assert!(report.starts_with("# RLHF"));
}

#[test]
fn citation_returns_four_key_map() {
    let c = &CASES[1];
    let ws = workspace();
    let mut store = MemoryStore::new();
    let out = Rig::for_case(c).run_case(c, ws.path(), &mut store, None);
    let ret = out.return_value.unwrap();
    let keys: Vec<&String> = ret.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["abstract", "bibtex", "file_path", "title"]);
    assert_eq!(out.metrics.total.total, 58_993);
}

#[test]
fn runs_are_deterministic() {
    for c in CASES {
        let mut a = MemoryStore::new();
        let mut b = MemoryStore::new();
        let oa = Rig::for_case(c).run_case(c, workspace().path(), &mut a, None);
        let ob = Rig::for_case(c).run_case(c, workspace().path(), &mut b, None);
        assert_eq!(ids(&a), ids(&b), "{}", c.workflow);
        assert_eq!(oa.return_value, ob.return_value, "{}", c.workflow);
        assert_eq!(oa.final_context, ob.final_context, "{}", c.workflow);
        let ctx = |s: &MemoryStore| s.records.iter().map(|r| r.context.clone()).collect::<Vec<_>>();
        assert_eq!(ctx(&a), ctx(&b), "{}", c.workflow);
    }
}

#[test]
fn while_true_stops_at_default_limit() {
    let c = &CASES[4];
    let log = EventLog::new("r", Box::new(FixedClock));
    let rig = Rig::for_case(c);
    let mut store = MemoryStore::new();
    let ws = workspace();
    let out = rig.run_spec(rig.spec(c.workflow), Map::new(), ws.path(), &mut store, None, Vec::new(), &log);
    assert_eq!(out.status, RunStatus::Completed);
    assert_eq!(out.return_value, Some(json!(50)));
    let body = store.records.iter().filter(|r| r.kind == "increment").count();
    assert_eq!(body, 50);
    let w = store.records.iter().find(|r| r.kind == "while").unwrap();
    assert_eq!(w.status, RecordStatus::Limit);
    let limits: Vec<_> = log.all().into_iter().filter(|e| e.kind == EventKind::Limit).collect();
    assert_eq!(limits.len(), 1);
    assert_eq!(limits[0].step_id, Some(StepId::top(2)));
}

#[test]
fn while_respects_configured_limit_and_condition() {
    let yaml = r#"
name: w
workflow:
  - set_variable: {name: n, value: 0}
  - while:
      condition: "n < 3"
      max_iterations: 10
      body:
        - increment: n
  - while:
      condition: "true"
      max_iterations: 2
      body:
        - increment: n
  - return: n
"#;
    let (out, store) = run_text(yaml, "rules: []", Map::new());
    assert_eq!(out.return_value, Some(json!(5)));
    let whiles: Vec<_> = store.records.iter().filter(|r| r.kind == "while").map(|r| r.status).collect();
    assert_eq!(whiles, [RecordStatus::Completed, RecordStatus::Limit]);
}

#[test]
fn if_and_switch_pick_branches() {
    let yaml = r#"
name: branches
parameters:
  mode: "b"
workflow:
  - if:
      condition: "mode == 'a'"
      then:
        - set_variable: {name: took, value: "then"}
      else:
        - set_variable: {name: took, value: "else"}
  - switch:
      subject: "{{mode}}"
      cases:
        a:
          - set_variable: {name: picked, value: 1}
        b:
          - set_variable: {name: picked, value: 2}
      default:
        - set_variable: {name: picked, value: 0}
  - switch:
      subject: "{{mode}}"
      cases:
        z:
          - set_variable: {name: other, value: 1}
      default:
        - set_variable: {name: other, value: "default"}
"#;
    let (out, store) = run_text(yaml, "rules: []", Map::new());
    assert_eq!(out.final_context["took"], "else");
    assert_eq!(out.final_context["picked"], 2);
    assert_eq!(out.final_context["other"], "default");
    let ids = ids(&store);
    assert_eq!(ids, ["1.2.1", "1", "2.2.1", "2", "3.2.1", "3"]);
}

#[test]
fn switch_without_match_or_default_fails() {
    let yaml = "name: s\nworkflow:\n  - switch:\n      subject: \"x\"\n      cases:\n        y:\n          - set_variable: {name: a, value: 1}\n";
    let (out, _) = run_text(yaml, "rules: []", Map::new());
    assert!(matches!(out.error, Some(RunError::SwitchNoMatch { .. })), "{:?}", out.error);
}

#[test]
fn for_each_accepts_model_text_lists_and_rejects_others() {
    let yaml = r#"
name: fe
workflow:
  - task:
      name: list
      instruction: "List things"
      save_as: things
  - for_each:
      items: "{{things}}"
      body:
        - set_variable: {name: last, value: "{{item}}#{{loop_index}}"}
"#;
    let (out, _) = run_text(yaml, "rules:\n  - responses: [{text: '[\"x\", \"y\", \"z\"]'}]\n", Map::new());
    assert_eq!(out.final_context["last"], "z#2");
    let (out, _) = run_text(yaml, "rules:\n  - responses: [{text: 'not a list'}]\n", Map::new());
    assert!(matches!(out.error, Some(RunError::NotAList { .. })), "{:?}", out.error);
}

#[test]
fn unbound_variable_fails_the_step_with_a_record() {
    let yaml = "name: u\nworkflow:\n  - task:\n      name: t\n      instruction: \"Use {{missing}}\"\n";
    let (out, store) = run_text(yaml, "rules: []", Map::new());
    assert_eq!(out.status, RunStatus::Failed);
    assert!(out.error.unwrap().to_string().contains("missing"));
    assert_eq!(store.records.last().unwrap().status, RecordStatus::Failed);
}

#[test]
fn return_inside_loop_ends_the_module() {
    let yaml = r#"
name: early
workflow:
  - for_each:
      items: [1, 2, 3]
      body:
        - if:
            condition: "item == 2"
            then:
              - return: "{{item}}"
        - set_variable: {name: seen, value: "{{item}}"}
  - set_variable: {name: after, value: true}
"#;
    let (out, store) = run_text(yaml, "rules: []", Map::new());
    assert_eq!(out.return_value, Some(json!(2)));
    assert_eq!(out.final_context["seen"], 1);
    assert!(!out.final_context.contains_key("after"));
    assert!(!ids(&store).contains(&"1.3.1".to_string()));
}

#[test]
fn call_binds_parameters_and_requires_placeholders() {
    let d = tempfile::tempdir().unwrap();
    write(
        d.path(),
        "mods/double.yaml",
        "name: double\nparameters:\n  x: \"${X}\"\n  label: \"twice\"\nworkflow:\n  - set_variable: {name: y, value: \"{{label}} {{x}}\"}\n  - return: y\n",
    );
    let main = write(
        d.path(),
        "main.yaml",
        "name: m\nworkflow:\n  - call:\n      module: mods/double.yaml\n      parameters: {x: 21}\n      save_as: r\n  - call:\n      module: mods/double.yaml\n      save_as: bad\n",
    );
    let rig = Rig::new(None);
    let spec = rig.loader.load_path(&main).unwrap().spec.clone();
    let mut store = MemoryStore::new();
    let out = rig.run_spec(spec, Map::new(), d.path(), &mut store, None, Vec::new(), &NullObserver);
    assert_eq!(store.records[0].step_id.to_string(), "1/1");
    assert_eq!(store.records[2].writes["r"], "twice 21");
    assert_eq!(out.status, RunStatus::Failed);
    assert!(out.error.unwrap().to_string().contains('x'));
}

#[test]
fn module_without_return_yields_null_with_warning() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "m.yaml", "name: m\nworkflow:\n  - set_variable: {name: z, value: 1}\n");
    let main = write(d.path(), "main.yaml", "name: top\nworkflow:\n  - call:\n      module: m.yaml\n      save_as: r\n");
    let rig = Rig::new(None);
    let spec = rig.loader.load_path(&main).unwrap().spec.clone();
    let mut store = MemoryStore::new();
    let out = rig.run_spec(spec, Map::new(), d.path(), &mut store, None, Vec::new(), &NullObserver);
    assert_eq!(out.final_context["r"], Value::Null);
    assert!(store.records.last().unwrap().detail.as_ref().unwrap()["warning"].is_string());
}

#[test]
fn runtime_call_cycle_is_reported() {
    let rig = Rig::new(None);
    let spec = rig.spec("cycle/a.yaml");
    let mut store = MemoryStore::new();
    let out = rig.run_spec(spec, Map::new(), Path::new("."), &mut store, None, Vec::new(), &NullObserver);
    let e = out.error.unwrap().to_string();
    assert!(e.contains("a.yaml") && e.contains("b.yaml"), "{e}");
}

#[test]
fn gather_needs_a_parallel() {
    let (out, _) = run_text("name: g\nworkflow:\n  - gather: xs\n", "rules: []", Map::new());
    assert!(out.error.unwrap().to_string().contains("parallel"));
}

#[test]
fn parallel_merges_branch_writes_in_order() {
    let c = &CASES[6];
    let mut store = MemoryStore::new();
    let out = Rig::for_case(c).run_case(c, workspace().path(), &mut store, None);
    assert_eq!(out.return_value, Some(json!(["north ok", "east ok", "south ok", "west ok"])));
    for k in ["north_report", "east_report", "south_report", "west_report"] {
        assert!(out.final_context.contains_key(k));
    }
    assert_eq!(ids(&store)[..4], ["1.1.1", "1.2.1", "1.3.1", "1.4.1"]);
}

#[test]
fn parallel_same_name_writes_conflict() {
    let rig = Rig::new(None);
    let mut store = MemoryStore::new();
    let out = rig.run_spec(rig.spec("parallel_conflict.yaml"), Map::new(), Path::new("."), &mut store, None, Vec::new(), &NullObserver);
    assert!(matches!(out.error, Some(RunError::ParallelConflict { ref name, .. }) if name == "winner"));
}

#[test]
fn input_reads_supplied_answers() {
    let mut answers = Map::new();
    answers.insert("topic".into(), json!("tides"));
    let mut rig = Rig::new(Some(script("ask_user.script.yaml")));
    rig.answers = agentflow::input::Answers::new(answers);
    let mut store = MemoryStore::new();
    let out = rig.run_spec(rig.spec("ask_user.yaml"), Map::new(), Path::new("."), &mut store, None, Vec::new(), &NullObserver);
    assert_eq!(out.status, RunStatus::Completed);
    assert_eq!(store.records[0].writes["topic"], "tides");
    assert_eq!(store.records[1].instruction.as_deref(), Some("Write one sentence about tides"));

    let rig = Rig::new(Some(script("ask_user.script.yaml")));
    let out = rig.run_spec(rig.spec("ask_user.yaml"), Map::new(), Path::new("."), &mut NullStore, None, Vec::new(), &NullObserver);
    assert!(matches!(out.error, Some(RunError::InputUnavailable { .. })));
}

/// Records the roles each request carried.
#[derive(Clone, Default)]
struct Counting(Arc<Mutex<Vec<(String, Vec<Role>)>>>);

impl ModelBackend for Counting {
    fn complete(&self, req: &ModelRequest<'_>) -> Result<ModelResponse, BackendError> {
        self.0.lock().unwrap().push((req.step_name.to_string(), req.messages.iter().map(|m| m.role).collect()));
        Ok(ModelResponse { message: Message::assistant(format!("reply to {}", req.step_name), Vec::new()), usage: Usage::new(1, 1) })
    }
}

#[test]
fn step_continues_module_conversation_task_does_not() {
    let yaml = r#"
name: conv
goal: "Be brief"
workflow:
  - step: {name: s1, instruction: "first"}
  - step: {name: s2, instruction: "second"}
  - task: {name: t3, instruction: "third"}
  - step: {name: s4, instruction: "fourth"}
"#;
    let d = tempfile::tempdir().unwrap();
    let p = write(d.path(), "wf.yaml", yaml);
    let counting = Counting::default();
    let rig = Rig::with_backend(Box::new(counting.clone()));
    let spec = rig.loader.load_path(&p).unwrap().spec.clone();
    let out = rig.run_spec(spec, Map::new(), d.path(), &mut NullStore, None, Vec::new(), &NullObserver);
    assert_eq!(out.status, RunStatus::Completed, "{:?}", out.error);
    let seen = counting.0.lock().unwrap().clone();
    use Role::*;
    assert_eq!(seen[0], ("s1".to_string(), vec![System, User]));
    assert_eq!(seen[1], ("s2".to_string(), vec![System, User, Assistant, User]));
    assert_eq!(seen[2], ("t3".to_string(), vec![System, User]));
    assert_eq!(seen[3], ("s4".to_string(), vec![System, User, Assistant, User, Assistant, User]));
}

#[test]
fn skills_run_as_nested_workflows() {
    let d = tempfile::tempdir().unwrap();
    write(
        d.path(),
        "skills/shout.yaml",
        "name: shout\nparameters:\n  text: \"${TEXT}\"\nworkflow:\n  - set_variable: {name: out, value: \"{{text}}!\"}\n  - return: out\n",
    );
    let main = write(
        d.path(),
        "main.yaml",
        "name: host\nconfig:\n  registered_skills:\n    shout: skills/shout.yaml\nworkflow:\n  - step:\n      name: use_skill\n      instruction: \"Shout hello\"\n      save_as: said\n",
    );
    let script = "rules:\n  - responses:\n      - {tool_calls: [{name: shout, arguments: {text: hello}}]}\n      - {text: done}\n";
    let rig = Rig::new(Some(Script::from_yaml(script, "s").unwrap()));
    let spec = rig.loader.load_path(&main).unwrap().spec.clone();
    let mut store = MemoryStore::new();
    let out = rig.run_spec(spec, Map::new(), d.path(), &mut store, None, Vec::new(), &NullObserver);
    assert_eq!(out.status, RunStatus::Completed, "{:?}", out.error);
    assert_eq!(ids(&store), ["1/1/1", "1/1/2", "1"]);
    let call = &store.records[2].transcript[1].tool_calls[0];
    assert_eq!(call.result, Some(json!("hello!")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn step_ids_increase_in_execution_order(body in prop::collection::vec(shapes::shape(), 1..4)) {
        let d = tempfile::tempdir().unwrap();
        shapes::check_step_order(&body, d.path()).map_err(TestCaseError::fail)?;
    }
}

fn delayed_script(names: &[&str], delays: &[u64]) -> String {
    let mut s = String::from("rules:\n");
    for (n, d) in names.iter().zip(delays) {
        s += &format!("  - match: {{step: \"{n}\"}}\n    responses:\n      - {{text: \"{n} ok\", delay_ms: {d}}}\n");
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    /// Completion order never leaks into the merged context or the gather list.
    #[test]
    fn parallel_results_ignore_completion_order(delays in prop::collection::vec(0u64..20, 4)) {
        let names = ["north", "east", "south", "west"];
        let yaml = std::fs::read_to_string(fixture("parallel4.yaml")).unwrap();
        let (out, store) = run_text(&yaml, &delayed_script(&names, &delays), Map::new());
        prop_assert_eq!(out.return_value, Some(json!(["north ok", "east ok", "south ok", "west ok"])));
        prop_assert_eq!(&ids(&store)[..4], ["1.1.1", "1.2.1", "1.3.1", "1.4.1"]);

        let clash = "name: c\nworkflow:\n  - parallel:\n      - task: {name: \"north\", instruction: \"a\", save_as: \"winner\"}\n      - task: {name: \"east\", instruction: \"b\", save_as: \"winner\"}\n  - return: winner\n";
        let (out, _) = run_text(clash, &delayed_script(&names[..2], &delays[..2]), Map::new());
        prop_assert!(matches!(out.error, Some(RunError::ParallelConflict { ref name, .. }) if name == "winner"), "{:?}", out.error);
    }
}
