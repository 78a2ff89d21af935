mod common;

use agentflow::cli::{parse_params, run_cli, EXIT_FAILED, EXIT_OK, EXIT_USAGE};
use common::*;
use serde_json::json;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(store: &std::path::Path, args: &[&str]) -> Out {
    cli_env(store, args, &[])
}

fn cli_env(store: &std::path::Path, args: &[&str], env: &[(&str, &str)]) -> Out {
    let mut argv = vec!["agentflow".to_string(), "--store".into(), store.display().to_string()];
    argv.extend(args.iter().map(|a| a.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let env: Vec<(String, String)> = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let code = run_cli(argv, |k| env.iter().find(|(n, _)| n == k).map(|(_, v)| v.clone()), &mut out, &mut err);
    Out { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

fn f(rel: &str) -> String {
    fixture(rel).display().to_string()
}

fn citation(store: &std::path::Path, id: &str) -> Out {
    let (wf, inputs, mock, ws) = (
        f("extract_single_citation.yaml"),
        f("citation.inputs.yaml"),
        f("citation.script.yaml"),
        f("workspace"),
    );
    cli(store, &["run", &wf, "--params-file", &inputs, "--mock", &mock, "--workspace", &ws, "--run-id", id])
}

#[test]
fn run_prints_totals_and_return() {
    let d = tempfile::tempdir().unwrap();
    let o = citation(d.path(), "c1");
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert!(o.stdout.contains("status: completed"));
    assert!(o.stdout.contains("Workflow total: 58,993 tokens | Cost: $0.025"), "{}", o.stdout);

    let o = cli(d.path(), &["trace", "show", "c1"]);
    assert_eq!(o.code, EXIT_OK);
    for line in ["Step 1: extract_paper_title", "16,864", "16,463", "16,685", "8,981"] {
        assert!(o.stdout.contains(line), "missing {line:?}\n{}", o.stdout);
    }
    assert!(o.stdout.trim_end().ends_with("Workflow total: 58,993 tokens | Cost: $0.025"));

    let o = cli(d.path(), &["--json", "runs", "list"]);
    let runs: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(runs[0]["run_id"], "c1");
}

#[test]
fn validate_and_graph_outputs() {
    let d = tempfile::tempdir().unwrap();
    let o = cli(d.path(), &["validate", &f("research_assistant.yaml")]);
    assert_eq!(o.code, EXIT_OK, "{}{}", o.stdout, o.stderr);
    let o = cli(d.path(), &["validate", &f("cycle/a.yaml")]);
    assert_eq!(o.code, EXIT_FAILED);
    assert!((o.stdout.clone() + &o.stderr).contains("cycle"));
    let o = cli(d.path(), &["graph", &f("three_step.yaml"), "--format", "dot"]);
    assert_eq!(o.code, EXIT_OK);
    assert!(o.stdout.starts_with("digraph"), "{}", o.stdout);
    let o = cli(d.path(), &["graph", &f("three_step.yaml"), "--format", "json"]);
    let g: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(g["nodes"].as_array().unwrap().len(), 4);
}

#[test]
fn verify_commands_report_and_exit() {
    let d = tempfile::tempdir().unwrap();
    let contracts = f("citation.contracts.yaml");
    let o = cli(d.path(), &["verify", &f("extract_single_citation.yaml"), "--contracts", &contracts, "--workspace", &f("workspace")]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert!(o.stdout.contains("Graph verification: PASSED (7/7 nodes)"));

    let broken = d.path().join("broken.yaml");
    let text = std::fs::read_to_string(&contracts).unwrap();
    std::fs::write(&broken, text.replace("    post:\n      - paper_title: isNonEmptyString\n", "")).unwrap();
    let o = cli(d.path(), &["verify", &f("extract_single_citation.yaml"), "--contracts", &broken.display().to_string()]);
    assert_eq!(o.code, EXIT_FAILED);
    assert!(o.stdout.contains("Graph verification: FAILED"));

    citation(d.path(), "c2");
    let o = cli(d.path(), &["verify-trace", "c2", "--contracts", &contracts]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert!(o.stdout.contains("ALL NODES VERIFIED"));
}

#[test]
fn failures_and_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    let o = cli(d.path(), &["run", &f("parallel_conflict.yaml"), "--mock", &f("parallel4.script.yaml")]);
    assert_eq!(o.code, EXIT_FAILED);
    assert!(o.stderr.contains("winner"), "{}", o.stderr);
    let o = cli(d.path(), &["frobnicate"]);
    assert_eq!(o.code, EXIT_USAGE);
    let o = cli(d.path(), &["run", &f("three_step.yaml"), "--param", "novalue"]);
    assert_eq!(o.code, EXIT_USAGE);
    let o = cli(d.path(), &["run", &f("three_step.yaml")]);
    assert_eq!(o.code, EXIT_USAGE, "{}", o.stderr);
    assert!(o.stderr.contains("no model backend"));
    let o = cli(d.path(), &["resume", "missing"]);
    assert_eq!(o.code, EXIT_FAILED);
    let o = cli_env(d.path(), &["validate", &f("three_step.yaml")], &[("AGENTFLOW_TOKEN_PRICE", "cheap")]);
    assert_eq!(o.code, EXIT_USAGE);
}

#[test]
fn resume_and_replay_reuse_the_mock() {
    let d = tempfile::tempdir().unwrap();
    let o = cli(d.path(), &["run", &f("ask_user.yaml"), "--mock", &f("ask_user.script.yaml"), "--run-id", "a"]);
    assert_eq!(o.code, EXIT_FAILED);
    let answers = d.path().join("answers.yaml");
    std::fs::write(&answers, "topic: tides\n").unwrap();
    let o = cli(d.path(), &["resume", "a", "--answers", &answers.display().to_string()]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let o = cli(d.path(), &["replay", "a", "--steps", "1"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
}

#[test]
fn params_keep_json_types() {
    let p = parse_params(&["n=3".into(), "flag=true".into(), "name=plain text".into(), "xs=[1,2]".into()]).unwrap();
    assert_eq!(serde_json::Value::Object(p), json!({"n": 3, "flag": true, "name": "plain text", "xs": [1, 2]}));
    assert!(parse_params(&["missing".into()]).is_err());
}
