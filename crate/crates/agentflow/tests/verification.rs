mod common;

use agentflow::harness::{load_contract, WorkspaceEnv};
use agentflow::interpreter::RunStatus;
use agentflow::store::MemoryStore;
use agentflow::tools::BuiltinTools;
use agentflow_core::contract::Contract;
use agentflow_core::predicate::Mode;
use agentflow_core::report::render_report;
use agentflow_core::trace::TraceRecord;
use agentflow_core::value::Value;
use agentflow_core::verify::{verify_plan, verify_trace, Phase, Provenance, VerificationReport};
use common::*;
use proptest::prelude::*;

const CITATION: usize = 2;

fn contract() -> Contract {
    load_contract(&fixture("citation.contracts.yaml")).unwrap()
}

fn static_report(c: &Contract) -> VerificationReport {
    let rig = Rig::new(None);
    let spec = rig.spec(CASES[CITATION].workflow);
    let tools = BuiltinTools::default();
    let ws = fixture("workspace");
    let env = WorkspaceEnv { workspace: &ws, tools: &tools, enabled: None };
    verify_plan(&spec, c, Some(&env)).unwrap()
}

fn citation_trace() -> (Vec<TraceRecord>, tempfile::TempDir) {
    let c = &CASES[CITATION];
    let ws = workspace();
    let mut store = MemoryStore::new();
    let out = Rig::for_case(c).run_case(c, ws.path(), &mut store, None);
    assert_eq!(out.status, RunStatus::Completed, "{:?}", out.error);
    (store.records, ws)
}

fn dynamic_report(records: &[TraceRecord], c: &Contract, ws: &std::path::Path) -> VerificationReport {
    let tools = BuiltinTools::default();
    let env = WorkspaceEnv { workspace: ws, tools: &tools, enabled: None };
    verify_trace("extract_single_citation", records, c, &env)
}

fn failures(r: &VerificationReport) -> Vec<(usize, Phase, String)> {
    r.nodes
        .iter()
        .flat_map(|n| n.failures().map(move |f| (n.number, f.phase, f.subject.clone())))
        .collect()
}

#[test]
fn static_plan_passes_with_provenance() {
    let r = static_report(&contract());
    assert!(r.passed);
    assert_eq!((r.graph_nodes, r.graph_edges), (7, 7));
    assert_eq!(r.nodes.len(), 6);
    let text = render_report(&r);
    assert!(text.starts_with("STATIC SEMANTIC VERIFICATION: extract_single_citation (7 nodes, 7 edges)"));
    assert!(text.trim_end().ends_with("Graph verification: PASSED (7/7 nodes)"));
    let node2 = &r.nodes[1];
    assert_eq!(node2.label, "extract_bibtex_by_tool");
    assert_eq!(node2.checks[0].provenance, Some(Provenance::Node { number: 1 }));
    assert_eq!(node2.checks[1].provenance, Some(Provenance::Input));
    assert!(text.contains("[from Node 1]"));
}

#[test]
fn dropping_node_one_post_fails_node_two_on_paper_title() {
    let mut c = contract();
    c.steps.get_mut("extract_paper_title").unwrap().post.clear();
    let r = static_report(&c);
    assert!(!r.passed);
    assert!(r.nodes[0].passed());
    let node2: Vec<_> = r.nodes[1].failures().collect();
    assert_eq!(node2.len(), 1);
    assert_eq!(node2[0].subject, "paper_title");
    assert_eq!(node2[0].provenance, Some(Provenance::Unmet));
    let text = render_report(&r);
    assert!(text.contains("Graph verification: FAILED"), "{text}");
    // Every reader of paper_title loses its only source.
    let nodes: Vec<usize> = failures(&r).iter().map(|f| f.0).collect();
    assert_eq!(nodes, [2, 3, 5]);
}

#[test]
fn missing_tool_is_unmet_and_unknown_registry_is_assumed() {
    let rig = Rig::new(None);
    let spec = rig.spec(CASES[CITATION].workflow);
    let r = verify_plan(&spec, &contract(), None).unwrap();
    assert_eq!(r.nodes[0].checks[0].provenance, Some(Provenance::Assumed));
    let tools = BuiltinTools::default();
    let ws = fixture("workspace");
    let none: [String; 0] = [];
    let env = WorkspaceEnv { workspace: &ws, tools: &tools, enabled: Some(&none) };
    let r = verify_plan(&spec, &contract(), Some(&env)).unwrap();
    assert_eq!(failures(&r), [(1, Phase::Pre, "fs_read".to_string())]);
}

#[test]
fn contract_naming_unknown_step_is_rejected() {
    let mut c = contract();
    c.steps.insert("no_such_step".into(), Default::default());
    let spec = Rig::new(None).spec(CASES[CITATION].workflow);
    assert!(verify_plan(&spec, &c, None).is_err());
}

#[test]
fn dynamic_trace_verifies_with_mode_tags() {
    let (records, ws) = citation_trace();
    let r = dynamic_report(&records, &contract(), ws.path());
    assert!(r.passed, "{}", render_report(&r));
    assert_eq!(r.nodes.len(), 6);
    let text = render_report(&r);
    assert!(text.trim_end().ends_with("ALL NODES VERIFIED"));
    assert!(text.contains("-> PASS [formal]") && text.contains("-> PASS [tool]"));
    let schema = r.nodes[4].checks.iter().find(|c| c.predicate.to_string().starts_with("matchesJsonSchema")).unwrap();
    assert_eq!(schema.mode, Mode::Formal);
    let title = &r.nodes[0].checks[2];
    assert_eq!((title.subject.as_str(), title.mode), ("paper_title", Mode::Formal));
}

fn blank(rec: &mut TraceRecord, phase: Phase) {
    let slot = match phase {
        Phase::Post => rec.writes.get_mut("paper_title"),
        Phase::Pre => rec.context.get_mut("paper_title"),
    };
    *slot.expect("paper_title present") = Value::String(String::new());
}

#[test]
fn blank_title_on_the_first_edge_fails_exactly_two_checks() {
    let (mut records, ws) = citation_trace();
    let at = |label: &str| records.iter().position(|r| r.label == label).unwrap();
    let (n1, n2) = (at("extract_paper_title"), at("extract_bibtex_by_tool"));
    blank(&mut records[n1], Phase::Post);
    blank(&mut records[n2], Phase::Pre);
    let r = dynamic_report(&records, &contract(), ws.path());
    assert!(!r.passed);
    assert_eq!(
        failures(&r),
        [(1, Phase::Post, "paper_title".to_string()), (2, Phase::Pre, "paper_title".to_string())]
    );
    let text = render_report(&r);
    assert!(text.contains("VERIFICATION FAILED (2 of"), "{text}");
}

#[test]
fn blank_title_everywhere_flags_every_reader() {
    let (mut records, ws) = citation_trace();
    for rec in &mut records {
        for map in [&mut rec.context, &mut rec.writes] {
            if let Some(v) = map.get_mut("paper_title") {
                *v = Value::String(String::new());
            }
        }
    }
    let r = dynamic_report(&records, &contract(), ws.path());
    let got: Vec<(usize, Phase)> = failures(&r).into_iter().map(|(n, p, _)| (n, p)).collect();
    assert_eq!(got, [(1, Phase::Post), (2, Phase::Pre), (3, Phase::Pre), (5, Phase::Pre)]);
}

proptest! {
    /// A plan that verifies statically, run to completion with every
    /// postcondition holding, also verifies dynamically.
    #[test]
    fn static_pass_and_true_posts_imply_dynamic_pass(drop in prop::collection::vec(any::<bool>(), 9)) {
        let mut c = contract();
        let mut k = 0;
        for sc in c.steps.values_mut() {
            sc.post.retain(|_| { k += 1; !drop.get(k - 1).copied().unwrap_or(false) });
        }
        let s = static_report(&c);
        let (records, ws) = citation_trace();
        let d = dynamic_report(&records, &c, ws.path());
        let posts_hold = d.nodes.iter().flat_map(|n| &n.checks).filter(|x| x.phase == Phase::Post).all(|x| x.pass);
        if s.passed && posts_hold {
            prop_assert!(d.passed, "{}", render_report(&d));
        }
    }
}
