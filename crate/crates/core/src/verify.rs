//! Static (plan) and dynamic (trajectory) verification against contracts.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::contract::{Check, Contract, ContractError};
use crate::graph::to_graph;
use crate::predicate::{eval_predicate, Mode, Predicate, PredicateEnv};
use crate::trace::{RecordStatus, TraceRecord};
use crate::workflow::WorkflowSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportMode {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Post,
}

/// Where a static precondition is established.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    /// Postcondition of an earlier reported node.
    Node { number: usize },
    Input,
    /// `toolExists` with no registry to consult.
    Assumed,
    Unmet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub phase: Phase,
    pub subject: String,
    pub predicate: Predicate,
    pub mode: Mode,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    /// 1-based position in the report.
    pub number: usize,
    pub label: String,
    /// Graph node id (static) or step id (dynamic).
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<RecordStatus>,
    pub checks: Vec<CheckResult>,
}

impl NodeReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub mode: ReportMode,
    pub workflow: String,
    /// Graph size (static mode only).
    #[serde(default)]
    pub graph_nodes: usize,
    #[serde(default)]
    pub graph_edges: usize,
    pub nodes: Vec<NodeReport>,
    /// Contracted steps with no trace record (dynamic mode).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
    pub passed: bool,
    pub summary: String,
}

impl VerificationReport {
    pub fn check_count(&self) -> usize {
        self.nodes.iter().map(|n| n.checks.len()).sum()
    }

    pub fn failed_checks(&self) -> usize {
        self.nodes.iter().map(|n| n.failures().count()).sum()
    }

    /// Graph nodes without a failing check.
    pub fn passed_nodes(&self) -> usize {
        self.graph_nodes - self.nodes.iter().filter(|n| !n.passed()).count()
    }

    fn finish(mut self) -> Self {
        self.passed = self.nodes.iter().all(NodeReport::passed);
        self.summary = match (self.mode, self.passed) {
            (ReportMode::Static, p) => format!(
                "Graph verification: {} ({}/{} nodes)",
                if p { "PASSED" } else { "FAILED" },
                self.passed_nodes(),
                self.graph_nodes
            ),
            (ReportMode::Dynamic, true) => "ALL NODES VERIFIED".to_string(),
            (ReportMode::Dynamic, false) => format!(
                "VERIFICATION FAILED ({} of {} checks failed)",
                self.failed_checks(),
                self.check_count()
            ),
        };
        self
    }
}

/// Walk graph nodes in workflow order. Each precondition must follow from a
/// postcondition of an earlier node or from an input assumption; declared
/// postconditions are trusted.
pub fn verify_plan(
    spec: &WorkflowSpec,
    contract: &Contract,
    tools: Option<&dyn PredicateEnv>,
) -> Result<VerificationReport, Vec<ContractError>> {
    contract.check_against(spec)?;
    let graph = to_graph(spec);
    let mut established: Vec<(usize, &Check)> = Vec::new();
    let mut nodes = Vec::new();
    for node in &graph.nodes {
        let Some(sc) = contract.steps.get(&node.label) else {
            continue;
        };
        let index = nodes.len();
        let mut checks = Vec::new();
        for pre in &sc.pre {
            let provenance = if pre.is_tool_check() {
                match tools {
                    None => Provenance::Assumed,
                    Some(env) if env.tool_available(&pre.subject) => Provenance::Input,
                    Some(_) => Provenance::Unmet,
                }
            } else if let Some((k, _)) = established
                .iter()
                .rev()
                .find(|(_, c)| c.subject == pre.subject && c.predicate.implies(&pre.predicate))
            {
                Provenance::Node { number: *k + 1 }
            } else if contract
                .inputs
                .iter()
                .any(|c| c.subject == pre.subject && c.predicate.implies(&pre.predicate))
            {
                Provenance::Input
            } else {
                Provenance::Unmet
            };
            let pass = provenance != Provenance::Unmet;
            checks.push(CheckResult {
                phase: Phase::Pre,
                subject: pre.subject.clone(),
                predicate: pre.predicate.clone(),
                mode: pre.predicate.mode(),
                pass,
                provenance: Some(provenance),
                reason: (!pass).then(|| {
                    if pre.is_tool_check() {
                        format!("tool `{}` is not available", pre.subject)
                    } else {
                        format!("no earlier postcondition or input establishes {pre}")
                    }
                }),
            });
        }
        for post in &sc.post {
            checks.push(CheckResult {
                phase: Phase::Post,
                subject: post.subject.clone(),
                predicate: post.predicate.clone(),
                mode: post.predicate.mode(),
                pass: true,
                provenance: None,
                reason: None,
            });
        }
        established.extend(sc.post.iter().map(|c| (index, c)));
        nodes.push(NodeReport { number: index + 1, label: node.label.clone(), id: node.id.clone(), status: None, checks });
    }
    Ok(VerificationReport {
        mode: ReportMode::Static,
        workflow: spec.name.clone(),
        graph_nodes: graph.nodes.len(),
        graph_edges: graph.edges.len(),
        nodes,
        skipped: Vec::new(),
        passed: true,
        summary: String::new(),
    }
    .finish())
}

/// Evaluate contracts on the values a run actually saw and produced.
/// Preconditions read the record's context; postconditions read what the
/// step wrote, falling back to the context for steps that only inspect.
pub fn verify_trace(
    workflow: &str,
    records: &[TraceRecord],
    contract: &Contract,
    env: &dyn PredicateEnv,
) -> VerificationReport {
    let mut ordered: Vec<&TraceRecord> =
        records.iter().filter(|r| contract.steps.contains_key(&r.label)).collect();
    ordered.sort_by(|a, b| a.step_id.cmp(&b.step_id));
    let mut nodes = Vec::new();
    for (i, rec) in ordered.iter().enumerate() {
        let sc = &contract.steps[&rec.label];
        let mut checks = Vec::new();
        for (phase, list) in [(Phase::Pre, &sc.pre), (Phase::Post, &sc.post)] {
            for c in list {
                let value = match phase {
                    Phase::Pre => rec.context.get(&c.subject),
                    Phase::Post => rec.value_after(&c.subject),
                };
                let verdict = if value.is_none() && !c.is_tool_check() {
                    Err("missing from trace".to_string())
                } else {
                    match eval_predicate(&c.predicate, &c.subject, value, Some(env)) {
                        Ok(v) if v.pass => Ok(()),
                        Ok(v) => Err(v.reason.unwrap_or_default()),
                        Err(e) => Err(e.to_string()),
                    }
                };
                checks.push(CheckResult {
                    phase,
                    subject: c.subject.clone(),
                    predicate: c.predicate.clone(),
                    mode: c.predicate.mode(),
                    pass: verdict.is_ok(),
                    provenance: None,
                    reason: verdict.err(),
                });
            }
        }
        nodes.push(NodeReport {
            number: i + 1,
            label: rec.label.clone(),
            id: rec.step_id.to_string(),
            status: Some(rec.status),
            checks,
        });
    }
    let skipped = contract
        .steps
        .keys()
        .filter(|k| !records.iter().any(|r| &r.label == *k))
        .cloned()
        .collect();
    VerificationReport {
        mode: ReportMode::Dynamic,
        workflow: workflow.to_string(),
        graph_nodes: 0,
        graph_edges: 0,
        nodes,
        skipped,
        passed: true,
        summary: String::new(),
    }
    .finish()
}
