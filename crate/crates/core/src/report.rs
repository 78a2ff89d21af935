//! Fixed-width text rendering of verification reports.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::verify::{CheckResult, NodeReport, Phase, Provenance, ReportMode, VerificationReport};

const PRE_HEAD: &str = "  Preconditions:   ";
const POST_HEAD: &str = "  Postconditions:  ";
const STATUS_GAP: usize = 20;

pub fn render_report(r: &VerificationReport) -> String {
    match r.mode {
        ReportMode::Static => render_static(r),
        ReportMode::Dynamic => render_dynamic(r),
    }
}

fn push_line(out: &mut String, line: &str) {
    out.push_str(line.trim_end());
    out.push('\n');
}

fn failures_section(out: &mut String, r: &VerificationReport, describe: impl Fn(&CheckResult) -> String) {
    if r.passed {
        return;
    }
    push_line(out, "Failures:");
    for n in r.nodes.iter().filter(|n| !n.passed()) {
        for c in n.failures() {
            let phase = match c.phase {
                Phase::Pre => "precondition",
                Phase::Post => "postcondition",
            };
            push_line(out, &format!("  Node {} ({}): {phase} {}", n.number, n.label, describe(c)));
        }
    }
    out.push('\n');
}

fn provenance_tag(p: Option<Provenance>) -> String {
    match p {
        Some(Provenance::Node { number }) => format!("[from Node {number}]"),
        Some(Provenance::Assumed) => "[assumed]".into(),
        Some(Provenance::Unmet) => "[unmet]".into(),
        Some(Provenance::Input) | None => String::new(),
    }
}

fn render_static(r: &VerificationReport) -> String {
    let mut out = format!(
        "STATIC SEMANTIC VERIFICATION: {} ({} nodes, {} edges)\n\n",
        r.workflow, r.graph_nodes, r.graph_edges
    );
    failures_section(&mut out, r, |c| {
        format!("{}: {} unmet{}", c.subject, c.predicate, c.reason.as_ref().map(|x| format!(" ({x})")).unwrap_or_default())
    });
    let blocks: Vec<Vec<(String, String)>> = r
        .nodes
        .iter()
        .map(|n| {
            let mut lines = Vec::new();
            for (phase, head) in [(Phase::Pre, PRE_HEAD), (Phase::Post, POST_HEAD)] {
                for (i, c) in n.checks.iter().filter(|c| c.phase == phase).enumerate() {
                    let lead = if i == 0 { String::from(head) } else { " ".repeat(head.len()) };
                    lines.push((format!("{lead}{}: {}", c.subject, c.predicate), provenance_tag(c.provenance)));
                }
            }
            lines
        })
        .collect();
    let text_w = blocks.iter().flatten().map(|(t, _)| t.chars().count()).max().unwrap_or(0);
    let prov_w = blocks.iter().flatten().map(|(_, p)| p.len()).max().unwrap_or(0);
    for (n, lines) in r.nodes.iter().zip(&blocks) {
        push_line(&mut out, &format!("Node {} ({})", n.number, n.label));
        let verdict = if n.passed() { "OK" } else { "FAIL" };
        if lines.is_empty() {
            push_line(&mut out, &format!("  (no conditions)  {verdict}"));
        }
        for (i, (text, prov)) in lines.iter().enumerate() {
            let mark = if i + 1 == lines.len() { verdict } else { "" };
            let pad = text_w - text.chars().count();
            push_line(&mut out, &format!("{text}{:pad$}   {prov:<prov_w$}   {mark}", ""));
        }
        out.push('\n');
    }
    push_line(&mut out, &r.summary);
    out
}

fn render_dynamic(r: &VerificationReport) -> String {
    let mut out = format!("DYNAMIC EXECUTION VERIFICATION: {}\n\n", r.workflow);
    failures_section(&mut out, r, |c| {
        format!("{} : {} -> {}", c.subject, c.predicate, c.reason.as_deref().unwrap_or("failed"))
    });
    let check_text = |c: &CheckResult| format!("    {} : {}", c.subject, c.predicate);
    let text_w = r.nodes.iter().flat_map(|n| &n.checks).map(|c| check_text(c).chars().count()).max().unwrap_or(0);
    for n in &r.nodes {
        push_line(&mut out, &header(n, text_w + STATUS_GAP));
        for (phase, head) in [(Phase::Pre, "  Preconditions:"), (Phase::Post, "  Postconditions:")] {
            let checks: Vec<&CheckResult> = n.checks.iter().filter(|c| c.phase == phase).collect();
            if checks.is_empty() {
                continue;
            }
            push_line(&mut out, head);
            for c in checks {
                let text = check_text(c);
                let pad = text_w - text.chars().count();
                let verdict = if c.pass { "PASS" } else { "FAIL" };
                let reason = match (&c.reason, c.pass) {
                    (Some(x), false) => format!(" ({x})"),
                    _ => String::new(),
                };
                push_line(&mut out, &format!("{text}{:pad$} -> {verdict} [{}]{reason}", "", c.mode));
            }
        }
        out.push('\n');
    }
    if !r.skipped.is_empty() {
        push_line(&mut out, "Not executed:");
        for s in &r.skipped {
            push_line(&mut out, &format!("  {s}"));
        }
        out.push('\n');
    }
    push_line(&mut out, &r.summary);
    out
}

fn header(n: &NodeReport, width: usize) -> String {
    let head = format!("Node {} ({})", n.number, n.label);
    let tag = match n.status {
        Some(s) => format!("[{}]", s.as_str()),
        None => return head,
    };
    let used = head.chars().count() + tag.len();
    let pad = width.saturating_sub(used).max(1);
    format!("{head}{:pad$}{tag}", "")
}
