//! Flowchart projection of a workflow, in the editor exchange shape
//! `{nodes: [{id, kind, label, span}], edges: [{from, to, label?}]}`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::value::render_text;
use crate::workflow::{OpKind, Operation, Span, WorkflowSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: String,
    pub label: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

/// Prefix of edge targets that point at a submodule rather than a node.
pub const MODULE_TARGET_PREFIX: &str = "module:";

type Next = Option<(String, Option<String>)>;

/// One node per operation. Sequence edges are unlabeled; branch edges carry
/// the condition, case literal, `else` or `default`; loop bodies link back to
/// their loop with `loop`; calls link to `module:<path>` with `call`.
pub fn to_graph(spec: &WorkflowSpec) -> Graph {
    let mut g = Graph::default();
    build_body(&mut g, &spec.body, &[], None);
    g
}

fn node_id(path: &[u32]) -> String {
    path.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(".")
}

fn edge(g: &mut Graph, from: &str, to: &str, label: Option<String>) {
    g.edges.push(Edge { from: from.to_string(), to: to.to_string(), label });
}

fn link(g: &mut Graph, from: &str, next: &Next, label: Option<String>) {
    if let Some((to, next_label)) = next {
        edge(g, from, to, label.or_else(|| next_label.clone()));
    }
}

/// Adds the nodes of `ops` and returns the entry node id.
fn build_body(g: &mut Graph, ops: &[Operation], prefix: &[u32], exit: Next) -> Option<String> {
    let ids: Vec<String> = (1..=ops.len() as u32)
        .map(|i| {
            let mut p = prefix.to_vec();
            p.push(i);
            node_id(&p)
        })
        .collect();
    for (i, op) in ops.iter().enumerate() {
        let mut path = prefix.to_vec();
        path.push(i as u32 + 1);
        let next: Next = match ids.get(i + 1) {
            Some(id) => Some((id.clone(), None)),
            None => exit.clone(),
        };
        build_op(g, op, &path, &ids[i], next);
    }
    ids.into_iter().next()
}

fn build_op(g: &mut Graph, op: &Operation, path: &[u32], id: &str, next: Next) {
    g.nodes.push(Node {
        id: id.to_string(),
        kind: op.kind.keyword().to_string(),
        label: op.kind.label(),
        span: op.span,
    });
    let sub = |ordinal: u32| {
        let mut p = path.to_vec();
        p.push(ordinal);
        p
    };
    match &op.kind {
        OpKind::If(o) => {
            branch(g, id, &o.then_ops, &sub(1), &next, o.condition.raw().to_string());
            branch(g, id, &o.else_ops, &sub(2), &next, "else".to_string());
        }
        OpKind::Switch(o) => {
            for (i, (case, ops)) in o.cases.iter().enumerate() {
                branch(g, id, ops, &sub(i as u32 + 1), &next, render_text(case));
            }
            if let Some(d) = &o.default {
                branch(g, id, d, &sub(o.cases.len() as u32 + 1), &next, "default".to_string());
            }
        }
        OpKind::While(o) => {
            loop_body(g, id, &o.body, path);
            link(g, id, &next, None);
        }
        OpKind::ForEach(o) => {
            loop_body(g, id, &o.body, path);
            link(g, id, &next, None);
        }
        OpKind::Parallel(o) => {
            for (b, ops) in o.branches.iter().enumerate() {
                branch(g, id, ops, &sub(b as u32 + 1), &next, format!("branch {}", b + 1));
            }
        }
        OpKind::Call(c) => {
            link(g, id, &next, None);
            edge(g, id, &format!("{MODULE_TARGET_PREFIX}{}", c.module), Some("call".to_string()));
        }
        OpKind::Return { .. } => {}
        _ => link(g, id, &next, None),
    }
}

fn branch(g: &mut Graph, from: &str, ops: &[Operation], prefix: &[u32], next: &Next, label: String) {
    match build_body(g, ops, prefix, next.clone()) {
        Some(entry) => edge(g, from, &entry, Some(label)),
        None => link(g, from, next, Some(label)),
    }
}

fn loop_body(g: &mut Graph, id: &str, ops: &[Operation], path: &[u32]) {
    let back = Some((id.to_string(), Some("loop".to_string())));
    if let Some(entry) = build_body(g, ops, path, back) {
        edge(g, id, &entry, Some("body".to_string()));
    }
}

impl Graph {
    pub fn to_dot(&self, name: &str) -> String {
        let mut out = format!("digraph \"{}\" {{\n", escape(name));
        for n in &self.nodes {
            let shape = match n.kind.as_str() {
                "if" | "switch" => "diamond",
                "while" | "for_each" => "hexagon",
                "call" => "component",
                _ => "box",
            };
            out.push_str(&format!(
                "  \"{}\" [label=\"{}: {}\", shape={}];\n",
                n.id,
                escape(&n.kind),
                escape(&n.label),
                shape
            ));
        }
        for e in &self.edges {
            match &e.label {
                Some(l) => out.push_str(&format!(
                    "  \"{}\" -> \"{}\" [label=\"{}\"];\n",
                    escape(&e.from),
                    escape(&e.to),
                    escape(l)
                )),
                None => out.push_str(&format!("  \"{}\" -> \"{}\";\n", escape(&e.from), escape(&e.to))),
            }
        }
        out.push_str("}\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::Condition;
    use crate::template::Template;
    use crate::value::Map;
    use crate::workflow::{Config, IfOp, Invoke, WhileOp};
    use alloc::vec;

    fn task(n: &str) -> Operation {
        Operation {
            kind: OpKind::Task(Invoke {
                name: Some(n.into()),
                instruction: Template::parse("x").unwrap(),
                save_as: None,
            }),
            span: Span::default(),
        }
    }

    fn spec(body: Vec<Operation>) -> WorkflowSpec {
        WorkflowSpec {
            name: "t".into(),
            goal: String::new(),
            config: Config::default(),
            parameters: Map::new(),
            body,
            origin: String::new(),
        }
    }

    #[test]
    fn empty_else_routes_to_join() {
        let iff = Operation {
            kind: OpKind::If(IfOp {
                name: None,
                condition: Condition::parse("x == 1").unwrap(),
                then_ops: vec![task("a")],
                else_ops: vec![],
            }),
            span: Span::default(),
        };
        let g = to_graph(&spec(vec![iff, task("after")]));
        assert_eq!(g.nodes.len(), 3);
        let out: Vec<_> = g.edges.iter().filter(|e| e.from == "1").collect();
        assert_eq!(out.len(), 2);
        let else_edge = out.iter().find(|e| e.label.as_deref() == Some("else")).unwrap();
        assert_eq!(else_edge.to, "2");
        assert!(g.edges.iter().any(|e| e.from == "1.1.1" && e.to == "2" && e.label.is_none()));
    }

    #[test]
    fn loop_is_one_node_with_back_edge() {
        let w = Operation {
            kind: OpKind::While(WhileOp {
                name: None,
                condition: Condition::parse("true").unwrap(),
                max_iterations: Some(3),
                body: vec![task("a"), task("b")],
            }),
            span: Span::default(),
        };
        let s = spec(vec![w, task("z")]);
        let g = to_graph(&s);
        assert_eq!(g.nodes.len(), s.op_count());
        assert!(g.edges.contains(&Edge { from: "1".into(), to: "1.1".into(), label: Some("body".into()) }));
        assert!(g.edges.contains(&Edge { from: "1.2".into(), to: "1".into(), label: Some("loop".into()) }));
        assert!(g.edges.contains(&Edge { from: "1".into(), to: "2".into(), label: None }));
    }

    #[test]
    fn exchange_shape() {
        let g = to_graph(&spec(vec![task("a"), task("b")]));
        let v = serde_json::to_value(&g).unwrap();
        assert_eq!(v["edges"][0], serde_json::json!({"from": "1", "to": "2"}));
        assert_eq!(v["nodes"][0]["kind"], "task");
        assert_eq!(v["nodes"][0]["span"]["start"]["line"], 0);
        assert!(g.to_dot("t").contains("\"1\" -> \"2\";"));
    }
}
