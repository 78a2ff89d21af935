//! Static checks that need nothing but the parsed workflow.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::template::value_references;
use crate::value::{parse_dotted_path, Value};
use crate::workflow::{OpKind, Operation, Span, WorkflowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Span>,
}

impl Diagnostic {
    pub fn error(code: &str, message: String, span: Option<Span>) -> Self {
        Diagnostic { severity: Severity::Error, code: code.to_string(), message, span }
    }

    pub fn warning(code: &str, message: String, span: Option<Span>) -> Self {
        Diagnostic { severity: Severity::Warning, code: code.to_string(), message, span }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

/// Loop variable bound alongside `item_name` in `for_each` bodies.
pub const LOOP_INDEX: &str = "loop_index";

/// Root variable names an operation reads (not including nested bodies).
pub fn op_reads(kind: &OpKind) -> Vec<String> {
    let mut paths: Vec<Vec<String>> = Vec::new();
    match kind {
        OpKind::Task(i) | OpKind::Step(i) => paths.extend(i.instruction.references().map(<[String]>::to_vec)),
        OpKind::If(o) => paths.extend(o.condition.references().into_iter().map(<[String]>::to_vec)),
        OpKind::While(o) => paths.extend(o.condition.references().into_iter().map(<[String]>::to_vec)),
        OpKind::Switch(o) => paths.extend(o.subject.references().map(<[String]>::to_vec)),
        OpKind::ForEach(o) => paths.extend(value_references(&o.items)),
        OpKind::Call(c) => paths.extend(value_references(&Value::Object(c.parameters.clone()))),
        OpKind::SetVariable { value, .. } => paths.extend(value_references(value)),
        OpKind::Input { prompt, .. } => paths.extend(prompt.references().map(<[String]>::to_vec)),
        OpKind::Return { value } => match return_ref(value) {
            Some(p) => paths.push(p),
            None => paths.extend(value_references(value)),
        },
        OpKind::Increment { name, .. } => paths.push(alloc::vec![name.clone()]),
        OpKind::Parallel(_) | OpKind::Gather { .. } => {}
    }
    let mut out: Vec<String> = Vec::new();
    for p in paths {
        if let Some(root) = p.into_iter().next() {
            if !out.contains(&root) {
                out.push(root);
            }
        }
    }
    out
}

/// A `return` string that is a bare dotted identifier names a variable.
pub fn return_ref(value: &Value) -> Option<Vec<String>> {
    match value {
        Value::String(s) => parse_dotted_path(s.trim()),
        _ => None,
    }
}

/// Diagnostics that depend only on this document.
pub fn check_workflow(spec: &WorkflowSpec) -> Vec<Diagnostic> {
    let mut cx = Checker {
        params: spec.parameters.keys().cloned().collect(),
        defined: spec.parameters.keys().cloned().collect(),
        reported: BTreeSet::new(),
        out: Vec::new(),
    };
    cx.body(&spec.body, false);
    cx.out
}

struct Checker {
    params: BTreeSet<String>,
    defined: BTreeSet<String>,
    reported: BTreeSet<String>,
    out: Vec<Diagnostic>,
}

impl Checker {
    fn body(&mut self, ops: &[Operation], in_parallel: bool) {
        for op in ops {
            self.op(op, in_parallel);
        }
    }

    fn op(&mut self, op: &Operation, in_parallel: bool) {
        for name in op_reads(&op.kind) {
            // increment initializes unset counters.
            if matches!(op.kind, OpKind::Increment { .. }) {
                break;
            }
            if !self.defined.contains(&name) && self.reported.insert(name.clone()) {
                self.out.push(Diagnostic::warning(
                    "unbound-reference",
                    format!("`{name}` is referenced but never defined upstream"),
                    Some(op.span),
                ));
            }
        }
        match &op.kind {
            OpKind::ForEach(o) => {
                let scoped: Vec<String> = [o.item_name.clone(), LOOP_INDEX.to_string()]
                    .into_iter()
                    .filter(|n| !self.defined.contains(n))
                    .collect();
                self.defined.extend(scoped.iter().cloned());
                self.body(&o.body, in_parallel);
                for n in scoped {
                    self.defined.remove(&n);
                }
            }
            OpKind::Parallel(p) => {
                for b in &p.branches {
                    self.body(b, true);
                }
            }
            OpKind::Return { .. } if in_parallel => self.out.push(Diagnostic::warning(
                "return-in-parallel",
                "`return` inside a parallel branch ends only that branch, not the module".to_string(),
                Some(op.span),
            )),
            other => {
                for (_, b) in other.bodies() {
                    self.body(b, in_parallel);
                }
            }
        }
        if let Some(target) = op.kind.save_target() {
            if self.params.contains(target) && !matches!(op.kind, OpKind::Increment { .. }) {
                self.out.push(Diagnostic::warning(
                    "shadows-parameter",
                    format!("`{target}` overwrites the parameter of the same name"),
                    Some(op.span),
                ));
            }
            self.defined.insert(target.to_string());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::Template;
    use crate::value::Map;
    use crate::workflow::{Config, Invoke, ParallelOp};
    use alloc::vec;

    fn task(instr: &str, save: Option<&str>) -> Operation {
        Operation {
            kind: OpKind::Task(Invoke {
                name: None,
                instruction: Template::parse(instr).unwrap(),
                save_as: save.map(Into::into),
            }),
            span: Span::default(),
        }
    }

    fn spec(params: Value, body: Vec<Operation>) -> WorkflowSpec {
        WorkflowSpec {
            name: "t".into(),
            goal: String::new(),
            config: Config::default(),
            parameters: params.as_object().cloned().unwrap_or_else(Map::new),
            body,
            origin: String::new(),
        }
    }

    #[test]
    fn unbound_reference_warned_once() {
        let s = spec(
            serde_json::json!({"topic": "x"}),
            vec![
                task("about {{topic}}", Some("a")),
                task("use {{a}} and {{missing_var}}", None),
                task("again {{missing_var}}", None),
            ],
        );
        let d = check_workflow(&s);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].severity, Severity::Warning);
        assert!(d[0].message.contains("missing_var"));
    }

    #[test]
    fn shadowing_and_parallel_return() {
        let ret = Operation { kind: OpKind::Return { value: Value::from(1) }, span: Span::default() };
        let par = Operation {
            kind: OpKind::Parallel(ParallelOp { name: None, branches: vec![vec![ret]] }),
            span: Span::default(),
        };
        let s = spec(serde_json::json!({"topic": "x"}), vec![task("t", Some("topic")), par]);
        let codes: Vec<_> = check_workflow(&s).into_iter().map(|d| d.code).collect();
        assert_eq!(codes, vec!["shadows-parameter", "return-in-parallel"]);
    }

    #[test]
    fn return_reference_forms() {
        assert_eq!(return_ref(&Value::from("return_dict")), Some(vec!["return_dict".to_string()]));
        assert_eq!(return_ref(&Value::from("done!")), None);
        assert_eq!(op_reads(&OpKind::Return { value: Value::from("{{a}} and {{b}}") }), vec!["a", "b"]);
    }
}
