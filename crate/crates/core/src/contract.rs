//! Per-step pre/postcondition sidecars.
//!
//! ```yaml
//! inputs:
//!   - file_path: isValidFilePath
//! steps:
//!   extract_paper_title:
//!     pre:
//!       - fs_read: toolExists
//!     post:
//!       - paper_title: isNonEmptyString
//! ```

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::analysis::LOOP_INDEX;
use crate::graph::to_graph;
use crate::predicate::{Predicate, PredicateName};
use crate::value::{Map, Value};
use crate::workflow::{OpKind, Operation, WorkflowSpec};

/// `subject: predicate`. The subject is a variable, or a tool name for
/// `toolExists`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub subject: String,
    pub predicate: Predicate,
}

impl Check {
    pub fn new(subject: impl Into<String>, predicate: Predicate) -> Self {
        Check { subject: subject.into(), predicate }
    }

    pub fn is_tool_check(&self) -> bool {
        self.predicate.name == PredicateName::ToolExists
    }
}

impl core::fmt::Display for Check {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}: {}", self.subject, self.predicate)
    }
}

impl Serialize for Check {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = Map::new();
        m.insert(self.subject.clone(), Value::String(self.predicate.to_string()));
        m.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Check {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let (subject, pred) = match Value::deserialize(d)? {
            Value::Object(m) if m.len() == 1 => {
                let (k, v) = m.into_iter().next().expect("one entry");
                match v {
                    Value::String(p) => (k, p),
                    other => return Err(D::Error::custom(format!("predicate for `{k}` must be text, got {other}"))),
                }
            }
            Value::String(s) => match s.split_once(':') {
                Some((k, p)) => (k.trim().to_string(), p.trim().to_string()),
                None => return Err(D::Error::custom(format!("expected `variable: predicate`, got `{s}`"))),
            },
            other => return Err(D::Error::custom(format!("expected `variable: predicate`, got {other}"))),
        };
        let predicate = pred.parse().map_err(D::Error::custom)?;
        Ok(Check { subject, predicate })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepContract {
    #[serde(default)]
    pub pre: Vec<Check>,
    #[serde(default)]
    pub post: Vec<Check>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contract {
    /// Assumptions about module parameters.
    #[serde(default)]
    pub inputs: Vec<Check>,
    /// Keyed by node label: the step name, an `if`'s name, `return_result`.
    #[serde(default)]
    pub steps: BTreeMap<String, StepContract>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error("contract names unknown step `{0}`")]
    UnknownStep(String),
    #[error("contract for `{step}` references unknown variable `{var}`")]
    UnknownVariable { step: String, var: String },
}

impl Contract {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty() && self.steps.is_empty()
    }

    /// Every key must label a node and every variable must be a parameter or
    /// assigned somewhere in the workflow.
    pub fn check_against(&self, spec: &WorkflowSpec) -> Result<(), Vec<ContractError>> {
        let labels: BTreeSet<String> = to_graph(spec).nodes.into_iter().map(|n| n.label).collect();
        let mut vars: BTreeSet<String> = spec.parameters.keys().cloned().collect();
        collect_assigned(&spec.body, &mut vars);
        let mut errors = Vec::new();
        let mut check_vars = |step: &str, checks: &[Check]| {
            for c in checks.iter().filter(|c| !c.is_tool_check()) {
                if !vars.contains(&c.subject) {
                    errors.push(ContractError::UnknownVariable { step: step.to_string(), var: c.subject.clone() });
                }
            }
        };
        check_vars("inputs", &self.inputs);
        for (step, sc) in &self.steps {
            check_vars(step, &sc.pre);
            check_vars(step, &sc.post);
        }
        for step in self.steps.keys() {
            if !labels.contains(step) {
                errors.push(ContractError::UnknownStep(step.clone()));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

fn collect_assigned(ops: &[Operation], out: &mut BTreeSet<String>) {
    for op in ops {
        if let Some(t) = op.kind.save_target() {
            out.insert(t.to_string());
        }
        if let OpKind::ForEach(f) = &op.kind {
            out.insert(f.item_name.clone());
            out.insert(LOOP_INDEX.to_string());
        }
        for (_, body) in op.kind.bodies() {
            collect_assigned(body, out);
        }
    }
}
