//! The workflow document model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::template::Template;
use crate::value::{Map, Number, Value};

/// Iteration cap for `while` when the workflow does not set one.
pub const DEFAULT_MAX_ITERATIONS: u32 = 50;
/// Tool-call cap per model-facing step when the config does not set one.
pub const DEFAULT_MAX_TOOL_CALLS: u32 = 32;
/// Currency per 1k tokens.
pub const DEFAULT_TOKEN_PRICE: f64 = 0.000_42;
pub const DEFAULT_MODEL: &str = "default";
/// Contract/report label of a `return` operation.
pub const RETURN_LABEL: &str = "return_result";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pos {
    pub line: u32,
    pub column: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: Pos,
    pub end: Pos,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: Option<String>,
    /// `None` leaves every registered tool enabled.
    pub enabled_tools: Option<Vec<String>>,
    pub max_tool_calls_per_step: Option<u32>,
    pub max_tokens_per_step: Option<u64>,
    pub registered_skills: BTreeMap<String, String>,
    pub token_price: Option<f64>,
}

/// A registered skill and the file that declared it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillRef {
    pub module: String,
    pub origin: String,
}

/// Config after defaults and caller inheritance are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub model: String,
    pub enabled_tools: Option<Vec<String>>,
    pub max_tool_calls_per_step: u32,
    pub max_tokens_per_step: Option<u64>,
    pub registered_skills: BTreeMap<String, SkillRef>,
    pub token_price: f64,
}

impl Default for EffectiveConfig {
    fn default() -> Self {
        EffectiveConfig {
            model: DEFAULT_MODEL.to_string(),
            enabled_tools: None,
            max_tool_calls_per_step: DEFAULT_MAX_TOOL_CALLS,
            max_tokens_per_step: None,
            registered_skills: BTreeMap::new(),
            token_price: DEFAULT_TOKEN_PRICE,
        }
    }
}

impl EffectiveConfig {
    /// Layer a module's own config over this one. Fields the module sets win.
    pub fn inherit(&self, own: &Config, origin: &str) -> EffectiveConfig {
        let mut out = self.clone();
        if let Some(m) = &own.model {
            out.model = m.clone();
        }
        if let Some(t) = &own.enabled_tools {
            out.enabled_tools = Some(t.clone());
        }
        if let Some(n) = own.max_tool_calls_per_step {
            out.max_tool_calls_per_step = n;
        }
        if let Some(n) = own.max_tokens_per_step {
            out.max_tokens_per_step = Some(n);
        }
        if let Some(p) = own.token_price {
            out.token_price = p;
        }
        for (name, module) in &own.registered_skills {
            out.registered_skills.insert(
                name.clone(),
                SkillRef { module: module.clone(), origin: origin.to_string() },
            );
        }
        out
    }

    pub fn tool_enabled(&self, name: &str) -> bool {
        match &self.enabled_tools {
            None => true,
            Some(list) => list.iter().any(|t| t == name),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowSpec {
    pub name: String,
    pub goal: String,
    pub config: Config,
    /// Declared parameters, keyed alphabetically.
    pub parameters: Map<String, Value>,
    pub body: Vec<Operation>,
    /// Path of the file this spec was parsed from.
    pub origin: String,
}

impl WorkflowSpec {
    /// Number of operations in the (non-expanded) tree.
    pub fn op_count(&self) -> usize {
        count_ops(&self.body)
    }

    /// Equality ignoring source spans and origin.
    pub fn same_structure(&self, other: &WorkflowSpec) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.origin.clear();
        b.origin.clear();
        clear_spans(&mut a.body);
        clear_spans(&mut b.body);
        a == b
    }
}

fn clear_spans(ops: &mut [Operation]) {
    for op in ops {
        op.span = Span::default();
        for (_, body) in op.kind.bodies_mut() {
            clear_spans(body);
        }
    }
}

pub fn count_ops(ops: &[Operation]) -> usize {
    ops.iter()
        .map(|op| 1 + op.kind.bodies().iter().map(|(_, b)| count_ops(b)).sum::<usize>())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Operation {
    pub kind: OpKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invoke {
    pub name: Option<String>,
    pub instruction: Template,
    pub save_as: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IfOp {
    pub name: Option<String>,
    pub condition: Condition,
    pub then_ops: Vec<Operation>,
    pub else_ops: Vec<Operation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchOp {
    pub name: Option<String>,
    pub subject: Template,
    pub cases: Vec<(Value, Vec<Operation>)>,
    pub default: Option<Vec<Operation>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhileOp {
    pub name: Option<String>,
    pub condition: Condition,
    pub max_iterations: Option<u32>,
    pub body: Vec<Operation>,
}

impl WhileOp {
    pub fn limit(&self) -> u32 {
        self.max_iterations.unwrap_or(DEFAULT_MAX_ITERATIONS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForEachOp {
    pub name: Option<String>,
    /// A template string or a literal list.
    pub items: Value,
    pub item_name: String,
    pub body: Vec<Operation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallOp {
    pub name: Option<String>,
    pub module: String,
    pub parameters: Map<String, Value>,
    pub save_as: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelOp {
    pub name: Option<String>,
    pub branches: Vec<Vec<Operation>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Task(Invoke),
    Step(Invoke),
    If(IfOp),
    Switch(SwitchOp),
    While(WhileOp),
    ForEach(ForEachOp),
    Call(CallOp),
    Parallel(ParallelOp),
    Gather { save_as: String },
    SetVariable { name: String, value: Value },
    Increment { name: String, by: Number },
    Input { prompt: Template, save_as: String },
    /// String values that are a bare (dotted) identifier name a variable;
    /// other strings are templates; anything else is literal.
    Return { value: Value },
}

/// Construct keywords, as written in workflow files.
pub const KEYWORDS: &[&str] = &[
    "task",
    "step",
    "if",
    "switch",
    "while",
    "for_each",
    "call",
    "parallel",
    "gather",
    "set_variable",
    "increment",
    "input",
    "return",
];

impl OpKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            OpKind::Task(_) => "task",
            OpKind::Step(_) => "step",
            OpKind::If(_) => "if",
            OpKind::Switch(_) => "switch",
            OpKind::While(_) => "while",
            OpKind::ForEach(_) => "for_each",
            OpKind::Call(_) => "call",
            OpKind::Parallel(_) => "parallel",
            OpKind::Gather { .. } => "gather",
            OpKind::SetVariable { .. } => "set_variable",
            OpKind::Increment { .. } => "increment",
            OpKind::Input { .. } => "input",
            OpKind::Return { .. } => "return",
        }
    }

    pub fn is_model_facing(&self) -> bool {
        matches!(self, OpKind::Task(_) | OpKind::Step(_))
    }

    /// Explicit `name` field, where the construct has one.
    pub fn name(&self) -> Option<&str> {
        match self {
            OpKind::Task(i) | OpKind::Step(i) => i.name.as_deref(),
            OpKind::If(o) => o.name.as_deref(),
            OpKind::Switch(o) => o.name.as_deref(),
            OpKind::While(o) => o.name.as_deref(),
            OpKind::ForEach(o) => o.name.as_deref(),
            OpKind::Call(o) => o.name.as_deref(),
            OpKind::Parallel(o) => o.name.as_deref(),
            _ => None,
        }
    }

    /// Display label; also the key contracts use for this node.
    pub fn label(&self) -> String {
        if let Some(n) = self.name() {
            return n.to_string();
        }
        match self {
            OpKind::If(o) => format!("if {}", o.condition.raw()),
            OpKind::Switch(o) => format!("switch {}", o.subject.raw()),
            OpKind::While(o) => format!("while {}", o.condition.raw()),
            OpKind::ForEach(o) => format!("for_each {}", o.item_name),
            OpKind::Call(o) => format!("call {}", o.module),
            OpKind::Gather { save_as } => format!("gather {save_as}"),
            OpKind::SetVariable { name, .. } => format!("set_variable {name}"),
            OpKind::Increment { name, .. } => format!("increment {name}"),
            OpKind::Input { save_as, .. } => format!("input {save_as}"),
            OpKind::Return { .. } => RETURN_LABEL.to_string(),
            other => other.keyword().to_string(),
        }
    }

    /// Variable this operation writes in the module scope, if any.
    pub fn save_target(&self) -> Option<&str> {
        match self {
            OpKind::Task(i) | OpKind::Step(i) => i.save_as.as_deref(),
            OpKind::Call(c) => c.save_as.as_deref(),
            OpKind::Gather { save_as } | OpKind::Input { save_as, .. } => Some(save_as),
            OpKind::SetVariable { name, .. } | OpKind::Increment { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Nested bodies with their step-id ordinal. Loop bodies use ordinal 0:
    /// their ids carry the iteration number instead.
    pub fn bodies(&self) -> Vec<(u32, &[Operation])> {
        match self {
            OpKind::If(o) => alloc::vec![(1, o.then_ops.as_slice()), (2, o.else_ops.as_slice())],
            OpKind::Switch(o) => {
                let mut out: Vec<(u32, &[Operation])> = o
                    .cases
                    .iter()
                    .enumerate()
                    .map(|(i, (_, ops))| (i as u32 + 1, ops.as_slice()))
                    .collect();
                if let Some(d) = &o.default {
                    out.push((o.cases.len() as u32 + 1, d.as_slice()));
                }
                out
            }
            OpKind::While(o) => alloc::vec![(0, o.body.as_slice())],
            OpKind::ForEach(o) => alloc::vec![(0, o.body.as_slice())],
            OpKind::Parallel(o) => o
                .branches
                .iter()
                .enumerate()
                .map(|(i, b)| (i as u32 + 1, b.as_slice()))
                .collect(),
            _ => Vec::new(),
        }
    }

    fn bodies_mut(&mut self) -> Vec<(u32, &mut Vec<Operation>)> {
        match self {
            OpKind::If(o) => alloc::vec![(1, &mut o.then_ops), (2, &mut o.else_ops)],
            OpKind::Switch(o) => {
                let n = o.cases.len() as u32;
                let mut out: Vec<(u32, &mut Vec<Operation>)> = o
                    .cases
                    .iter_mut()
                    .enumerate()
                    .map(|(i, (_, ops))| (i as u32 + 1, ops))
                    .collect();
                if let Some(d) = &mut o.default {
                    out.push((n + 1, d));
                }
                out
            }
            OpKind::While(o) => alloc::vec![(0, &mut o.body)],
            OpKind::ForEach(o) => alloc::vec![(0, &mut o.body)],
            OpKind::Parallel(o) => o
                .branches
                .iter_mut()
                .enumerate()
                .map(|(i, b)| (i as u32 + 1, b))
                .collect(),
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn task(name: &str) -> Operation {
        Operation {
            kind: OpKind::Task(Invoke {
                name: Some(name.into()),
                instruction: Template::parse("do it").unwrap(),
                save_as: None,
            }),
            span: Span::default(),
        }
    }

    #[test]
    fn inherit_overrides_only_set_fields() {
        let base = EffectiveConfig {
            enabled_tools: Some(vec!["web_search".into()]),
            max_tool_calls_per_step: 4,
            ..EffectiveConfig::default()
        };
        let own = Config { model: Some("m2".into()), ..Config::default() };
        let eff = base.inherit(&own, "a.yaml");
        assert_eq!(eff.model, "m2");
        assert_eq!(eff.max_tool_calls_per_step, 4);
        assert!(eff.tool_enabled("web_search"));
        assert!(!eff.tool_enabled("file_write"));
        assert!(EffectiveConfig::default().tool_enabled("anything"));
    }

    #[test]
    fn counts_nested_ops_once() {
        let w = Operation {
            kind: OpKind::While(WhileOp {
                name: None,
                condition: Condition::parse("true").unwrap(),
                max_iterations: None,
                body: vec![task("a"), task("b")],
            }),
            span: Span::default(),
        };
        assert_eq!(count_ops(&[task("x"), w]), 4);
    }

    #[test]
    fn labels() {
        assert_eq!(task("t").kind.label(), "t");
        let r = OpKind::Return { value: Value::from(0) };
        assert_eq!(r.label(), RETURN_LABEL);
    }
}
