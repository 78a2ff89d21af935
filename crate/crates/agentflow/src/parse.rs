//! Strict reader for workflow files.
//!
//! The YAML event stream is folded into a small tree that keeps the source
//! position of every node, then decoded by hand so that unknown keys, missing
//! fields and wrong types are reported with a line and column.

use std::collections::BTreeMap;
use std::fmt;

use agentflow_core::condition::Condition;
use agentflow_core::template::{check_value_templates, Template};
use agentflow_core::value::{is_identifier, Map, Number, Value};
use agentflow_core::workflow::{
    CallOp, Config, ForEachOp, IfOp, Invoke, OpKind, Operation, ParallelOp, Pos, Span, SwitchOp, WhileOp,
    WorkflowSpec, KEYWORDS,
};
use thiserror::Error;
use yaml_rust2::parser::{Event, MarkedEventReceiver, Parser};
use yaml_rust2::scanner::{Marker, TScalarStyle};
use yaml_rust2::Yaml;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("{origin}:{}: syntax error: {message}", Loc(*pos))]
    Syntax { origin: String, pos: Pos, message: String },
    #[error("{origin}{}: {message}", pos.map(|p| format!(":{}", Loc(p))).unwrap_or_default())]
    Schema { origin: String, pos: Option<Pos>, message: String },
}

impl ParseError {
    pub fn pos(&self) -> Option<Pos> {
        match self {
            ParseError::Syntax { pos, .. } => Some(*pos),
            ParseError::Schema { pos, .. } => *pos,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            ParseError::Syntax { message, .. } | ParseError::Schema { message, .. } => message,
        }
    }
}

struct Loc(Pos);

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.0.line, self.0.column)
    }
}

#[derive(Debug, Clone)]
enum Node {
    Scalar { text: String, style: TScalarStyle, pos: Pos },
    Seq { items: Vec<Node>, pos: Pos },
    Map { entries: Vec<(Node, Node)>, pos: Pos, end: Pos },
}

impl Node {
    fn pos(&self) -> Pos {
        match self {
            Node::Scalar { pos, .. } | Node::Seq { pos, .. } | Node::Map { pos, .. } => *pos,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Node::Scalar { .. } => "a scalar",
            Node::Seq { .. } => "a list",
            Node::Map { .. } => "a mapping",
        }
    }
}

fn pos_of(m: Marker) -> Pos {
    Pos { line: m.line() as u32, column: m.col() as u32 + 1 }
}

#[derive(Default)]
struct TreeBuilder {
    /// Open containers, each with the key awaiting its value (mappings only).
    stack: Vec<(Node, Option<Node>)>,
    docs: Vec<Node>,
    error: Option<(Pos, String)>,
}

impl TreeBuilder {
    fn push_value(&mut self, node: Node) {
        match self.stack.last_mut() {
            Some((Node::Seq { items, .. }, _)) => items.push(node),
            Some((Node::Map { entries, .. }, key)) => match key.take() {
                Some(k) => entries.push((k, node)),
                None => *key = Some(node),
            },
            Some((Node::Scalar { .. }, _)) => unreachable!("scalars are never on the stack"),
            None => self.docs.push(node),
        }
    }
}

impl MarkedEventReceiver for TreeBuilder {
    fn on_event(&mut self, ev: Event, mark: Marker) {
        if self.error.is_some() {
            return;
        }
        let pos = pos_of(mark);
        match ev {
            Event::Scalar(text, style, _, _) => self.push_value(Node::Scalar { text, style, pos }),
            Event::SequenceStart(..) => self.stack.push((Node::Seq { items: Vec::new(), pos }, None)),
            Event::MappingStart(..) => self.stack.push((Node::Map { entries: Vec::new(), pos, end: pos }, None)),
            Event::SequenceEnd | Event::MappingEnd => {
                let (mut node, _) = self.stack.pop().expect("balanced events");
                if let Node::Map { entries, pos: start, end } = &mut node {
                    // Block mappings report their start after the first key.
                    if let Some((k, _)) = entries.first() {
                        *start = k.pos();
                    }
                    *end = pos;
                }
                self.push_value(node);
            }
            Event::Alias(_) => self.error = Some((pos, "anchors and aliases are not supported".into())),
            _ => {}
        }
    }
}

fn build_tree(source: &str, origin: &str) -> Result<Option<Node>, ParseError> {
    let mut builder = TreeBuilder::default();
    let mut parser = Parser::new_from_str(source);
    parser.load(&mut builder, true).map_err(|e| ParseError::Syntax {
        origin: origin.to_string(),
        pos: pos_of(*e.marker()),
        message: e.info().to_string(),
    })?;
    if let Some((pos, message)) = builder.error {
        return Err(ParseError::Syntax { origin: origin.to_string(), pos, message });
    }
    if builder.docs.len() > 1 {
        return Err(ParseError::Syntax {
            origin: origin.to_string(),
            pos: builder.docs[1].pos(),
            message: "expected a single document".into(),
        });
    }
    Ok(builder.docs.pop())
}

/// Plain scalars are typed the YAML way; quoted and block scalars are text.
fn scalar_value(text: &str, style: TScalarStyle) -> Value {
    if style != TScalarStyle::Plain {
        return Value::String(text.to_string());
    }
    match Yaml::from_str(text) {
        Yaml::Null => Value::Null,
        Yaml::Boolean(b) => Value::Bool(b),
        Yaml::Integer(i) => Value::from(i),
        Yaml::Real(r) => r
            .parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number)
            .unwrap_or_else(|| Value::String(text.to_string())),
        _ => Value::String(text.to_string()),
    }
}

fn scalar_key(n: &Node) -> Option<String> {
    match n {
        Node::Scalar { text, .. } => Some(text.clone()),
        _ => None,
    }
}

struct Decoder<'a> {
    origin: &'a str,
}

type R<T> = Result<T, ParseError>;

impl Decoder<'_> {
    fn err<T>(&self, pos: Pos, message: impl Into<String>) -> R<T> {
        Err(ParseError::Schema { origin: self.origin.to_string(), pos: Some(pos), message: message.into() })
    }

    fn value(&self, n: &Node) -> R<Value> {
        Ok(match n {
            Node::Scalar { text, style, .. } => scalar_value(text, *style),
            Node::Seq { items, .. } => Value::Array(items.iter().map(|i| self.value(i)).collect::<R<_>>()?),
            Node::Map { .. } => Value::Object(self.map_value(n)?),
        })
    }

    fn map_value(&self, n: &Node) -> R<Map<String, Value>> {
        let mut out = Map::new();
        for (k, v) in self.entries(n, "mapping")? {
            out.insert(k.to_string(), self.value(v)?);
        }
        Ok(out)
    }

    /// Entries of a mapping node, rejecting non-scalar and duplicate keys.
    fn entries<'n>(&self, n: &'n Node, what: &str) -> R<Vec<(&'n str, &'n Node)>> {
        let Node::Map { entries, .. } = n else {
            return self.err(n.pos(), format!("{what} must be a mapping, found {}", n.kind()));
        };
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for (k, v) in entries {
            let Node::Scalar { text, .. } = k else {
                return self.err(k.pos(), "mapping keys must be scalars");
            };
            if !seen.insert(text.as_str()) {
                return self.err(k.pos(), format!("duplicate key `{text}`"));
            }
            out.push((text.as_str(), v));
        }
        Ok(out)
    }

    fn text(&self, n: &Node, field: &str) -> R<String> {
        match n {
            Node::Scalar { text, style, .. } => match scalar_value(text, *style) {
                Value::String(s) => Ok(s),
                Value::Null => self.err(n.pos(), format!("`{field}` must be text, found null")),
                _ => Ok(text.clone()),
            },
            other => self.err(other.pos(), format!("`{field}` must be text, found {}", other.kind())),
        }
    }

    fn ident(&self, n: &Node, field: &str) -> R<String> {
        let s = self.text(n, field)?;
        if !is_identifier(&s) {
            return self.err(n.pos(), format!("`{field}` must be an identifier, found `{s}`"));
        }
        Ok(s)
    }

    fn positive(&self, n: &Node, field: &str) -> R<u64> {
        match self.value(n)? {
            Value::Number(x) if x.as_u64().is_some_and(|v| v >= 1) => Ok(x.as_u64().unwrap()),
            other => self.err(n.pos(), format!("`{field}` must be a positive integer, found {other}")),
        }
    }

    fn template(&self, n: &Node, field: &str) -> R<Template> {
        let raw = self.text(n, field)?;
        Template::parse(&raw).or_else(|e| self.err(n.pos(), format!("`{field}`: {e}")))
    }

    fn condition(&self, n: &Node) -> R<Condition> {
        let raw = match self.value(n)? {
            Value::String(s) => s,
            Value::Bool(b) => b.to_string(),
            Value::Number(x) => x.to_string(),
            Value::Null => "null".to_string(),
            _ => return self.err(n.pos(), "`condition` must be text"),
        };
        Condition::parse(&raw).or_else(|e| self.err(n.pos(), e.to_string()))
    }

    /// Decode a fixed set of fields; `required` ones must be present.
    fn fields<'n>(
        &self,
        n: &'n Node,
        construct: &str,
        allowed: &[&str],
        required: &[&str],
    ) -> R<BTreeMap<&'n str, &'n Node>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.entries(n, construct)? {
            if !allowed.contains(&k) {
                let known = allowed.join(", ");
                return self.err(
                    self.key_pos(n, k),
                    format!("unknown key `{k}` in {construct} (expected one of: {known})"),
                );
            }
            out.insert(k, v);
        }
        for r in required {
            if !out.contains_key(r) {
                return self.err(n.pos(), format!("missing field: {r} (in {construct})"));
            }
        }
        Ok(out)
    }

    fn key_pos(&self, n: &Node, key: &str) -> Pos {
        if let Node::Map { entries, .. } = n {
            for (k, _) in entries {
                if scalar_key(k).as_deref() == Some(key) {
                    return k.pos();
                }
            }
        }
        n.pos()
    }

    fn workflow(&self, root: &Node) -> R<WorkflowSpec> {
        let f = self.fields(root, "workflow file", &["name", "goal", "config", "parameters", "workflow"], &[])?;
        for field in ["name", "workflow"] {
            if !f.contains_key(field) {
                return Err(ParseError::Schema {
                    origin: self.origin.to_string(),
                    pos: Some(root.pos()),
                    message: format!("missing field: {field}"),
                });
            }
        }
        let name = self.text(f["name"], "name")?;
        if name.trim().is_empty() {
            return self.err(f["name"].pos(), "`name` must not be empty");
        }
        let goal = match f.get("goal") {
            Some(n) => self.text(n, "goal")?,
            None => String::new(),
        };
        let config = match f.get("config") {
            Some(n) => self.config(n)?,
            None => Config::default(),
        };
        let parameters = match f.get("parameters") {
            Some(n) => {
                let params = self.map_value(n)?;
                if let Some(bad) = params.keys().find(|k| !is_identifier(k)) {
                    return self.err(self.key_pos(n, bad), format!("parameter name `{bad}` is not an identifier"));
                }
                params
            }
            None => Map::new(),
        };
        let body = self.body(f["workflow"], "workflow")?;
        Ok(WorkflowSpec { name, goal, config, parameters, body, origin: self.origin.to_string() })
    }

    fn config(&self, n: &Node) -> R<Config> {
        let f = self.fields(
            n,
            "config",
            &["model", "enabled_tools", "max_tool_calls_per_step", "max_tokens_per_step", "registered_skills", "token_price"],
            &[],
        )?;
        let mut c = Config::default();
        if let Some(m) = f.get("model") {
            c.model = Some(self.text(m, "model")?);
        }
        if let Some(t) = f.get("enabled_tools") {
            let Node::Seq { items, .. } = t else {
                return self.err(t.pos(), "`enabled_tools` must be a list");
            };
            let mut tools: Vec<String> = Vec::new();
            for item in items {
                let name = self.text(item, "enabled_tools")?;
                if tools.contains(&name) {
                    return self.err(item.pos(), format!("duplicate tool `{name}` in enabled_tools"));
                }
                tools.push(name);
            }
            c.enabled_tools = Some(tools);
        }
        if let Some(x) = f.get("max_tool_calls_per_step") {
            c.max_tool_calls_per_step = Some(self.positive(x, "max_tool_calls_per_step")? as u32);
        }
        if let Some(x) = f.get("max_tokens_per_step") {
            c.max_tokens_per_step = Some(self.positive(x, "max_tokens_per_step")?);
        }
        if let Some(s) = f.get("registered_skills") {
            for (k, v) in self.entries(s, "registered_skills")? {
                let path = self.text(v, k)?;
                self.check_module_path(&path, v.pos())?;
                c.registered_skills.insert(k.to_string(), path);
            }
        }
        if let Some(p) = f.get("token_price") {
            match self.value(p)? {
                Value::Number(x) if x.as_f64().is_some_and(|v| v >= 0.0) => c.token_price = x.as_f64(),
                other => return self.err(p.pos(), format!("`token_price` must be a nonnegative number, found {other}")),
            }
        }
        Ok(c)
    }

    fn check_module_path(&self, path: &str, pos: Pos) -> R<()> {
        if path.trim().is_empty() || path.starts_with('/') || path.contains('\\') || path.contains(':') {
            return self.err(pos, format!("module path `{path}` must be relative"));
        }
        Ok(())
    }

    fn body(&self, n: &Node, field: &str) -> R<Vec<Operation>> {
        let Node::Seq { items, .. } = n else {
            return self.err(n.pos(), format!("`{field}` must be a list of operations, found {}", n.kind()));
        };
        if items.is_empty() {
            return self.err(n.pos(), format!("`{field}` must not be empty"));
        }
        items.iter().map(|i| self.operation(i)).collect()
    }

    fn operation(&self, n: &Node) -> R<Operation> {
        let entries = self.entries(n, "operation")?;
        let [(keyword, v)] = entries.as_slice() else {
            return self.err(n.pos(), format!("an operation must have exactly one construct key, found {}", entries.len()));
        };
        let end = match n {
            Node::Map { end, .. } => *end,
            _ => n.pos(),
        };
        let span = Span { start: n.pos(), end };
        let kind = match *keyword {
            "task" | "step" => {
                let f = self.fields(v, keyword, &["name", "instruction", "save_as"], &["instruction"])?;
                let inv = Invoke {
                    name: f.get("name").map(|x| self.text(x, "name")).transpose()?,
                    instruction: self.template(f["instruction"], "instruction")?,
                    save_as: f.get("save_as").map(|x| self.ident(x, "save_as")).transpose()?,
                };
                if inv.instruction.raw().trim().is_empty() {
                    return self.err(f["instruction"].pos(), "`instruction` must not be empty");
                }
                if *keyword == "task" {
                    OpKind::Task(inv)
                } else {
                    OpKind::Step(inv)
                }
            }
            "if" => {
                let f = self.fields(v, "if", &["name", "condition", "then", "else"], &["condition", "then"])?;
                OpKind::If(IfOp {
                    name: f.get("name").map(|x| self.text(x, "name")).transpose()?,
                    condition: self.condition(f["condition"])?,
                    then_ops: self.body(f["then"], "then")?,
                    else_ops: match f.get("else") {
                        Some(e) => self.body(e, "else")?,
                        None => Vec::new(),
                    },
                })
            }
            "switch" => {
                let f = self.fields(v, "switch", &["name", "subject", "cases", "default"], &["subject", "cases"])?;
                let mut cases = Vec::new();
                let Node::Map { entries, .. } = f["cases"] else {
                    return self.err(f["cases"].pos(), "`cases` must be a mapping of literal to operations");
                };
                for (k, body) in entries {
                    let Node::Scalar { text, style, .. } = k else {
                        return self.err(k.pos(), "case keys must be scalar literals");
                    };
                    let lit = scalar_value(text, *style);
                    if cases.iter().any(|(c, _)| c == &lit) {
                        return self.err(k.pos(), format!("duplicate case `{text}`"));
                    }
                    cases.push((lit, self.body(body, "case")?));
                }
                OpKind::Switch(SwitchOp {
                    name: f.get("name").map(|x| self.text(x, "name")).transpose()?,
                    subject: self.template(f["subject"], "subject")?,
                    cases,
                    default: f.get("default").map(|d| self.body(d, "default")).transpose()?,
                })
            }
            "while" => {
                let f = self.fields(v, "while", &["name", "condition", "max_iterations", "body"], &["condition", "body"])?;
                OpKind::While(WhileOp {
                    name: f.get("name").map(|x| self.text(x, "name")).transpose()?,
                    condition: self.condition(f["condition"])?,
                    max_iterations: f
                        .get("max_iterations")
                        .map(|x| self.positive(x, "max_iterations").map(|v| v.min(u32::MAX as u64) as u32))
                        .transpose()?,
                    body: self.body(f["body"], "body")?,
                })
            }
            "for_each" => {
                let f = self.fields(v, "for_each", &["name", "items", "item_name", "body"], &["items", "body"])?;
                let items = self.value(f["items"])?;
                match &items {
                    Value::String(s) => {
                        Template::parse(s).or_else(|e| self.err(f["items"].pos(), format!("`items`: {e}")))?;
                    }
                    Value::Array(_) => {
                        check_value_templates(&items).or_else(|e| self.err(f["items"].pos(), format!("`items`: {e}")))?;
                    }
                    other => return self.err(f["items"].pos(), format!("`items` must be a template or a list, found {other}")),
                }
                OpKind::ForEach(ForEachOp {
                    name: f.get("name").map(|x| self.text(x, "name")).transpose()?,
                    items,
                    item_name: match f.get("item_name") {
                        Some(x) => self.ident(x, "item_name")?,
                        None => "item".to_string(),
                    },
                    body: self.body(f["body"], "body")?,
                })
            }
            "call" => {
                let f = self.fields(v, "call", &["name", "module", "parameters", "save_as"], &["module"])?;
                let module = self.text(f["module"], "module")?;
                self.check_module_path(&module, f["module"].pos())?;
                let parameters = match f.get("parameters") {
                    Some(p) => self.map_value(p)?,
                    None => Map::new(),
                };
                check_value_templates(&Value::Object(parameters.clone()))
                    .or_else(|e| self.err(v.pos(), format!("`parameters`: {e}")))?;
                OpKind::Call(CallOp {
                    name: f.get("name").map(|x| self.text(x, "name")).transpose()?,
                    module,
                    parameters,
                    save_as: f.get("save_as").map(|x| self.ident(x, "save_as")).transpose()?,
                })
            }
            "parallel" => {
                let (name, list) = match v {
                    Node::Seq { .. } => (None, *v),
                    _ => {
                        let f = self.fields(v, "parallel", &["name", "branches"], &["branches"])?;
                        (f.get("name").map(|x| self.text(x, "name")).transpose()?, f["branches"])
                    }
                };
                let Node::Seq { items, .. } = list else {
                    return self.err(list.pos(), "`branches` must be a list");
                };
                if items.is_empty() {
                    return self.err(list.pos(), "`parallel` needs at least one branch");
                }
                let branches = items
                    .iter()
                    .map(|b| match b {
                        Node::Map { .. } => Ok(vec![self.operation(b)?]),
                        _ => self.body(b, "branch"),
                    })
                    .collect::<R<Vec<_>>>()?;
                OpKind::Parallel(ParallelOp { name, branches })
            }
            "gather" => {
                let target = match v {
                    Node::Scalar { .. } => v,
                    _ => self.fields(v, "gather", &["save_as"], &["save_as"])?["save_as"],
                };
                OpKind::Gather { save_as: self.ident(target, "save_as")? }
            }
            "set_variable" => {
                let f = self.fields(v, "set_variable", &["name", "value"], &["name", "value"])?;
                let value = self.value(f["value"])?;
                check_value_templates(&value).or_else(|e| self.err(f["value"].pos(), format!("`value`: {e}")))?;
                OpKind::SetVariable { name: self.ident(f["name"], "name")?, value }
            }
            "increment" => match v {
                Node::Scalar { .. } => OpKind::Increment { name: self.ident(v, "increment")?, by: Number::from(1) },
                _ => {
                    let f = self.fields(v, "increment", &["name", "by"], &["name"])?;
                    let by = match f.get("by") {
                        Some(b) => match self.value(b)? {
                            Value::Number(x) => x,
                            other => return self.err(b.pos(), format!("`by` must be a number, found {other}")),
                        },
                        None => Number::from(1),
                    };
                    OpKind::Increment { name: self.ident(f["name"], "name")?, by }
                }
            },
            "input" => {
                let f = self.fields(v, "input", &["prompt", "save_as"], &["prompt", "save_as"])?;
                OpKind::Input { prompt: self.template(f["prompt"], "prompt")?, save_as: self.ident(f["save_as"], "save_as")? }
            }
            "return" => {
                let value = self.value(v)?;
                check_value_templates(&value).or_else(|e| self.err(v.pos(), format!("`return`: {e}")))?;
                OpKind::Return { value }
            }
            other => {
                return self.err(
                    n.pos(),
                    format!("unknown construct `{other}` (expected one of: {})", KEYWORDS.join(", ")),
                )
            }
        };
        Ok(Operation { kind, span })
    }
}

/// Parse a workflow document. `origin` is the file path used for error
/// messages and for resolving `call` modules.
pub fn parse_workflow(source: &str, origin: &str) -> Result<WorkflowSpec, ParseError> {
    let Some(root) = build_tree(source, origin)? else {
        return Err(ParseError::Schema { origin: origin.to_string(), pos: None, message: "empty document".into() });
    };
    Decoder { origin }.workflow(&root)
}

/// Plain YAML to a JSON value, for sidecar files (contracts, mock scripts).
pub fn yaml_to_value(source: &str, origin: &str) -> Result<Value, ParseError> {
    match build_tree(source, origin)? {
        Some(root) => Decoder { origin }.value(&root),
        None => Ok(Value::Null),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn typed_scalars() {
        let v = yaml_to_value("a: 1\nb: '1'\nc: true\nd: ~\ne: 2.5\nf: hello\ng: [x, 2]\n", "t").unwrap();
        assert_eq!(v, json!({"a": 1, "b": "1", "c": true, "d": null, "e": 2.5, "f": "hello", "g": ["x", 2]}));
    }

    #[test]
    fn missing_workflow_field() {
        let e = parse_workflow("name: x\n", "t.yaml").unwrap_err();
        assert!(e.message().contains("missing field: workflow"), "{e}");
    }

    #[test]
    fn unknown_construct_has_location() {
        let src = "name: x\nworkflow:\n  - task:\n      instruction: hi\n  - loop:\n      body: []\n";
        let e = parse_workflow(src, "t.yaml").unwrap_err();
        assert_eq!(e.pos(), Some(Pos { line: 5, column: 5 }));
        assert!(e.to_string().starts_with("t.yaml:5:5: unknown construct `loop`"), "{e}");
    }

    #[test]
    fn unknown_key_in_task() {
        let src = "name: x\nworkflow:\n  - task:\n      instruction: hi\n      save_ass: y\n";
        let e = parse_workflow(src, "t.yaml").unwrap_err();
        assert_eq!(e.pos().unwrap().line, 5);
        assert!(e.message().contains("save_ass"));
    }

    #[test]
    fn syntax_error_has_location() {
        let e = parse_workflow("name: x\nworkflow: [\n", "t.yaml").unwrap_err();
        assert!(matches!(e, ParseError::Syntax { .. }), "{e:?}");
    }

    #[test]
    fn shorthand_forms() {
        let src = "name: x\nworkflow:\n  - increment: n\n  - gather: all\n  - parallel:\n      - task: {instruction: a, save_as: a}\n      - - task: {instruction: b}\n        - set_variable: {name: b, value: 2}\n  - return: 0\n";
        let s = parse_workflow(src, "t.yaml").unwrap();
        assert_eq!(s.body.len(), 4);
        match &s.body[2].kind {
            OpKind::Parallel(p) => assert_eq!(p.branches.iter().map(Vec::len).collect::<Vec<_>>(), [1, 2]),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.body[3].kind, OpKind::Return { value: json!(0) });
    }

    #[test]
    fn duplicate_keys_rejected() {
        let e = parse_workflow("name: x\nname: y\nworkflow:\n  - return: 1\n", "t").unwrap_err();
        assert!(e.message().contains("duplicate key"));
    }
}
