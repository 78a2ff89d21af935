//! Context values.
//!
//! Everything that flows between steps is a JSON-shaped [`Value`]. Maps are
//! ordered by key so snapshots and traces serialize deterministically.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub use serde_json::{Map, Number, Value};

/// Read access to a set of named context variables.
pub trait Vars {
    fn var(&self, name: &str) -> Option<&Value>;
}

impl Vars for Map<String, Value> {
    fn var(&self, name: &str) -> Option<&Value> {
        self.get(name)
    }
}

impl<V: Vars + ?Sized> Vars for &V {
    fn var(&self, name: &str) -> Option<&Value> {
        (**self).var(name)
    }
}

/// A stack of variable layers searched innermost first.
pub struct ScopeView<'a> {
    layers: Vec<&'a Map<String, Value>>,
}

impl<'a> ScopeView<'a> {
    /// `layers` is ordered outermost first, the way scopes are pushed.
    pub fn new(layers: Vec<&'a Map<String, Value>>) -> Self {
        ScopeView { layers }
    }

    pub fn flatten(&self) -> Map<String, Value> {
        let mut out = Map::new();
        for layer in &self.layers {
            for (k, v) in layer.iter() {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }
}

impl Vars for ScopeView<'_> {
    fn var(&self, name: &str) -> Option<&Value> {
        self.layers.iter().rev().find_map(|m| m.get(name))
    }
}

/// Resolve a dotted path (`a.b.0.c`) against the variables.
///
/// Numeric segments index into lists. Returns `None` when any segment is
/// missing.
pub fn lookup_path<'v, V: Vars + ?Sized>(vars: &'v V, path: &[String]) -> Option<&'v Value> {
    let (root, rest) = path.split_first()?;
    let mut cur = vars.var(root)?;
    for seg in rest {
        cur = match cur {
            Value::Object(m) => m.get(seg.as_str())?,
            Value::Array(items) => items.get(seg.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(cur)
}

/// Truthiness used by bare conditions.
pub fn is_truthy(v: &Value) -> bool {
    match v {
        Value::Null => false,
        Value::Bool(b) => *b,
        Value::Number(n) => n.as_f64().is_none_or(|f| f != 0.0),
        Value::String(s) => !s.is_empty(),
        Value::Array(items) => !items.is_empty(),
        Value::Object(_) => true,
    }
}

pub fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "text",
        Value::Array(_) => "list",
        Value::Object(_) => "map",
    }
}

/// Text form used when a value is interpolated into surrounding text.
pub fn render_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Structural equality where `1` and `1.0` are equal.
pub fn values_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_i64(), y.as_i64()) {
            (Some(i), Some(j)) => i == j,
            _ => x.as_f64() == y.as_f64(),
        },
        (Value::Array(xs), Value::Array(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| values_equal(x, y))
        }
        (Value::Object(xm), Value::Object(ym)) => {
            xm.len() == ym.len()
                && xm
                    .iter()
                    .all(|(k, x)| ym.get(k).is_some_and(|y| values_equal(x, y)))
        }
        _ => a == b,
    }
}

/// Build a JSON number from an `f64`, preferring an integer representation.
pub fn number_value(f: f64) -> Option<Value> {
    if f.is_finite() && f == (f as i64) as f64 && f.abs() < 9.0e15 {
        Some(Value::from(f as i64))
    } else {
        Number::from_f64(f).map(Value::Number)
    }
}

/// `base + by`, staying in integers when both are integers.
pub fn add_numbers(base: &Number, by: &Number) -> Option<Value> {
    if let (Some(a), Some(b)) = (base.as_i64(), by.as_i64()) {
        if let Some(sum) = a.checked_add(b) {
            return Some(Value::from(sum));
        }
    }
    number_value(base.as_f64()? + by.as_f64()?)
}

/// Parse text as a JSON array, if it is one.
pub fn parse_json_array(text: &str) -> Option<Vec<Value>> {
    match serde_json::from_str::<Value>(text.trim()) {
        Ok(Value::Array(items)) => Some(items),
        _ => None,
    }
}

/// Parse text as a JSON object, if it is one.
pub fn parse_json_object(text: &str) -> Option<Map<String, Value>> {
    match serde_json::from_str::<Value>(text.trim()) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c == '_' || c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

/// `a.b.c`, where the first segment is an identifier and later segments are
/// identifiers or list indices.
pub fn parse_dotted_path(s: &str) -> Option<Vec<String>> {
    let mut out = Vec::new();
    for (i, seg) in s.split('.').enumerate() {
        let ok = if i == 0 {
            is_identifier(seg)
        } else {
            is_identifier(seg) || (!seg.is_empty() && seg.bytes().all(|b| b.is_ascii_digit()))
        };
        if !ok {
            return None;
        }
        out.push(seg.to_string());
    }
    Some(out)
}
