//! `{{placeholder}}` templates and parameter binding.

use alloc::borrow::ToOwned;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::value::{lookup_path, parse_dotted_path, render_text, Map, Value, Vars};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unclosed placeholder starting at byte {offset}")]
    Unclosed { offset: usize },
    #[error("invalid placeholder `{{{{{text}}}}}`")]
    BadPlaceholder { text: String },
    #[error("unbound variable: {0}")]
    UnboundVariable(String),
    #[error("missing parameter: {0}")]
    MissingParameter(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Ref(Vec<String>),
}

/// A parsed template. Serializes as its raw text.
#[derive(Clone, PartialEq, Eq)]
pub struct Template {
    raw: String,
    segments: Vec<Segment>,
}

impl fmt::Debug for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Template({:?})", self.raw)
    }
}

impl Template {
    pub fn parse(raw: &str) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut lit = String::new();
        let mut rest = raw;
        let mut consumed = 0usize;
        while !rest.is_empty() {
            if let Some(after) = rest.strip_prefix("\\{{") {
                lit.push_str("{{");
                consumed += 3;
                rest = after;
                continue;
            }
            if let Some(after) = rest.strip_prefix("{{") {
                let close = after.find("}}").ok_or(TemplateError::Unclosed { offset: consumed })?;
                let inner = after[..close].trim();
                let path = parse_dotted_path(inner).ok_or_else(|| TemplateError::BadPlaceholder {
                    text: after[..close].to_string(),
                })?;
                if !lit.is_empty() {
                    segments.push(Segment::Literal(core::mem::take(&mut lit)));
                }
                segments.push(Segment::Ref(path));
                consumed += 2 + close + 2;
                rest = &after[close + 2..];
                continue;
            }
            let ch = rest.chars().next().unwrap_or_default();
            lit.push(ch);
            consumed += ch.len_utf8();
            rest = &rest[ch.len_utf8()..];
        }
        if !lit.is_empty() {
            segments.push(Segment::Literal(lit));
        }
        Ok(Template { raw: raw.to_owned(), segments })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_literal(&self) -> bool {
        self.segments.iter().all(|s| matches!(s, Segment::Literal(_)))
    }

    /// Rebuild source text from the segments.
    pub fn reassemble(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(&text.replace("{{", "\\{{")),
                Segment::Ref(path) => {
                    out.push_str("{{");
                    out.push_str(&path.join("."));
                    out.push_str("}}");
                }
            }
        }
        out
    }

    /// Dotted paths referenced by this template, in order of appearance.
    pub fn references(&self) -> impl Iterator<Item = &[String]> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Ref(p) => Some(p.as_slice()),
            Segment::Literal(_) => None,
        })
    }

    /// Expand against `vars`.
    ///
    /// A template consisting of exactly one placeholder yields the referenced
    /// value unchanged; anything else yields text.
    pub fn expand<V: Vars + ?Sized>(&self, vars: &V) -> Result<Value, TemplateError> {
        if let [Segment::Ref(path)] = self.segments.as_slice() {
            return resolve(vars, path).cloned();
        }
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(text),
                Segment::Ref(path) => out.push_str(&render_text(resolve(vars, path)?)),
            }
        }
        Ok(Value::String(out))
    }

    /// Expand and render as text.
    pub fn expand_text<V: Vars + ?Sized>(&self, vars: &V) -> Result<String, TemplateError> {
        self.expand(vars).map(|v| render_text(&v))
    }
}

fn resolve<'v, V: Vars + ?Sized>(vars: &'v V, path: &[String]) -> Result<&'v Value, TemplateError> {
    lookup_path(vars, path).ok_or_else(|| TemplateError::UnboundVariable(path.join(".")))
}

impl Serialize for Template {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.raw)
    }
}

impl<'de> Deserialize<'de> for Template {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Template::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// Expand every string leaf of a value tree as a template.
pub fn expand_value<V: Vars + ?Sized>(value: &Value, vars: &V) -> Result<Value, TemplateError> {
    Ok(match value {
        Value::String(s) => Template::parse(s)?.expand(vars)?,
        Value::Array(items) => Value::Array(
            items
                .iter()
                .map(|v| expand_value(v, vars))
                .collect::<Result<_, _>>()?,
        ),
        Value::Object(m) => {
            let mut out = Map::new();
            for (k, v) in m {
                out.insert(k.clone(), expand_value(v, vars)?);
            }
            Value::Object(out)
        }
        other => other.clone(),
    })
}

/// Check every string leaf of a value tree parses as a template.
pub fn check_value_templates(value: &Value) -> Result<(), TemplateError> {
    match value {
        Value::String(s) => Template::parse(s).map(|_| ()),
        Value::Array(items) => items.iter().try_for_each(check_value_templates),
        Value::Object(m) => m.values().try_for_each(check_value_templates),
        _ => Ok(()),
    }
}

/// Dotted references found anywhere in a value tree.
pub fn value_references(value: &Value) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    collect_refs(value, &mut out);
    out
}

fn collect_refs(value: &Value, out: &mut Vec<Vec<String>>) {
    match value {
        Value::String(s) => {
            if let Ok(t) = Template::parse(s) {
                out.extend(t.references().map(<[String]>::to_vec));
            }
        }
        Value::Array(items) => items.iter().for_each(|v| collect_refs(v, out)),
        Value::Object(m) => m.values().for_each(|v| collect_refs(v, out)),
        _ => {}
    }
}

/// How a module declares one of its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamDecl {
    /// `${NAME}`: must be supplied by the caller.
    Required(String),
    /// Anything else is a default, expanded against earlier parameters.
    Default(Value),
}

impl ParamDecl {
    pub fn of(value: &Value) -> Self {
        if let Value::String(s) = value {
            let t = s.trim();
            if let Some(inner) = t.strip_prefix("${").and_then(|r| r.strip_suffix('}')) {
                if crate::value::is_identifier(inner) {
                    return ParamDecl::Required(inner.to_string());
                }
            }
        }
        ParamDecl::Default(value.clone())
    }
}

/// Build a callee's initial variables from its declared parameters and the
/// caller's already-resolved arguments.
///
/// A caller argument matches a declaration by key, or by the `${NAME}` name
/// for required parameters. Undeclared caller arguments are passed through.
pub fn bind_parameters(
    declared: &Map<String, Value>,
    caller_args: &Map<String, Value>,
) -> Result<Map<String, Value>, TemplateError> {
    let mut bound = Map::new();
    for (name, decl) in declared {
        if let Some(v) = caller_args.get(name) {
            bound.insert(name.clone(), v.clone());
            continue;
        }
        match ParamDecl::of(decl) {
            ParamDecl::Required(ext) => match caller_args.get(&ext) {
                Some(v) => {
                    bound.insert(name.clone(), v.clone());
                }
                None => return Err(TemplateError::MissingParameter(name.clone())),
            },
            ParamDecl::Default(v) => {
                let expanded = expand_value(&v, &bound)?;
                bound.insert(name.clone(), expanded);
            }
        }
    }
    for (name, v) in caller_args {
        let claimed = declared.contains_key(name)
            || declared
                .values()
                .any(|d| matches!(ParamDecl::of(d), ParamDecl::Required(ref ext) if ext == name));
        if !claimed {
            bound.insert(name.clone(), v.clone());
        }
    }
    Ok(bound)
}
