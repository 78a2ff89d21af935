//! Condition mini-language for `if`, `while` and `switch`.
//!
//! ```text
//! condition := operand [ op operand ]
//! op        := == | != | < | <= | > | >= | contains
//! operand   := {{path}} | path | "text" | 'text' | number | true | false | null | None
//! ```
//!
//! A lone operand is a truthiness test.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::value::{is_truthy, lookup_path, parse_dotted_path, type_name, values_equal, Value, Vars};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConditionError {
    #[error("condition syntax error in `{raw}`: {reason}")]
    Syntax { raw: String, reason: String },
    #[error("unbound variable: {0}")]
    UnboundVariable(String),
    #[error("type mismatch: {lhs} {op} {rhs}")]
    TypeMismatch { op: CompareOp, lhs: &'static str, rhs: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Contains,
}

impl fmt::Display for CompareOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompareOp::Eq => "==",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
            CompareOp::Contains => "contains",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Ref(Vec<String>),
    Literal(Value),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CondExpr {
    Truthy(Operand),
    Compare(Operand, CompareOp, Operand),
}

#[derive(Clone, PartialEq)]
pub struct Condition {
    raw: String,
    expr: CondExpr,
}

impl fmt::Debug for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Condition({:?})", self.raw)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Operand(Operand),
    Op(CompareOp),
}

fn syntax(raw: &str, reason: impl Into<String>) -> ConditionError {
    ConditionError::Syntax { raw: raw.to_string(), reason: reason.into() }
}

fn tokenize(raw: &str) -> Result<Vec<Token>, ConditionError> {
    let mut tokens = Vec::new();
    let bytes = raw.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let rest = &raw[i..];
        if let Some(after) = rest.strip_prefix("{{") {
            let close = after.find("}}").ok_or_else(|| syntax(raw, "unclosed {{"))?;
            let path = parse_dotted_path(after[..close].trim())
                .ok_or_else(|| syntax(raw, "invalid placeholder"))?;
            tokens.push(Token::Operand(Operand::Ref(path)));
            i += 2 + close + 2;
            continue;
        }
        if let Some((op, len)) = symbol_op(rest) {
            tokens.push(Token::Op(op));
            i += len;
            continue;
        }
        if c == b'"' || c == b'\'' {
            let (text, used) = read_quoted(&rest[1..], c as char).ok_or_else(|| syntax(raw, "unterminated string"))?;
            tokens.push(Token::Operand(Operand::Literal(Value::String(text))));
            i += 1 + used;
            continue;
        }
        let end = rest
            .find(|ch: char| ch.is_whitespace() || "=!<>\"'".contains(ch))
            .unwrap_or(rest.len());
        let word = &rest[..end];
        if word.is_empty() {
            return Err(syntax(raw, "unexpected character"));
        }
        tokens.push(word_token(raw, word)?);
        i += end;
    }
    Ok(tokens)
}

fn symbol_op(s: &str) -> Option<(CompareOp, usize)> {
    [
        ("==", CompareOp::Eq),
        ("!=", CompareOp::Ne),
        ("<=", CompareOp::Le),
        (">=", CompareOp::Ge),
        ("<", CompareOp::Lt),
        (">", CompareOp::Gt),
    ]
    .into_iter()
    .find(|(text, _)| s.starts_with(text))
    .map(|(text, op)| (op, text.len()))
}

fn read_quoted(s: &str, quote: char) -> Option<(String, usize)> {
    let mut out = String::new();
    let mut chars = s.char_indices();
    while let Some((idx, ch)) = chars.next() {
        if ch == '\\' {
            let (_, esc) = chars.next()?;
            out.push(match esc {
                'n' => '\n',
                't' => '\t',
                other => other,
            });
        } else if ch == quote {
            return Some((out, idx + 1));
        } else {
            out.push(ch);
        }
    }
    None
}

fn word_token(raw: &str, word: &str) -> Result<Token, ConditionError> {
    let lit = match word {
        "contains" => return Ok(Token::Op(CompareOp::Contains)),
        "true" | "True" => Value::Bool(true),
        "false" | "False" => Value::Bool(false),
        "null" | "None" => Value::Null,
        _ => {
            let first = word.as_bytes()[0];
            if first.is_ascii_digit() || first == b'-' || first == b'+' {
                if let Ok(i) = word.parse::<i64>() {
                    Value::from(i)
                } else if let Some(v) = word.parse::<f64>().ok().and_then(crate::value::number_value) {
                    v
                } else {
                    return Err(syntax(raw, "invalid number"));
                }
            } else {
                let path = parse_dotted_path(word).ok_or_else(|| syntax(raw, "invalid operand"))?;
                return Ok(Token::Operand(Operand::Ref(path)));
            }
        }
    };
    Ok(Token::Operand(Operand::Literal(lit)))
}

impl Condition {
    pub fn parse(raw: &str) -> Result<Self, ConditionError> {
        let tokens = tokenize(raw)?;
        let expr = match tokens.as_slice() {
            [Token::Operand(a)] => CondExpr::Truthy(a.clone()),
            [Token::Operand(a), Token::Op(op), Token::Operand(b)] => {
                CondExpr::Compare(a.clone(), *op, b.clone())
            }
            [] => return Err(syntax(raw, "empty condition")),
            _ => return Err(syntax(raw, "expected `operand` or `operand op operand`")),
        };
        Ok(Condition { raw: raw.to_string(), expr })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn expr(&self) -> &CondExpr {
        &self.expr
    }

    pub fn references(&self) -> Vec<&[String]> {
        let ops: Vec<&Operand> = match &self.expr {
            CondExpr::Truthy(a) => alloc::vec![a],
            CondExpr::Compare(a, _, b) => alloc::vec![a, b],
        };
        ops.into_iter()
            .filter_map(|o| match o {
                Operand::Ref(p) => Some(p.as_slice()),
                Operand::Literal(_) => None,
            })
            .collect()
    }

    pub fn evaluate<V: Vars + ?Sized>(&self, vars: &V) -> Result<bool, ConditionError> {
        match &self.expr {
            CondExpr::Truthy(a) => Ok(is_truthy(operand(vars, a)?)),
            CondExpr::Compare(a, op, b) => compare(operand(vars, a)?, *op, operand(vars, b)?),
        }
    }
}

fn operand<'v, V: Vars + ?Sized>(vars: &'v V, o: &'v Operand) -> Result<&'v Value, ConditionError> {
    match o {
        Operand::Literal(v) => Ok(v),
        Operand::Ref(path) => lookup_path(vars, path)
            .ok_or_else(|| ConditionError::UnboundVariable(path.join("."))),
    }
}

/// Apply a comparison operator to two resolved values.
pub fn compare(lhs: &Value, op: CompareOp, rhs: &Value) -> Result<bool, ConditionError> {
    let mismatch = || ConditionError::TypeMismatch { op, lhs: type_name(lhs), rhs: type_name(rhs) };
    match op {
        CompareOp::Eq => Ok(values_equal(lhs, rhs)),
        CompareOp::Ne => Ok(!values_equal(lhs, rhs)),
        CompareOp::Contains => match (lhs, rhs) {
            (Value::Array(items), needle) => Ok(items.iter().any(|x| values_equal(x, needle))),
            (Value::String(hay), Value::String(needle)) => Ok(hay.contains(needle.as_str())),
            _ => Err(mismatch()),
        },
        CompareOp::Lt | CompareOp::Le | CompareOp::Gt | CompareOp::Ge => {
            let ord = match (lhs, rhs) {
                (Value::Number(a), Value::Number(b)) => match (a.as_i64(), b.as_i64()) {
                    (Some(x), Some(y)) => x.cmp(&y),
                    _ => a
                        .as_f64()
                        .zip(b.as_f64())
                        .and_then(|(x, y)| x.partial_cmp(&y))
                        .ok_or_else(mismatch)?,
                },
                (Value::String(a), Value::String(b)) => a.cmp(b),
                _ => return Err(mismatch()),
            };
            Ok(match op {
                CompareOp::Lt => ord == Ordering::Less,
                CompareOp::Le => ord != Ordering::Greater,
                CompareOp::Gt => ord == Ordering::Greater,
                _ => ord != Ordering::Less,
            })
        }
    }
}

impl Serialize for Condition {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.raw)
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Condition::parse(&raw).map_err(serde::de::Error::custom)
    }
}
