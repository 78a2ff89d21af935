//! Contract predicates over context values.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::bibtex;
use crate::value::{parse_json_object, type_name, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PredicateName {
    #[serde(rename = "nameExists")]
    NameExists,
    #[serde(rename = "isNonEmptyString")]
    IsNonEmptyString,
    #[serde(rename = "isValidURL")]
    IsValidUrl,
    #[serde(rename = "isValidFilePath")]
    IsValidFilePath,
    #[serde(rename = "isValidBibtex")]
    IsValidBibtex,
    #[serde(rename = "isValidJson")]
    IsValidJson,
    #[serde(rename = "matchesJsonSchema")]
    MatchesJsonSchema,
    #[serde(rename = "toolExists")]
    ToolExists,
}

impl PredicateName {
    pub const ALL: [PredicateName; 8] = [
        PredicateName::NameExists,
        PredicateName::IsNonEmptyString,
        PredicateName::IsValidUrl,
        PredicateName::IsValidFilePath,
        PredicateName::IsValidBibtex,
        PredicateName::IsValidJson,
        PredicateName::MatchesJsonSchema,
        PredicateName::ToolExists,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PredicateName::NameExists => "nameExists",
            PredicateName::IsNonEmptyString => "isNonEmptyString",
            PredicateName::IsValidUrl => "isValidURL",
            PredicateName::IsValidFilePath => "isValidFilePath",
            PredicateName::IsValidBibtex => "isValidBibtex",
            PredicateName::IsValidJson => "isValidJson",
            PredicateName::MatchesJsonSchema => "matchesJsonSchema",
            PredicateName::ToolExists => "toolExists",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            PredicateName::NameExists | PredicateName::IsNonEmptyString | PredicateName::MatchesJsonSchema => {
                Mode::Formal
            }
            _ => Mode::Tool,
        }
    }
}

/// `formal` predicates are pure checks on the value; `tool` predicates
/// consult the environment (filesystem, parsers, tool registry).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Formal,
    Tool,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Formal => "formal",
            Mode::Tool => "tool",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predicate {
    pub name: PredicateName,
    /// Key set for `matchesJsonSchema`.
    pub keys: Vec<String>,
}

impl Predicate {
    pub fn new(name: PredicateName) -> Self {
        Predicate { name, keys: Vec::new() }
    }

    pub fn schema<I: IntoIterator<Item = S>, S: Into<String>>(keys: I) -> Self {
        Predicate { name: PredicateName::MatchesJsonSchema, keys: keys.into_iter().map(Into::into).collect() }
    }

    pub fn mode(&self) -> Mode {
        self.name.mode()
    }

    /// True when every value passing `self` also passes `other`.
    pub fn implies(&self, other: &Predicate) -> bool {
        use PredicateName::*;
        if self == other || other.name == NameExists {
            return true;
        }
        matches!((self.name, other.name), (IsValidBibtex, IsNonEmptyString))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name.as_str())?;
        if self.name == PredicateName::MatchesJsonSchema {
            write!(f, "({{{}}})", self.keys.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PredicateError {
    #[error("unknown predicate `{0}`")]
    Unknown(String),
    #[error("malformed predicate `{0}`")]
    Malformed(String),
    #[error("`{0}` needs an environment")]
    EnvUnavailable(&'static str),
}

impl FromStr for Predicate {
    type Err = PredicateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (head, args) = match s.find('(') {
            Some(i) => {
                let rest = s[i + 1..].strip_suffix(')').ok_or_else(|| PredicateError::Malformed(s.to_string()))?;
                (s[..i].trim(), Some(rest.trim()))
            }
            None => (s, None),
        };
        let name = PredicateName::ALL
            .into_iter()
            .find(|n| n.as_str() == head)
            .ok_or_else(|| PredicateError::Unknown(head.to_string()))?;
        match (name, args) {
            (PredicateName::MatchesJsonSchema, Some(a)) => {
                let inner = a
                    .strip_prefix('{')
                    .and_then(|x| x.strip_suffix('}'))
                    .unwrap_or(a);
                let keys: Vec<String> = inner
                    .split(',')
                    .map(|k| k.trim().trim_matches('"').trim_matches('\'').to_string())
                    .filter(|k| !k.is_empty())
                    .collect();
                Ok(Predicate::schema(keys))
            }
            (PredicateName::MatchesJsonSchema, None) => Err(PredicateError::Malformed(s.to_string())),
            (_, Some(_)) => Err(PredicateError::Malformed(s.to_string())),
            (n, None) => Ok(Predicate::new(n)),
        }
    }
}

impl Serialize for Predicate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Predicate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// What tool-mode predicates may ask of the outside world.
pub trait PredicateEnv {
    /// Whether `path` names an existing entry inside the workspace.
    fn path_exists(&self, path: &str) -> bool;
    /// Whether `name` is registered and enabled.
    fn tool_available(&self, name: &str) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Verdict {
    fn pass() -> Self {
        Verdict { pass: true, reason: None }
    }

    fn fail(reason: impl Into<String>) -> Self {
        Verdict { pass: false, reason: Some(reason.into()) }
    }

    fn check(ok: bool, reason: impl FnOnce() -> String) -> Self {
        if ok {
            Self::pass()
        } else {
            Self::fail(reason())
        }
    }
}

/// Evaluate `p` on `subject`. For `toolExists` the subject is the tool name
/// itself and `v` is ignored.
pub fn eval_predicate(
    p: &Predicate,
    subject: &str,
    v: Option<&Value>,
    env: Option<&dyn PredicateEnv>,
) -> Result<Verdict, PredicateError> {
    let env = match (p.mode(), env) {
        (Mode::Tool, None) => return Err(PredicateError::EnvUnavailable(p.name.as_str())),
        (Mode::Tool, Some(e)) => Some(e),
        (Mode::Formal, _) => None,
    };
    if p.name == PredicateName::ToolExists {
        let ok = env.is_some_and(|e| e.tool_available(subject));
        return Ok(Verdict::check(ok, || format!("tool `{subject}` is not available")));
    }
    let Some(v) = v else {
        return Ok(Verdict::fail("missing"));
    };
    let text = v.as_str();
    let verdict = match p.name {
        PredicateName::NameExists => Verdict::pass(),
        PredicateName::IsNonEmptyString => match text {
            Some(t) => Verdict::check(!t.trim().is_empty(), || "empty text".to_string()),
            None => Verdict::fail(format!("expected text, got {}", type_name(v))),
        },
        PredicateName::IsValidUrl => match text {
            Some(t) => Verdict::check(is_valid_url(t), || "not an absolute http(s) URL".to_string()),
            None => Verdict::fail(format!("expected text, got {}", type_name(v))),
        },
        PredicateName::IsValidFilePath => match text {
            Some(t) if path_is_lexically_valid(t) => Verdict::check(
                env.is_some_and(|e| e.path_exists(t)),
                || "no such file in the workspace".to_string(),
            ),
            Some(_) => Verdict::fail("not a valid path"),
            None => Verdict::fail(format!("expected text, got {}", type_name(v))),
        },
        PredicateName::IsValidBibtex => match text {
            Some(t) => match bibtex::parse_entries(t) {
                Ok(_) => Verdict::pass(),
                Err(e) => Verdict::fail(e.to_string()),
            },
            None => Verdict::fail(format!("expected text, got {}", type_name(v))),
        },
        PredicateName::IsValidJson => match text {
            Some(t) => Verdict::check(serde_json::from_str::<Value>(t).is_ok(), || "text is not JSON".to_string()),
            None => Verdict::pass(),
        },
        PredicateName::MatchesJsonSchema => {
            let parsed;
            let map = match v {
                Value::Object(m) => Some(m),
                Value::String(t) => {
                    parsed = parse_json_object(t);
                    parsed.as_ref()
                }
                _ => None,
            };
            match map {
                None => Verdict::fail(format!("expected a map, got {}", type_name(v))),
                Some(m) => {
                    let missing: Vec<&str> =
                        p.keys.iter().filter(|k| !m.contains_key(*k)).map(String::as_str).collect();
                    let extra: Vec<&str> =
                        m.keys().filter(|k| !p.keys.contains(k)).map(String::as_str).collect();
                    let mut parts = Vec::new();
                    if !missing.is_empty() {
                        parts.push(format!("missing key(s): {}", missing.join(", ")));
                    }
                    if !extra.is_empty() {
                        parts.push(format!("unexpected key(s): {}", extra.join(", ")));
                    }
                    Verdict::check(parts.is_empty(), || parts.join("; "))
                }
            }
        }
        PredicateName::ToolExists => unreachable!(),
    };
    Ok(verdict)
}

/// Absolute URL with an http or https scheme and a plausible host.
pub fn is_valid_url(s: &str) -> bool {
    let Some((scheme, rest)) = s.split_once("://") else {
        return false;
    };
    if !scheme.eq_ignore_ascii_case("http") && !scheme.eq_ignore_ascii_case("https") {
        return false;
    }
    if s.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return false;
    }
    let authority = rest.split(['/', '?', '#']).next().unwrap_or("");
    let host_port = authority.rsplit_once('@').map_or(authority, |(_, h)| h);
    let (host, port) = if host_port.starts_with('[') {
        match host_port.find(']') {
            Some(i) => (&host_port[..=i], &host_port[i + 1..]),
            None => return false,
        }
    } else {
        match host_port.split_once(':') {
            Some((h, p)) => (h, p),
            None => (host_port, ""),
        }
    };
    let port_ok = if host_port.starts_with('[') {
        port.is_empty() || port.strip_prefix(':').is_some_and(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()))
    } else {
        !authority.contains(':') || (!port.is_empty() && port.bytes().all(|b| b.is_ascii_digit()))
    };
    let host_ok = if host.starts_with('[') {
        host.len() > 2
    } else {
        !host.is_empty()
            && host.split('.').all(|label| {
                !label.is_empty()
                    && label.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
                    && !label.starts_with('-')
                    && !label.ends_with('-')
            })
    };
    host_ok && port_ok
}

fn path_is_lexically_valid(p: &str) -> bool {
    !p.trim().is_empty() && p == p.trim() && !p.chars().any(|c| c == '\0' || c.is_control())
}
