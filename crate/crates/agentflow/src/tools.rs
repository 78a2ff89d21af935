//! Tool registries. The builtin set is a small, deterministic stand-in for a
//! sandbox: file tools confined to the run workspace and fixture-backed web
//! lookups.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::sync::Mutex;

use agentflow_core::value::{Map, Value};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::ToolSchema;
use crate::parse::yaml_to_value;

/// Prefix that tool arguments may use to name the workspace root.
pub const WORKSPACE_ALIAS: &str = "/workspace";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToolError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("tool `{0}` is not enabled")]
    Disabled(String),
    #[error("path escapes the workspace: {0}")]
    PathEscape(String),
    #[error("{tool}: {message}")]
    InvalidArgs { tool: String, message: String },
    #[error("{tool}: {message}")]
    Failed { tool: String, message: String },
}

impl ToolError {
    /// Registry refusals abort the step; other errors go back to the model.
    pub fn is_refusal(&self) -> bool {
        matches!(self, ToolError::UnknownTool(_) | ToolError::Disabled(_))
    }
}

/// Per-invocation environment.
#[derive(Debug, Clone, Copy)]
pub struct ToolContext<'a> {
    pub workspace: &'a Path,
    /// `None` enables every tool.
    pub enabled: Option<&'a [String]>,
}

impl ToolContext<'_> {
    pub fn allows(&self, name: &str) -> bool {
        self.enabled.is_none_or(|list| list.iter().any(|t| t == name))
    }
}

pub trait ToolRegistry: Send + Sync {
    fn schemas(&self) -> Vec<ToolSchema>;

    /// Must refuse names outside `cx.enabled`.
    fn invoke(&self, name: &str, args: &Map<String, Value>, cx: &ToolContext<'_>) -> Result<Value, ToolError>;

    fn contains(&self, name: &str) -> bool {
        self.schemas().iter().any(|s| s.name == name)
    }
}

/// Map a tool path argument into the workspace. `/workspace/...` and relative
/// paths are accepted; `..` may not climb above the root, and symlinks may
/// not lead outside it.
pub fn confine(workspace: &Path, arg: &str) -> Result<PathBuf, ToolError> {
    let escape = || ToolError::PathEscape(arg.to_string());
    let rel = if arg == WORKSPACE_ALIAS {
        ""
    } else if let Some(r) = arg.strip_prefix("/workspace/") {
        r
    } else if Path::new(arg).is_absolute() {
        return Err(escape());
    } else {
        arg
    };
    let mut parts: Vec<&std::ffi::OsStr> = Vec::new();
    for c in Path::new(rel).components() {
        match c {
            Component::Normal(p) => parts.push(p),
            Component::CurDir => {}
            Component::ParentDir => {
                parts.pop().ok_or_else(escape)?;
            }
            Component::RootDir | Component::Prefix(_) => return Err(escape()),
        }
    }
    let path: PathBuf = parts.iter().fold(workspace.to_path_buf(), |p, c| p.join(c));
    // Follow symlinks for whatever part already exists.
    let root = workspace.canonicalize().unwrap_or_else(|_| workspace.to_path_buf());
    let mut probe = path.as_path();
    loop {
        if let Ok(real) = probe.canonicalize() {
            if !real.starts_with(&root) {
                return Err(escape());
            }
            break;
        }
        match probe.parent() {
            Some(p) => probe = p,
            None => break,
        }
    }
    Ok(path)
}

/// Canned data for the web-facing builtins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolFixtures {
    /// query -> result list
    #[serde(default)]
    pub search: BTreeMap<String, Vec<Value>>,
    /// url -> bibtex text
    #[serde(default)]
    pub bibtex: BTreeMap<String, String>,
    /// url -> abstract text
    #[serde(default)]
    pub abstracts: BTreeMap<String, String>,
}

pub const GAR_URL: &str = "https://arxiv.org/abs/2510.11769";

pub const GAR_BIBTEX: &str = "@misc{https://doi.org/10.48550/arxiv.2510.11769,
  doi = {10.48550/ARXIV.2510.11769},
  url = {https://arxiv.org/abs/2510.11769},
  author = {Anonymous},
  title = {{GAR}: Generative Adversarial Reinforcement Learning},
  publisher = {arXiv},
  year = {2025},
  copyright = {arXiv.org perpetual, non-exclusive license}
}";

/// Offline stand-in; only the opening words match the real abstract.
pub const GAR_ABSTRACT: &str = "Solving math problems through verifiable languages (fixture abstract for offline runs).";

impl Default for ToolFixtures {
    fn default() -> Self {
        ToolFixtures {
            search: BTreeMap::new(),
            bibtex: BTreeMap::from([(GAR_URL.to_string(), GAR_BIBTEX.to_string())]),
            abstracts: BTreeMap::from([(GAR_URL.to_string(), GAR_ABSTRACT.to_string())]),
        }
    }
}

impl ToolFixtures {
    /// Read a YAML or JSON fixture file, layered over the defaults.
    pub fn load(path: &Path) -> Result<Self, String> {
        let src = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let v = yaml_to_value(&src, &path.display().to_string()).map_err(|e| e.to_string())?;
        let extra: ToolFixtures = serde_json::from_value(v).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut out = ToolFixtures::default();
        out.search.extend(extra.search);
        out.bibtex.extend(extra.bibtex);
        out.abstracts.extend(extra.abstracts);
        Ok(out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuiltinTools {
    pub fixtures: ToolFixtures,
}

fn schema(name: &str, description: &str, props: &[(&str, &str)], required: &[&str]) -> ToolSchema {
    let properties: Map<String, Value> =
        props.iter().map(|(k, t)| (k.to_string(), json!({"type": t}))).collect();
    ToolSchema {
        name: name.into(),
        description: description.into(),
        parameters: json!({"type": "object", "properties": properties, "required": required}),
    }
}

fn str_arg<'a>(tool: &str, args: &'a Map<String, Value>, key: &str) -> Result<&'a str, ToolError> {
    args.get(key).and_then(Value::as_str).ok_or_else(|| ToolError::InvalidArgs {
        tool: tool.to_string(),
        message: format!("missing string argument `{key}`"),
    })
}

fn failed(tool: &str, message: impl ToString) -> ToolError {
    ToolError::Failed { tool: tool.to_string(), message: message.to_string() }
}

impl BuiltinTools {
    pub fn new(fixtures: ToolFixtures) -> Self {
        BuiltinTools { fixtures }
    }

    fn read(&self, tool: &str, args: &Map<String, Value>, key: &str, ws: &Path) -> Result<Value, ToolError> {
        let path = confine(ws, str_arg(tool, args, key)?)?;
        let bytes = std::fs::read(&path).map_err(|e| failed(tool, e))?;
        let limit = args.get("max_bytes").and_then(Value::as_u64).map(|n| n as usize);
        let slice = &bytes[..limit.unwrap_or(bytes.len()).min(bytes.len())];
        Ok(Value::String(String::from_utf8_lossy(slice).into_owned()))
    }
}

impl ToolRegistry for BuiltinTools {
    fn schemas(&self) -> Vec<ToolSchema> {
        vec![
            schema("file_read", "Read a text file from the workspace", &[("path", "string")], &["path"]),
            schema("fs_read", "Read a text file from the workspace", &[("path", "string")], &["path"]),
            schema(
                "file_write",
                "Write a text file in the workspace, creating parent directories",
                &[("path", "string"), ("content", "string")],
                &["path", "content"],
            ),
            schema("list_dir", "List a workspace directory", &[("path", "string")], &[]),
            schema(
                "extract_text_from_file",
                "Extract the text of a document in the workspace",
                &[("file_path", "string"), ("max_bytes", "integer")],
                &["file_path"],
            ),
            schema("web_search", "Search the web", &[("query", "string")], &["query"]),
            schema(
                "get_bibtex_from_url",
                "Fetch the BibTeX entry of a paper",
                &[("url", "string"), ("title", "string")],
                &["url"],
            ),
            schema(
                "get_abstract_from_url",
                "Fetch the abstract of a paper",
                &[("url", "string"), ("title", "string")],
                &["url"],
            ),
        ]
    }

    fn invoke(&self, name: &str, args: &Map<String, Value>, cx: &ToolContext<'_>) -> Result<Value, ToolError> {
        if !self.contains(name) {
            return Err(ToolError::UnknownTool(name.to_string()));
        }
        if !cx.allows(name) {
            return Err(ToolError::Disabled(name.to_string()));
        }
        let ws = cx.workspace;
        match name {
            "file_read" | "fs_read" => self.read(name, args, "path", ws),
            "extract_text_from_file" => self.read(name, args, "file_path", ws),
            "file_write" => {
                let path = confine(ws, str_arg(name, args, "path")?)?;
                let content = str_arg(name, args, "content")?;
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| failed(name, e))?;
                }
                std::fs::write(&path, content).map_err(|e| failed(name, e))?;
                Ok(json!({"written": content.len()}))
            }
            "list_dir" => {
                let arg = args.get("path").and_then(Value::as_str).unwrap_or(".");
                let dir = confine(ws, arg)?;
                let mut names: Vec<String> = std::fs::read_dir(&dir)
                    .map_err(|e| failed(name, e))?
                    .filter_map(Result::ok)
                    .map(|e| {
                        let n = e.file_name().to_string_lossy().into_owned();
                        if e.path().is_dir() { format!("{n}/") } else { n }
                    })
                    .collect();
                names.sort();
                Ok(names.into())
            }
            "web_search" => {
                let q = str_arg(name, args, "query")?;
                Ok(Value::Array(self.fixtures.search.get(q).cloned().unwrap_or_default()))
            }
            "get_bibtex_from_url" => {
                let url = str_arg(name, args, "url")?;
                self.fixtures
                    .bibtex
                    .get(url)
                    .map(|b| Value::String(b.clone()))
                    .ok_or_else(|| failed(name, format!("no bibtex found for {url}")))
            }
            "get_abstract_from_url" => {
                let url = str_arg(name, args, "url")?;
                Ok(self.fixtures.abstracts.get(url).map_or(Value::Null, |a| Value::String(a.clone())))
            }
            _ => Err(ToolError::UnknownTool(name.to_string())),
        }
    }
}

/// Wraps a registry and records every invocation with whether the tool was
/// enabled at the time. Used to check the allowlist across runs.
#[derive(Debug, Default)]
pub struct Audited<R> {
    pub inner: R,
    log: Mutex<Vec<(String, bool, bool)>>,
}

impl<R> Audited<R> {
    pub fn new(inner: R) -> Self {
        Audited { inner, log: Mutex::new(Vec::new()) }
    }

    /// (tool, enabled, succeeded) per invocation.
    pub fn log(&self) -> Vec<(String, bool, bool)> {
        self.log.lock().expect("audit lock").clone()
    }

    /// Invocations of disabled tools that nonetheless succeeded.
    pub fn violations(&self) -> Vec<String> {
        self.log().into_iter().filter(|(_, en, ok)| !en && *ok).map(|(n, _, _)| n).collect()
    }
}

impl<R: ToolRegistry> ToolRegistry for Audited<R> {
    fn schemas(&self) -> Vec<ToolSchema> {
        self.inner.schemas()
    }

    fn invoke(&self, name: &str, args: &Map<String, Value>, cx: &ToolContext<'_>) -> Result<Value, ToolError> {
        let r = self.inner.invoke(name, args, cx);
        self.log.lock().expect("audit lock").push((name.to_string(), cx.allows(name), r.is_ok()));
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: Value) -> Map<String, Value> {
        v.as_object().cloned().unwrap()
    }

    #[test]
    fn write_then_read_round_trips() {
        let d = tempfile::tempdir().unwrap();
        let t = BuiltinTools::default();
        let cx = ToolContext { workspace: d.path(), enabled: None };
        t.invoke("file_write", &args(json!({"path": "outputs/report.md", "content": "# R\n"})), &cx).unwrap();
        let back = t.invoke("file_read", &args(json!({"path": "/workspace/outputs/report.md"})), &cx).unwrap();
        assert_eq!(back, "# R\n");
        assert_eq!(t.invoke("list_dir", &Map::new(), &cx).unwrap(), json!(["outputs/"]));
    }

    #[test]
    fn confinement() {
        let d = tempfile::tempdir().unwrap();
        let t = BuiltinTools::default();
        let cx = ToolContext { workspace: d.path(), enabled: None };
        for p in ["../../etc/hosts", "/etc/hosts", "a/../../x", "/workspace/../x"] {
            let r = t.invoke("file_read", &args(json!({ "path": p })), &cx);
            assert_eq!(r, Err(ToolError::PathEscape(p.into())), "{p}");
        }
        #[cfg(unix)]
        {
            std::os::unix::fs::symlink("/etc", d.path().join("link")).unwrap();
            assert!(matches!(confine(d.path(), "link/hosts"), Err(ToolError::PathEscape(_))));
        }
    }

    #[test]
    fn allowlist_refuses() {
        let d = tempfile::tempdir().unwrap();
        let enabled = vec!["web_search".to_string()];
        let t = Audited::new(BuiltinTools::default());
        let cx = ToolContext { workspace: d.path(), enabled: Some(&enabled) };
        let e = t.invoke("file_write", &args(json!({"path": "x", "content": ""})), &cx).unwrap_err();
        assert!(e.is_refusal());
        assert!(t.invoke("nope", &Map::new(), &cx).unwrap_err().is_refusal());
        assert!(t.invoke("web_search", &args(json!({"query": "q"})), &cx).is_ok());
        assert!(t.violations().is_empty());
        assert!(!d.path().join("x").exists());
    }

    #[test]
    fn bibtex_fixture() {
        let d = tempfile::tempdir().unwrap();
        let cx = ToolContext { workspace: d.path(), enabled: None };
        let v = BuiltinTools::default()
            .invoke("get_bibtex_from_url", &args(json!({"url": GAR_URL, "title": "GAR"})), &cx)
            .unwrap();
        assert!(v.as_str().unwrap().starts_with("@misc{https://doi.org/10.48550/arxiv.2510.11769"));
        assert!(agentflow_core::bibtex::parse_entries(v.as_str().unwrap()).is_ok());
    }
}
