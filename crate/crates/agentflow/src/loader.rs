//! Module resolution. Paths in `call` and `registered_skills` are relative to
//! the file that names them; parsed modules are cached by canonical path and content.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use agentflow_core::workflow::{OpKind, Operation, Pos, WorkflowSpec};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parse::{parse_workflow, ParseError};

/// Nesting limit for `call`.
pub const MAX_CALL_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoadError {
    #[error("module not found: {path}")]
    NotFound { path: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("module path must be relative: {0}")]
    AbsolutePath(String),
    #[error("call cycle: {}", chain.join(" -> "))]
    Cycle { chain: Vec<String> },
    #[error("call depth exceeds {limit}")]
    DepthExceeded { limit: usize },
    /// A failure inside a module, tagged with the call that referenced it.
    #[error("{origin}:{}:{}: in module `{module}`: {source}", pos.line, pos.column)]
    InModule { origin: String, pos: Pos, module: String, source: Box<LoadError> },
}

#[derive(Debug)]
pub struct Loaded {
    pub spec: Arc<WorkflowSpec>,
    pub path: PathBuf,
    /// sha256 of the file content, hex.
    pub hash: String,
}

pub fn content_hash(source: &str) -> String {
    hex(&Sha256::digest(source.as_bytes()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Shared by every run in a process; internally synchronized.
#[derive(Debug, Default)]
pub struct Loader {
    cache: Mutex<HashMap<PathBuf, Arc<Loaded>>>,
    parses: AtomicUsize,
}

impl Loader {
    pub fn new() -> Self {
        Self::default()
    }

    /// Files parsed so far (cache misses).
    pub fn parse_count(&self) -> usize {
        self.parses.load(Ordering::SeqCst)
    }

    pub fn load_path(&self, path: &Path) -> Result<Arc<Loaded>, LoadError> {
        let canon = path
            .canonicalize()
            .map_err(|_| LoadError::NotFound { path: path.display().to_string() })?;
        let source = std::fs::read_to_string(&canon)
            .map_err(|e| LoadError::Io { path: canon.display().to_string(), message: e.to_string() })?;
        let hash = content_hash(&source);
        // An edited file replaces its cache entry.
        if let Some(hit) = self.cache.lock().expect("loader lock").get(&canon) {
            if hit.hash == hash {
                return Ok(hit.clone());
            }
        }
        let spec = parse_workflow(&source, &canon.display().to_string())?;
        self.parses.fetch_add(1, Ordering::SeqCst);
        let loaded = Arc::new(Loaded { spec: Arc::new(spec), path: canon.clone(), hash });
        self.cache.lock().expect("loader lock").insert(canon, loaded.clone());
        Ok(loaded)
    }

    /// Resolve `module_ref` against the directory of `origin`.
    pub fn resolve_module(&self, origin: &str, module_ref: &str) -> Result<Arc<Loaded>, LoadError> {
        if Path::new(module_ref).is_absolute() {
            return Err(LoadError::AbsolutePath(module_ref.to_string()));
        }
        let base = Path::new(origin).parent().unwrap_or(Path::new("."));
        self.load_path(&base.join(module_ref))
    }

    /// Resolve a call from inside a running stack of module files.
    /// `stack` holds canonical paths, outermost first.
    pub fn resolve_call(
        &self,
        stack: &[String],
        origin: &str,
        module_ref: &str,
    ) -> Result<Arc<Loaded>, LoadError> {
        let loaded = self.resolve_module(origin, module_ref)?;
        let key = loaded.path.display().to_string();
        if let Some(i) = stack.iter().position(|p| p == &key) {
            let mut chain: Vec<String> = stack[i..].to_vec();
            chain.push(key);
            return Err(LoadError::Cycle { chain });
        }
        if stack.len() >= MAX_CALL_DEPTH {
            return Err(LoadError::DepthExceeded { limit: MAX_CALL_DEPTH });
        }
        Ok(loaded)
    }

    /// Load every module reachable through `call` and skill registrations,
    /// failing on the first unresolvable file or cycle.
    pub fn load_tree(&self, spec: &WorkflowSpec) -> Result<(), LoadError> {
        let root = canonical_origin(&spec.origin);
        self.walk(spec, &mut vec![root])
    }

    fn walk(&self, spec: &WorkflowSpec, stack: &mut Vec<String>) -> Result<(), LoadError> {
        for (module, pos) in module_refs(spec) {
            let tag = |e: LoadError| LoadError::InModule {
                origin: spec.origin.clone(),
                pos,
                module: module.clone(),
                source: Box::new(e),
            };
            let loaded = match self.resolve_call(stack, &spec.origin, &module) {
                Ok(l) => l,
                Err(e @ LoadError::Cycle { .. }) => return Err(e),
                Err(e) => return Err(tag(e)),
            };
            stack.push(loaded.path.display().to_string());
            let r = self.walk(&loaded.spec, stack);
            stack.pop();
            r?;
        }
        Ok(())
    }
}

/// Canonical form of a workflow origin, or the origin itself when the file
/// does not exist (inline sources).
pub fn canonical_origin(origin: &str) -> String {
    Path::new(origin)
        .canonicalize()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|_| origin.to_string())
}

/// Every module path a spec names, with the position that names it.
pub fn module_refs(spec: &WorkflowSpec) -> Vec<(String, Pos)> {
    let mut out = Vec::new();
    collect_calls(&spec.body, &mut out);
    for path in spec.config.registered_skills.values() {
        out.push((path.clone(), Pos::default()));
    }
    out
}

fn collect_calls(ops: &[Operation], out: &mut Vec<(String, Pos)>) {
    for op in ops {
        if let OpKind::Call(c) = &op.kind {
            out.push((c.module.clone(), op.span.start));
        }
        for (_, b) in op.kind.bodies() {
            collect_calls(b, out);
        }
    }
}
