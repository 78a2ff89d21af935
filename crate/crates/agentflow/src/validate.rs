//! Whole-bundle validation: document checks plus everything that needs the
//! file system (module resolution, call cycles, skill tool allowlists).

use std::collections::BTreeSet;

use agentflow_core::analysis::{check_workflow, Diagnostic};
use agentflow_core::workflow::{Span, WorkflowSpec};

use crate::loader::{canonical_origin, module_refs, LoadError, Loader};

pub fn validate_workflow(spec: &WorkflowSpec, loader: &Loader) -> Vec<Diagnostic> {
    let mut out = check_workflow(spec);
    let mut seen = BTreeSet::new();
    modules(spec, loader, &mut vec![canonical_origin(&spec.origin)], &mut seen, &mut out);
    skills(spec, loader, &mut out);
    out
}

fn at(pos: agentflow_core::workflow::Pos) -> Option<Span> {
    (pos.line > 0).then_some(Span { start: pos, end: pos })
}

fn modules(
    spec: &WorkflowSpec,
    loader: &Loader,
    stack: &mut Vec<String>,
    seen: &mut BTreeSet<String>,
    out: &mut Vec<Diagnostic>,
) {
    for (module, pos) in module_refs(spec) {
        match loader.resolve_call(stack, &spec.origin, &module) {
            Ok(loaded) => {
                let key = loaded.path.display().to_string();
                if !seen.insert(key.clone()) {
                    continue;
                }
                for d in check_workflow(&loaded.spec).into_iter().filter(Diagnostic::is_error) {
                    out.push(Diagnostic { message: format!("in {module}: {}", d.message), ..d });
                }
                stack.push(key);
                modules(&loaded.spec, loader, stack, seen, out);
                stack.pop();
            }
            Err(LoadError::NotFound { path }) => out.push(Diagnostic::error(
                "unresolvable-module",
                format!("unresolvable module `{module}` (looked for {path})"),
                at(pos),
            )),
            Err(e @ LoadError::Cycle { .. }) => out.push(Diagnostic::error("call-cycle", e.to_string(), at(pos))),
            Err(e) => out.push(Diagnostic::error("module-error", format!("in {module}: {e}"), at(pos))),
        }
    }
}

/// A skill may only use tools its host enables.
fn skills(spec: &WorkflowSpec, loader: &Loader, out: &mut Vec<Diagnostic>) {
    let Some(host) = &spec.config.enabled_tools else {
        return;
    };
    for (name, path) in &spec.config.registered_skills {
        let Ok(loaded) = loader.resolve_module(&spec.origin, path) else {
            continue;
        };
        for tool in loaded.spec.config.enabled_tools.iter().flatten() {
            if !host.contains(tool) {
                out.push(Diagnostic::error(
                    "skill-tool-disabled",
                    format!("skill `{name}` uses tool `{tool}`, which is not in enabled_tools"),
                    None,
                ));
            }
        }
    }
}
