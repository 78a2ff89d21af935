//! The model/tool loop behind `task` and `step`.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use agentflow_core::step_id::StepId;
use agentflow_core::trace::{Message, Role, ToolStatus, Usage};
use agentflow_core::value::{render_text, Map, Value};
use agentflow_core::workflow::EffectiveConfig;
use serde_json::json;
use thiserror::Error;

use crate::backend::{BackendError, ModelBackend, ModelRequest, ToolSchema};
use crate::events::{EventKind, Observer};
use crate::tools::{ToolContext, ToolError, ToolRegistry};

/// Content of the tool message for calls past the per-step limit.
pub const LIMIT_FILLER: &str = "limit reached; not executed";

pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Fresh conversation.
    Task,
    /// Appends to the module conversation.
    Step,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("tool refused: {0}")]
    Refused(ToolError),
    #[error("cancelled")]
    Cancelled,
}

/// Which limit stopped the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitHit {
    ToolCalls(u32),
    Tokens(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub output: Value,
    /// Messages this step added to its conversation.
    pub transcript: Vec<Message>,
    pub usage: Usage,
    pub turns: u32,
    pub tool_calls: u32,
    pub limit: Option<LimitHit>,
}

/// Runs registered skills (sub-workflows exposed as tools).
pub trait SkillRunner: Sync {
    fn schemas(&self) -> Vec<ToolSchema>;
    fn is_skill(&self, name: &str) -> bool;
    fn run_skill(&self, name: &str, args: &Map<String, Value>, step: &StepId, invocation: u32) -> Result<Value, String>;
}

pub struct Executor<'a> {
    pub backend: &'a dyn ModelBackend,
    pub tools: &'a dyn ToolRegistry,
    pub workspace: &'a Path,
    pub observer: &'a dyn Observer,
    pub skills: Option<&'a dyn SkillRunner>,
    pub cancel: &'a CancelToken,
    /// First retry delay; doubles per attempt.
    pub backoff: Duration,
}

pub struct StepRequest<'a> {
    pub kind: StepKind,
    pub step_id: &'a StepId,
    pub label: &'a str,
    pub goal: &'a str,
    pub instruction: &'a str,
    pub config: &'a EffectiveConfig,
}

/// Trim and map the literal `None` to null.
pub fn normalize_output(text: &str) -> Value {
    let t = text.trim();
    if t == "None" {
        Value::Null
    } else {
        Value::String(t.to_string())
    }
}

impl Executor<'_> {
    /// Tools offered to the model for this config.
    pub fn offered_tools(&self, config: &EffectiveConfig) -> Vec<ToolSchema> {
        let mut out: Vec<ToolSchema> =
            self.tools.schemas().into_iter().filter(|s| config.tool_enabled(&s.name)).collect();
        if let Some(sk) = self.skills {
            out.extend(sk.schemas());
        }
        out
    }

    /// `conversation` is the module conversation for `Step`; for `Task` it is
    /// ignored and a fresh one is used.
    pub fn run_step(&self, req: &StepRequest<'_>, conversation: &mut Vec<Message>) -> Result<StepResult, ExecError> {
        let mut fresh = Vec::new();
        let conv: &mut Vec<Message> = match req.kind {
            StepKind::Task => &mut fresh,
            StepKind::Step => conversation,
        };
        let start = conv.len();
        if conv.is_empty() && !req.goal.trim().is_empty() {
            conv.push(Message::system(req.goal));
        }
        conv.push(Message::user(req.instruction));
        let tools = self.offered_tools(req.config);
        let max_calls = req.config.max_tool_calls_per_step;
        let mut usage = Usage::default();
        let mut executed = 0u32;
        let mut turns = 0u32;
        let mut limit = None;
        let mut invocations = 0u32;
        loop {
            if self.cancel.is_cancelled() {
                return Err(ExecError::Cancelled);
            }
            let mreq = ModelRequest {
                step_id: req.step_id,
                step_name: req.label,
                instruction: req.instruction,
                messages: conv,
                tools: &tools,
                model: &req.config.model,
                max_tokens: req.config.max_tokens_per_step,
            };
            let resp = self.complete(&mreq)?;
            turns += 1;
            usage += resp.usage;
            let mut msg = resp.message;
            self.observer.event(
                Some(req.step_id),
                EventKind::ModelTurn,
                json!({"turn": turns, "content": msg.content, "tool_calls": msg.tool_calls.len(),
                       "usage": resp.usage}),
            );
            if msg.tool_calls.is_empty() {
                conv.push(msg);
                break;
            }
            let mut results = Vec::new();
            for call in msg.tool_calls.iter_mut() {
                if executed >= max_calls {
                    limit = Some(LimitHit::ToolCalls(max_calls));
                    call.status = ToolStatus::Error;
                    results.push(Message::tool(&call.id, LIMIT_FILLER, ToolStatus::Error));
                    continue;
                }
                executed += 1;
                let outcome = if self.skills.is_some_and(|s| s.is_skill(&call.name)) {
                    invocations += 1;
                    self.skills
                        .expect("checked")
                        .run_skill(&call.name, &call.arguments, req.step_id, invocations)
                        .map_err(|m| ToolError::Failed { tool: call.name.clone(), message: m })
                } else {
                    let cx = ToolContext {
                        workspace: self.workspace,
                        enabled: req.config.enabled_tools.as_deref(),
                    };
                    self.tools.invoke(&call.name, &call.arguments, &cx)
                };
                let (content, status) = match &outcome {
                    Ok(v) => (render_text(v), ToolStatus::Ok),
                    Err(e) if e.is_refusal() => {
                        self.observer.event(
                            Some(req.step_id),
                            EventKind::ToolCall,
                            json!({"name": call.name, "arguments": call.arguments, "status": "refused"}),
                        );
                        return Err(ExecError::Refused(e.clone()));
                    }
                    Err(e) => (format!("error: {e}"), ToolStatus::Error),
                };
                call.status = status;
                call.result = Some(match outcome {
                    Ok(v) => v,
                    Err(e) => Value::String(e.to_string()),
                });
                self.observer.event(
                    Some(req.step_id),
                    EventKind::ToolCall,
                    json!({"name": call.name, "arguments": call.arguments,
                           "status": if status == ToolStatus::Ok { "ok" } else { "error" }}),
                );
                results.push(Message::tool(&call.id, content, status));
            }
            conv.push(msg);
            conv.extend(results);
            if limit.is_none() {
                if let Some(max) = req.config.max_tokens_per_step {
                    if usage.total >= max {
                        limit = Some(LimitHit::Tokens(max));
                    }
                }
            }
            if limit.is_some() {
                break;
            }
        }
        let transcript = conv[start..].to_vec();
        let last_text = conv[start..]
            .iter()
            .rev()
            .find(|m| m.role == Role::Assistant && !m.content.trim().is_empty())
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let output = normalize_output(last_text);
        if let Some(hit) = limit {
            let payload = match hit {
                LimitHit::ToolCalls(n) => json!({"limit": "max_tool_calls_per_step", "value": n}),
                LimitHit::Tokens(n) => json!({"limit": "max_tokens_per_step", "value": n}),
            };
            self.observer.event(Some(req.step_id), EventKind::Limit, payload);
        }
        Ok(StepResult { output, transcript, usage, turns, tool_calls: executed, limit })
    }

    fn complete(&self, req: &ModelRequest<'_>) -> Result<crate::backend::ModelResponse, ExecError> {
        let attempts = if self.backend.deterministic() { 1 } else { MAX_ATTEMPTS };
        let mut delay = self.backoff;
        let mut attempt = 1;
        loop {
            match self.backend.complete(req) {
                Ok(r) => return Ok(r),
                Err(e) if e.retryable() && attempt < attempts => {
                    log::warn!("backend attempt {attempt} failed: {e}; retrying");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}
