//! Model backends: the capability the executor talks to, a scripted test
//! double and an OpenAI-compatible HTTP client.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use agentflow_core::step_id::StepId;
use agentflow_core::trace::{Message, Role, ToolCall, ToolStatus, Usage};
use agentflow_core::value::{Map, Value};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parse::yaml_to_value;

/// Tool descriptor handed to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    /// JSON Schema of the arguments object.
    pub parameters: Value,
}

/// Everything a backend may look at for one completion.
#[derive(Debug, Clone, Copy)]
pub struct ModelRequest<'a> {
    pub step_id: &'a StepId,
    /// Label of the operation (its `name`, or the keyword).
    pub step_name: &'a str,
    /// Resolved instruction of the current step.
    pub instruction: &'a str,
    pub messages: &'a [Message],
    pub tools: &'a [ToolSchema],
    pub model: &'a str,
    pub max_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub message: Message,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    /// Network or server-side failure; retried.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Format(String),
    #[error("no script rule matches step {step_id} ({step_name}); instruction: {instruction}")]
    NoMatch { step_id: String, step_name: String, instruction: String },
    #[error("script rule {rule} has no response left for step {step_id}")]
    ScriptExhausted { rule: usize, step_id: String },
}

impl BackendError {
    pub fn retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, req: &ModelRequest<'_>) -> Result<ModelResponse, BackendError>;

    /// Deterministic backends are never retried.
    fn deterministic(&self) -> bool {
        false
    }
}

// ---------------------------------------------------------------------------
// Scripted mock

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    #[serde(default, rename = "match")]
    pub matcher: Matcher,
    pub responses: Vec<ScriptedResponse>,
}

/// All present fields must hold. An empty matcher matches every request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matcher {
    /// Operation label (`name:` of the step).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_id: Option<String>,
    /// Substring of the resolved instruction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    /// 0-based position of the request among all requests this backend served.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedResponse {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub tool_calls: Vec<ScriptedCall>,
    #[serde(default)]
    pub usage: ScriptedUsage,
    #[serde(default)]
    pub delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedCall {
    pub name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedUsage {
    #[serde(default)]
    pub prompt: u64,
    #[serde(default)]
    pub completion: u64,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Yaml(#[from] crate::parse::ParseError),
    #[error("invalid script: {0}")]
    Schema(String),
}

impl Script {
    pub fn from_yaml(source: &str, origin: &str) -> Result<Script, ScriptError> {
        let v = yaml_to_value(source, origin)?;
        serde_json::from_value(v).map_err(|e| ScriptError::Schema(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Script, ScriptError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| ScriptError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_yaml(&src, &path.display().to_string())
    }
}

impl Matcher {
    fn matches(&self, req: &ModelRequest<'_>, index: usize) -> bool {
        self.step.as_deref().is_none_or(|s| s == req.step_name)
            && self.step_id.as_deref().is_none_or(|s| s == req.step_id.to_string())
            && self.instruction.as_deref().is_none_or(|s| req.instruction.contains(s))
            && self.index.is_none_or(|i| i == index)
    }
}

/// Serves script responses in order. The response cursor is kept per rule and
/// step id, so a step sees the same responses however many other steps ran
/// before it (resume and replay depend on this).
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    cursors: Mutex<(usize, HashMap<(usize, String), usize>)>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        ScriptedBackend { script, cursors: Mutex::new((0, HashMap::new())), calls: AtomicUsize::new(0) }
    }

    /// Completions requested so far, including failed ones.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&self, req: &ModelRequest<'_>) -> Result<ModelResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let sid = req.step_id.to_string();
        let (rule_ix, resp) = {
            let mut guard = self.cursors.lock().expect("script lock");
            let (served, cursors) = &mut *guard;
            let index = *served;
            *served += 1;
            let Some(rule_ix) = self.script.rules.iter().position(|r| r.matcher.matches(req, index)) else {
                return Err(BackendError::NoMatch {
                    step_id: sid,
                    step_name: req.step_name.to_string(),
                    instruction: req.instruction.to_string(),
                });
            };
            let cursor = cursors.entry((rule_ix, sid.clone())).or_insert(0);
            let Some(resp) = self.script.rules[rule_ix].responses.get(*cursor) else {
                return Err(BackendError::ScriptExhausted { rule: rule_ix, step_id: sid });
            };
            *cursor += 1;
            (rule_ix, resp.clone())
        };
        if resp.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(resp.delay_ms));
        }
        let turn = req.messages.iter().filter(|m| m.role == Role::Assistant).count();
        let calls = resp
            .tool_calls
            .iter()
            .enumerate()
            .map(|(i, c)| ToolCall {
                id: format!("call_{sid}_{rule_ix}_{turn}_{i}"),
                name: c.name.clone(),
                arguments: c.arguments.clone(),
                result: None,
                status: ToolStatus::Pending,
            })
            .collect();
        Ok(ModelResponse {
            message: Message::assistant(resp.text, calls),
            usage: Usage::new(resp.usage.prompt, resp.usage.completion),
        })
    }

    fn deterministic(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// OpenAI-compatible chat completions

#[derive(Debug, Clone)]
pub struct OpenAiBackend {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: Option<String>) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .expect("http client");
        OpenAiBackend { base_url: base_url.into(), api_key, model, client }
    }

    pub fn request_body(&self, req: &ModelRequest<'_>) -> Value {
        let messages: Vec<Value> = req.messages.iter().map(wire_message).collect();
        let mut body = serde_json::json!({
            "model": self.model.as_deref().unwrap_or(req.model),
            "messages": messages,
        });
        if !req.tools.is_empty() {
            body["tools"] = req
                .tools
                .iter()
                .map(|t| {
                    serde_json::json!({"type": "function", "function": {
                        "name": t.name, "description": t.description, "parameters": t.parameters}})
                })
                .collect();
        }
        if let Some(n) = req.max_tokens {
            body["max_tokens"] = n.into();
        }
        body
    }
}

fn wire_message(m: &Message) -> Value {
    let role = match m.role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    };
    let mut v = serde_json::json!({"role": role, "content": m.content});
    if !m.tool_calls.is_empty() {
        v["tool_calls"] = m
            .tool_calls
            .iter()
            .map(|c| {
                serde_json::json!({"id": c.id, "type": "function", "function": {
                    "name": c.name, "arguments": Value::Object(c.arguments.clone()).to_string()}})
            })
            .collect();
    }
    if let Some(id) = &m.tool_call_id {
        v["tool_call_id"] = id.clone().into();
    }
    v
}

/// Decode a chat-completions response body.
pub fn parse_completion(body: &Value) -> Result<ModelResponse, BackendError> {
    let msg = body
        .pointer("/choices/0/message")
        .ok_or_else(|| BackendError::Format("missing choices[0].message".into()))?;
    let content = msg.get("content").and_then(Value::as_str).unwrap_or_default().to_string();
    let mut calls = Vec::new();
    for c in msg.get("tool_calls").and_then(Value::as_array).into_iter().flatten() {
        let id = c.get("id").and_then(Value::as_str).unwrap_or_default().to_string();
        let name = c
            .pointer("/function/name")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Format("tool call without a function name".into()))?
            .to_string();
        let raw = c.pointer("/function/arguments").and_then(Value::as_str).unwrap_or("{}");
        let arguments = match serde_json::from_str::<Value>(if raw.trim().is_empty() { "{}" } else { raw }) {
            Ok(Value::Object(m)) => m,
            _ => return Err(BackendError::Format(format!("arguments of `{name}` are not a JSON object"))),
        };
        calls.push(ToolCall { id, name, arguments, result: None, status: ToolStatus::Pending });
    }
    let n = |p: &str| body.pointer(p).and_then(Value::as_u64).unwrap_or(0);
    Ok(ModelResponse {
        message: Message::assistant(content, calls),
        usage: Usage::new(n("/usage/prompt_tokens"), n("/usage/completion_tokens")),
    })
}

impl ModelBackend for OpenAiBackend {
    fn complete(&self, req: &ModelRequest<'_>) -> Result<ModelResponse, BackendError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut rb = self.client.post(url).json(&self.request_body(req));
        if let Some(k) = &self.api_key {
            rb = rb.bearer_auth(k);
        }
        let resp = rb.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport(format!("{status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Format(format!("{status}: {text}")));
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| BackendError::Format(e.to_string()))?;
        parse_completion(&body)
    }
}
