//! Answers for `input` operations.

use std::collections::BTreeMap;
use std::io::{BufRead, IsTerminal, Write};
use std::sync::Mutex;

use agentflow_core::step_id::StepId;
use agentflow_core::value::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InputError {
    #[error("no answer available for input `{0}`")]
    Unavailable(String),
    #[error("cancelled while waiting for input")]
    Cancelled,
}

pub trait InputChannel: Sync {
    /// `key` is the `save_as` target.
    fn ask(&self, step_id: &StepId, key: &str, prompt: &str) -> Result<Value, InputError>;
}

/// Pre-supplied answers, looked up by step id first, then by `save_as`.
/// Each key may map to a list, consumed one answer per question.
#[derive(Debug, Default)]
pub struct Answers {
    map: Mutex<BTreeMap<String, Vec<Value>>>,
}

impl Answers {
    pub fn new(answers: serde_json::Map<String, Value>) -> Self {
        let map = answers
            .into_iter()
            .map(|(k, v)| match v {
                Value::Array(items) => (k, items),
                other => (k, vec![other]),
            })
            .collect();
        Answers { map: Mutex::new(map) }
    }

    fn take(&self, key: &str) -> Option<Value> {
        let mut g = self.map.lock().expect("answers lock");
        let list = g.get_mut(key)?;
        match list.len() {
            0 => None,
            1 => Some(list[0].clone()),
            _ => Some(list.remove(0)),
        }
    }
}

impl InputChannel for Answers {
    fn ask(&self, step_id: &StepId, key: &str, _prompt: &str) -> Result<Value, InputError> {
        self.take(&step_id.to_string())
            .or_else(|| self.take(key))
            .ok_or_else(|| InputError::Unavailable(key.to_string()))
    }
}

/// Answers file first, then a prompt, but only when stdin is a terminal so
/// unattended runs fail instead of blocking.
pub struct Interactive {
    pub answers: Answers,
}

impl InputChannel for Interactive {
    fn ask(&self, step_id: &StepId, key: &str, prompt: &str) -> Result<Value, InputError> {
        if let Ok(v) = self.answers.ask(step_id, key, prompt) {
            return Ok(v);
        }
        if !std::io::stdin().is_terminal() {
            return Err(InputError::Unavailable(key.to_string()));
        }
        let mut err = std::io::stderr();
        let _ = write!(err, "{prompt}\n> ");
        let _ = err.flush();
        let mut line = String::new();
        match std::io::stdin().lock().read_line(&mut line) {
            Ok(n) if n > 0 => Ok(Value::String(line.trim_end_matches(['\r', '\n']).to_string())),
            _ => Err(InputError::Unavailable(key.to_string())),
        }
    }
}
