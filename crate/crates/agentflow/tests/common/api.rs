//! In-process HTTP client for the service router.

use std::time::{Duration, Instant};

use agentflow::cli::Settings;
use agentflow::service::{router, AppState, RunHandle, RunState};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;

use super::fixture;

pub struct Api {
    _dir: tempfile::TempDir,
    pub app: Router,
}

impl Api {
    pub fn new() -> Api {
        let dir = tempfile::tempdir().unwrap();
        let settings = Settings { store: Some(dir.path().join("runs").display().to_string()), ..Default::default() };
        Api { app: router(AppState::new(settings)), _dir: dir }
    }

    pub async fn call(&self, method: &str, uri: &str, body: Option<Value>, headers: &[(&str, &str)]) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let body = match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        };
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes)
    }

    pub async fn json(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (s, b) = self.call(method, uri, body, &[]).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub async fn start(&self, workflow: &str, script: Option<&str>, extra: Value) -> RunHandle {
        let mut body = json!({"path": fixture(workflow)});
        if let Some(s) = script {
            body["mock"] = json!(fixture(s));
        } else {
            body["mock_script"] = json!("rules: []");
        }
        for (k, v) in extra.as_object().into_iter().flatten() {
            body[k] = v.clone();
        }
        let (s, v) = self.json("POST", "/runs", Some(body)).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        serde_json::from_value(v).unwrap()
    }

    pub async fn run(&self, id: &str) -> RunHandle {
        let (s, v) = self.json("GET", &format!("/runs/{id}"), None).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        serde_json::from_value(v).unwrap()
    }

    pub async fn wait_for(&self, id: &str, done: impl Fn(RunState) -> bool) -> RunHandle {
        let t = Instant::now();
        loop {
            let h = self.run(id).await;
            if done(h.status) {
                return h;
            }
            assert!(t.elapsed() < Duration::from_secs(20), "run {id} stuck in {:?}", h.status);
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }
}

/// (id, event kind) pairs from an SSE body.
pub fn sse(body: &[u8]) -> Vec<(u64, String)> {
    let text = String::from_utf8_lossy(body);
    let mut out = Vec::new();
    for block in text.split("\n\n") {
        let mut id = None;
        let mut kind = String::new();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("id: ").or_else(|| line.strip_prefix("id:")) {
                id = v.trim().parse().ok();
            } else if let Some(v) = line.strip_prefix("event: ").or_else(|| line.strip_prefix("event:")) {
                kind = v.trim().to_string();
            }
        }
        if let Some(id) = id {
            out.push((id, kind));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub enum Op {
    StartAsk,
    StartQuick,
    Answer(usize),
    Cancel(usize),
    Resume(usize),
    Get(usize),
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::StartAsk),
        Just(Op::StartQuick),
        (0usize..4).prop_map(Op::Answer),
        (0usize..4).prop_map(Op::Cancel),
        (0usize..4).prop_map(Op::Resume),
        (0usize..4).prop_map(Op::Get),
    ]
}

pub fn legal(h: &RunHandle) -> bool {
    h.history.first() == Some(&RunState::Queued)
        && h.history.windows(2).all(|w| w[0].can_move_to(w[1]))
        && h.history.last() == Some(&h.status)
}

pub async fn drive(ops: Vec<Op>) -> Result<(), String> {
    let api = Api::new();
    let mut ids: Vec<String> = Vec::new();
    let pick = |ids: &[String], k: usize| (!ids.is_empty()).then(|| ids[k % ids.len()].clone());
    for op in ops {
        let (code, id) = match op {
            Op::StartAsk => {
                let h = api.start("ask_user.yaml", Some("ask_user.script.yaml"), json!({})).await;
                ids.push(h.run_id.clone());
                (StatusCode::CREATED, h.run_id)
            }
            Op::StartQuick => {
                let h = api.start("three_step.yaml", Some("three_step.script.yaml"), json!({})).await;
                ids.push(h.run_id.clone());
                (StatusCode::CREATED, h.run_id)
            }
            Op::Answer(k) | Op::Cancel(k) | Op::Resume(k) | Op::Get(k) => {
                let Some(id) = pick(&ids, k) else { continue };
                let before = api.run(&id).await.status;
                let (s, v) = match op {
                    Op::Answer(_) => api.json("POST", &format!("/runs/{id}/input"), Some(json!({"value": "x"}))).await,
                    Op::Cancel(_) => api.json("POST", &format!("/runs/{id}/cancel"), None).await,
                    Op::Resume(_) => api.json("POST", &format!("/runs/{id}/resume"), None).await,
                    _ => api.json("GET", &format!("/runs/{id}"), None).await,
                };
                if let Op::Resume(_) = op {
                    if s == StatusCode::CREATED {
                        ids.push(v["run_id"].as_str().unwrap().to_string());
                    } else if matches!(before, RunState::Interrupted | RunState::Failed) {
                        return Err(format!("resume of {before:?} run refused: {v}"));
                    }
                }
                // A terminal run never accepts input or cancellation.
                if before.is_terminal() && matches!(op, Op::Answer(_) | Op::Cancel(_)) && s != StatusCode::CONFLICT {
                    return Err(format!("{op:?} on {before:?} run returned {s}"));
                }
                (s, id)
            }
        };
        if code.is_server_error() {
            return Err(format!("{id}: {code}"));
        }
        for id in &ids {
            let h = api.run(id).await;
            if !legal(&h) {
                return Err(format!("{id}: {:?}", h.history));
            }
        }
    }
    // Let everything settle; parked runs are cancelled.
    for id in &ids {
        let h = api.wait_for(id, |s| s.is_terminal() || s == RunState::WaitingInput).await;
        if h.status == RunState::WaitingInput {
            api.json("POST", &format!("/runs/{id}/cancel"), None).await;
        }
        let h = api.wait_for(id, RunState::is_terminal).await;
        if !legal(&h) {
            return Err(format!("{id}: {:?}", h.history));
        }
    }
    Ok(())
}

