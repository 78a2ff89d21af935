//! Random nesting of control ops, emitted as workflow text.

use std::path::Path;

use agentflow::clock::FixedClock;
use agentflow::events::{EventKind, EventLog};
use agentflow::interpreter::RunStatus;
use agentflow::store::MemoryStore;
use agentflow_core::step_id::StepId;
use agentflow_core::value::Map;
use proptest::prelude::*;

use super::Rig;

#[derive(Debug, Clone)]
pub enum Shape {
    Leaf,
    If(bool, Vec<Shape>, Vec<Shape>),
    Each(u8, Vec<Shape>),
    While(u8, Vec<Shape>),
}

pub fn shape() -> impl Strategy<Value = Shape> {
    let leaf = Just(Shape::Leaf);
    leaf.prop_recursive(4, 24, 3, |inner| {
        let body = prop::collection::vec(inner, 1..3);
        prop_oneof![
            (any::<bool>(), body.clone(), body.clone()).prop_map(|(c, t, e)| Shape::If(c, t, e)),
            (0u8..3, body.clone()).prop_map(|(n, b)| Shape::Each(n, b)),
            (0u8..3, body).prop_map(|(n, b)| Shape::While(n, b)),
        ]
    })
}

pub fn emit(ops: &[Shape], depth: usize, counter: &mut u32, out: &mut String) {
    let pad = "  ".repeat(depth);
    for op in ops {
        *counter += 1;
        let k = *counter;
        match op {
            Shape::Leaf => out.push_str(&format!("{pad}- set_variable: {{name: v{k}, value: {k}}}\n")),
            Shape::If(c, t, e) => {
                out.push_str(&format!("{pad}- if:\n{pad}    condition: \"{c}\"\n{pad}    then:\n"));
                emit(t, depth + 3, counter, out);
                out.push_str(&format!("{pad}    else:\n"));
                emit(e, depth + 3, counter, out);
            }
            Shape::Each(n, b) => {
                let items: Vec<String> = (0..*n).map(|i| i.to_string()).collect();
                out.push_str(&format!("{pad}- for_each:\n{pad}    items: [{}]\n{pad}    body:\n", items.join(", ")));
                emit(b, depth + 3, counter, out);
            }
            Shape::While(n, b) => {
                out.push_str(&format!("{pad}- set_variable: {{name: w{k}, value: 0}}\n"));
                out.push_str(&format!("{pad}- while:\n{pad}    condition: \"w{k} < {n}\"\n{pad}    body:\n"));
                out.push_str(&format!("{pad}      - increment: w{k}\n"));
                emit(b, depth + 3, counter, out);
            }
        }
    }
}

/// Runs the nested workflow and checks that StepStarted ids strictly
/// increase and match the record ids one for one.
pub fn check_step_order(body: &[Shape], dir: &Path) -> Result<(), String> {
    let mut text = String::from("name: nested\nworkflow:\n");
    emit(body, 1, &mut 0, &mut text);
    let p = dir.join("nested.yaml");
    std::fs::write(&p, &text).unwrap();
    let rig = Rig::new(None);
    let spec = rig.loader.load_path(&p).unwrap().spec.clone();
    let log = EventLog::new("r", Box::new(FixedClock));
    let mut store = MemoryStore::new();
    let out = rig.run_spec(spec, Map::new(), dir, &mut store, None, Vec::new(), &log);
    if out.status != RunStatus::Completed {
        return Err(format!("{:?}: {:?}", out.status, out.error));
    }
    let started: Vec<StepId> =
        log.all().into_iter().filter(|e| e.kind == EventKind::StepStarted).filter_map(|e| e.step_id).collect();
    if let Some(w) = started.windows(2).find(|w| w[0] >= w[1]) {
        return Err(format!("{} then {}", w[0], w[1]));
    }
    let mut rec: Vec<StepId> = store.records.iter().map(|r| r.step_id.clone()).collect();
    rec.sort();
    if rec != started {
        return Err(format!("records {rec:?} vs started {started:?}"));
    }
    Ok(())
}
