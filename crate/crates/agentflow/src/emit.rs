//! Workflow spec back to YAML source. Strings are written as double-quoted
//! JSON literals and structured values in flow style, so every emitted file
//! reparses to the same spec.

use std::fmt::Write;

use agentflow_core::value::Value;
use agentflow_core::workflow::{OpKind, Operation, WorkflowSpec};

fn q(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn flow(v: &Value) -> String {
    serde_json::to_string(v).expect("values serialize")
}

pub fn emit_source(spec: &WorkflowSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "name: {}", q(&spec.name));
    if !spec.goal.is_empty() {
        let _ = writeln!(out, "goal: {}", q(&spec.goal));
    }
    let c = &spec.config;
    let mut cfg = Vec::new();
    if let Some(m) = &c.model {
        cfg.push(format!("model: {}", q(m)));
    }
    if let Some(t) = &c.enabled_tools {
        cfg.push(format!("enabled_tools: {}", flow(&Value::from(t.clone()))));
    }
    if let Some(n) = c.max_tool_calls_per_step {
        cfg.push(format!("max_tool_calls_per_step: {n}"));
    }
    if let Some(n) = c.max_tokens_per_step {
        cfg.push(format!("max_tokens_per_step: {n}"));
    }
    if !c.registered_skills.is_empty() {
        cfg.push("registered_skills:".into());
        for (k, v) in &c.registered_skills {
            cfg.push(format!("  {}: {}", q(k), q(v)));
        }
    }
    if let Some(p) = c.token_price {
        cfg.push(format!("token_price: {}", flow(&Value::from(p))));
    }
    if !cfg.is_empty() {
        out.push_str("config:\n");
        for line in cfg {
            let _ = writeln!(out, "  {line}");
        }
    }
    if !spec.parameters.is_empty() {
        out.push_str("parameters:\n");
        for (k, v) in &spec.parameters {
            let _ = writeln!(out, "  {}: {}", q(k), flow(v));
        }
    }
    out.push_str("workflow:\n");
    body(&mut out, &spec.body, 1);
    out
}

fn body(out: &mut String, ops: &[Operation], depth: usize) {
    for op in ops {
        operation(out, op, depth);
    }
}

fn operation(out: &mut String, op: &Operation, depth: usize) {
    let pad = "  ".repeat(depth);
    let field = "  ".repeat(depth + 2);
    let kw = op.kind.keyword();
    let name_line = |out: &mut String, name: &Option<String>| {
        if let Some(n) = name {
            let _ = writeln!(out, "{field}name: {}", q(n));
        }
    };
    match &op.kind {
        OpKind::Task(i) | OpKind::Step(i) => {
            let _ = writeln!(out, "{pad}- {kw}:");
            name_line(out, &i.name);
            let _ = writeln!(out, "{field}instruction: {}", q(i.instruction.raw()));
            if let Some(s) = &i.save_as {
                let _ = writeln!(out, "{field}save_as: {}", q(s));
            }
        }
        OpKind::If(o) => {
            let _ = writeln!(out, "{pad}- if:");
            name_line(out, &o.name);
            let _ = writeln!(out, "{field}condition: {}", q(o.condition.raw()));
            let _ = writeln!(out, "{field}then:");
            body(out, &o.then_ops, depth + 3);
            if !o.else_ops.is_empty() {
                let _ = writeln!(out, "{field}else:");
                body(out, &o.else_ops, depth + 3);
            }
        }
        OpKind::Switch(o) => {
            let _ = writeln!(out, "{pad}- switch:");
            name_line(out, &o.name);
            let _ = writeln!(out, "{field}subject: {}", q(o.subject.raw()));
            let _ = writeln!(out, "{field}cases:");
            for (lit, ops) in &o.cases {
                let _ = writeln!(out, "{field}  {}:", flow(lit));
                body(out, ops, depth + 4);
            }
            if let Some(d) = &o.default {
                let _ = writeln!(out, "{field}default:");
                body(out, d, depth + 3);
            }
        }
        OpKind::While(o) => {
            let _ = writeln!(out, "{pad}- while:");
            name_line(out, &o.name);
            let _ = writeln!(out, "{field}condition: {}", q(o.condition.raw()));
            if let Some(m) = o.max_iterations {
                let _ = writeln!(out, "{field}max_iterations: {m}");
            }
            let _ = writeln!(out, "{field}body:");
            body(out, &o.body, depth + 3);
        }
        OpKind::ForEach(o) => {
            let _ = writeln!(out, "{pad}- for_each:");
            name_line(out, &o.name);
            let _ = writeln!(out, "{field}items: {}", flow(&o.items));
            let _ = writeln!(out, "{field}item_name: {}", q(&o.item_name));
            let _ = writeln!(out, "{field}body:");
            body(out, &o.body, depth + 3);
        }
        OpKind::Call(c) => {
            let _ = writeln!(out, "{pad}- call:");
            name_line(out, &c.name);
            let _ = writeln!(out, "{field}module: {}", q(&c.module));
            if !c.parameters.is_empty() {
                let _ = writeln!(out, "{field}parameters: {}", flow(&Value::Object(c.parameters.clone())));
            }
            if let Some(s) = &c.save_as {
                let _ = writeln!(out, "{field}save_as: {}", q(s));
            }
        }
        OpKind::Parallel(p) => {
            let _ = writeln!(out, "{pad}- parallel:");
            name_line(out, &p.name);
            let _ = writeln!(out, "{field}branches:");
            for b in &p.branches {
                let _ = writeln!(out, "{field}  -");
                body(out, b, depth + 4);
            }
        }
        OpKind::Gather { save_as } => {
            let _ = writeln!(out, "{pad}- gather:");
            let _ = writeln!(out, "{field}save_as: {}", q(save_as));
        }
        OpKind::SetVariable { name, value } => {
            let _ = writeln!(out, "{pad}- set_variable:");
            let _ = writeln!(out, "{field}name: {}", q(name));
            let _ = writeln!(out, "{field}value: {}", flow(value));
        }
        OpKind::Increment { name, by } => {
            let _ = writeln!(out, "{pad}- increment:");
            let _ = writeln!(out, "{field}name: {}", q(name));
            let _ = writeln!(out, "{field}by: {by}");
        }
        OpKind::Input { prompt, save_as } => {
            let _ = writeln!(out, "{pad}- input:");
            let _ = writeln!(out, "{field}prompt: {}", q(prompt.raw()));
            let _ = writeln!(out, "{field}save_as: {}", q(save_as));
        }
        OpKind::Return { value } => {
            let _ = writeln!(out, "{pad}- return: {}", flow(value));
        }
    }
}
