//! Human-readable trace listing.

use agentflow_core::metrics::{group_thousands, totals_line, Totals};
use agentflow_core::trace::{Role, ToolStatus, TraceRecord};
use agentflow_core::value::Value;

const WIDTH: usize = 90;

fn clip(s: &str, n: usize) -> String {
    let one_line = s.replace('\n', " ");
    if one_line.chars().count() <= n {
        one_line
    } else {
        let head: String = one_line.chars().take(n).collect();
        format!("{head} ...")
    }
}

fn show(v: &Value) -> String {
    match v {
        Value::String(s) => format!("\"{}\"", clip(s, 60)),
        other => clip(&other.to_string(), 60),
    }
}

/// One block per record, then the totals line.
pub fn render_trace(records: &[TraceRecord], model: Option<&str>, totals: &Totals) -> String {
    let mut out = String::new();
    if let Some(m) = model {
        out.push_str(&format!("model: {m}\n\n"));
    }
    for r in records {
        let head = format!("Step {}: {}", r.step_id, r.label);
        let status = format!("[{}]", r.status.as_str());
        let pad = WIDTH.saturating_sub(head.len() + status.len()).max(1);
        out.push_str(&format!("{head}{}{status}\n", " ".repeat(pad)));
        if r.is_model_facing() {
            let keys: Vec<&str> = r.context.keys().map(String::as_str).collect();
            out.push_str(&format!("  context:  {{{}}}\n", keys.join(", ")));
            for m in r.transcript.iter().filter(|m| m.role == Role::Assistant) {
                for c in &m.tool_calls {
                    let args: Vec<String> =
                        c.arguments.iter().map(|(k, v)| format!("{k}={}", show(v))).collect();
                    let ok = match c.status {
                        ToolStatus::Ok => "ok",
                        ToolStatus::Error => "error",
                        ToolStatus::Pending => "pending",
                    };
                    out.push_str(&format!("  tool:     {}({}) -> {ok}\n", c.name, args.join(", ")));
                }
            }
        }
        for (k, v) in &r.writes {
            out.push_str(&format!("  output:   {k} = {}\n", show(v)));
        }
        if r.writes.is_empty() {
            if let Some(v) = r.output.as_ref().filter(|_| r.is_model_facing()) {
                out.push_str(&format!("  output:   {}\n", show(v)));
            }
        }
        if r.is_model_facing() {
            out.push_str(&format!("  tokens:   {}\n", group_thousands(r.usage.total)));
        }
        out.push('\n');
    }
    out.push_str(&totals_line(totals));
    out.push('\n');
    out
}
