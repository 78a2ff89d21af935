//! Token and cost totals.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::trace::{TraceRecord, Usage};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub usage: Usage,
    pub cost: f64,
}

/// Componentwise sum of record usages, priced per 1k tokens.
pub fn aggregate_metrics<'a>(records: impl IntoIterator<Item = &'a TraceRecord>, token_price: f64) -> Totals {
    let usage = records.into_iter().fold(Usage::default(), |acc, r| acc + r.usage);
    Totals { usage, cost: cost_of(usage.total, token_price) }
}

pub fn cost_of(total_tokens: u64, token_price: f64) -> f64 {
    total_tokens as f64 / 1000.0 * token_price
}

/// Dollar amount rounded to a tenth of a cent; the third decimal is shown
/// only when it is non-zero (`$0.025`, `$0.00`, `$1.50`).
pub fn format_cost(cost: f64) -> String {
    let mills = libm_round(cost * 1000.0) as i64;
    let dollars = mills / 1000;
    let frac = (mills % 1000).abs();
    if frac % 10 == 0 {
        format!("${}.{:02}", dollars, frac / 10)
    } else {
        format!("${}.{:03}", dollars, frac)
    }
}

fn libm_round(x: f64) -> f64 {
    // core has no f64::round without std.
    let t = x as i64 as f64;
    let diff = x - t;
    if diff >= 0.5 {
        t + 1.0
    } else if diff <= -0.5 {
        t - 1.0
    } else {
        t
    }
}

/// `1234567` -> `1,234,567`.
pub fn group_thousands(n: u64) -> String {
    let digits = format!("{n}");
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// `Workflow total: 58,993 tokens | Cost: $0.025`
pub fn totals_line(t: &Totals) -> String {
    format!("Workflow total: {} tokens | Cost: {}", group_thousands(t.usage.total), format_cost(t.cost))
}
