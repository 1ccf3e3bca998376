//! Accounting rules and comparison reports: token totals, estimated
//! compute, latency, peak memory, and suspension counts across runs.

use serde::{Deserialize, Serialize};

use crate::output::RunDocument;

/// The shared backbone model, for compute estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub parameter_count: u64,
}

impl BackboneSpec {
    pub fn new(name: impl Into<String>, parameter_count: u64) -> Self {
        BackboneSpec {
            name: name.into(),
            parameter_count,
        }
    }
}

/// Estimated compute in teraFLOPs: two FLOPs per parameter per token.
pub fn tflops(tokens_total: u64, parameter_count: u64) -> f64 {
    2.0 * parameter_count as f64 * tokens_total as f64 / 1e12
}

/// A rendered comparison table with a totals row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub totals: Vec<String>,
}

/// Column names are frozen by a golden-file test; changing them is a
/// format break.
pub const REPORT_COLUMNS: [&str; 9] = [
    "run",
    "status",
    "acc_proxy",
    "tokens_total",
    "tflops",
    "latency_seconds",
    "peak_memory_bytes",
    "suspensions",
    "mode",
];

/// Aggregates labeled run documents into a comparison table.
///
/// The accuracy column is a grader proxy (exact match against the
/// supplied answer key), never a benchmark claim; rows are labeled with
/// the expert mode that produced them so simulated and measured latencies
/// are not conflated.
pub fn aggregate(
    runs: &[(String, &RunDocument)],
    answer_key: Option<&std::collections::BTreeMap<String, String>>,
) -> ReportTable {
    let header: Vec<String> = REPORT_COLUMNS.iter().map(|c| c.to_string()).collect();
    let mut rows = Vec::new();
    let mut total_tokens: u64 = 0;
    let mut total_tflops = 0.0;
    let mut total_latency = 0.0;
    let mut total_suspensions: u64 = 0;
    let mut peak: u64 = 0;

    for (label, doc) in runs {
        let m = &doc.result.metrics;
        let acc = match answer_key {
            Some(key) => match (key.get(&doc.query), &doc.result.answer) {
                (Some(expected), Some(answer)) => {
                    if expected.trim() == answer.trim() {
                        "1.000".to_string()
                    } else {
                        "0.000".to_string()
                    }
                }
                (Some(_), None) => "0.000".to_string(),
                (None, _) => "-".to_string(),
            },
            None => "-".to_string(),
        };
        let mode = format!("{:?}", doc.config.experts.mode).to_lowercase();
        rows.push(vec![
            label.clone(),
            format!("{:?}", doc.result.status).to_uppercase(),
            acc,
            m.tokens_total.to_string(),
            format_float(m.tflops),
            format_float(m.latency_seconds),
            m.peak_memory_bytes.to_string(),
            m.suspensions.to_string(),
            mode,
        ]);
        total_tokens += m.tokens_total;
        total_tflops += m.tflops;
        total_latency += m.latency_seconds;
        total_suspensions += u64::from(m.suspensions);
        peak = peak.max(m.peak_memory_bytes);
    }

    let totals = vec![
        "TOTAL".to_string(),
        "-".to_string(),
        "-".to_string(),
        total_tokens.to_string(),
        format_float(total_tflops),
        format_float(total_latency),
        peak.to_string(),
        total_suspensions.to_string(),
        "-".to_string(),
    ];
    ReportTable {
        header,
        rows,
        totals,
    }
}

fn format_float(v: f64) -> String {
    format!("{v:.3}")
}

impl ReportTable {
    /// CSV rendering; byte-stable for a given input.
    pub fn render_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        if !self.rows.is_empty() {
            out.push_str(&self.totals.join(","));
            out.push('\n');
        }
        out
    }

    /// Aligned-text rendering; byte-stable for a given input.
    pub fn render_text(&self) -> String {
        let mut all: Vec<&Vec<String>> = vec![&self.header];
        all.extend(self.rows.iter());
        if !self.rows.is_empty() {
            all.push(&self.totals);
        }
        let columns = self.header.len();
        let mut widths = vec![0usize; columns];
        for row in &all {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.len());
            }
        }
        let mut out = String::new();
        for (line, row) in all.iter().enumerate() {
            let rendered: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, cell)| format!("{cell:<width$}", width = widths[i]))
                .collect();
            out.push_str(rendered.join("  ").trim_end());
            out.push('\n');
            if line == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(rule.join("  ").trim_end());
                out.push('\n');
            }
        }
        out
    }
}
