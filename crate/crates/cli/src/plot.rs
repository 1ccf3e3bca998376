//! Static chart artifacts for recorded runs: delimited memory traces and
//! token breakdowns, plus small self-contained SVG renderings of each.

use anyhow::Context;
use regraft::adapter::{memory_trace_for, MemoryTraceRow};
use regraft::output::RunDocument;

fn trace_rows(doc: &RunDocument) -> anyhow::Result<Vec<MemoryTraceRow>> {
    let scheduler = doc
        .config
        .scheduler()
        .context("config cannot rebuild the adapter registry")?;
    Ok(memory_trace_for(&doc.result.switch_log, scheduler.model()))
}

/// Per-event rows: timestamp, resident module, footprint bytes.
pub fn memory_trace_csv(doc: &RunDocument) -> anyhow::Result<String> {
    let mut out = String::from("timestamp_seconds,loaded_module,footprint_bytes\n");
    for row in trace_rows(doc)? {
        out.push_str(&format!(
            "{:.9},{},{}\n",
            row.at, row.module, row.footprint_bytes
        ));
    }
    Ok(out)
}

/// Step chart of the resident footprint over the run, with the peak
/// bound drawn as a reference line.
pub fn memory_trace_svg(doc: &RunDocument) -> anyhow::Result<String> {
    let rows = trace_rows(doc)?;
    let peak = doc.result.metrics.peak_memory_bytes;
    let backbone = doc.config.backbone.memory_bytes;
    let width = 640.0;
    let height = 320.0;
    let margin = 48.0;
    let t_max = rows
        .last()
        .map(|r| r.at)
        .unwrap_or(1.0)
        .max(1e-9);
    let y_min = backbone as f64 * 0.9995;
    let y_max = peak as f64 * 1.0005;
    let x = |t: f64| margin + (t / t_max) * (width - 2.0 * margin);
    let y = |bytes: f64| height - margin - ((bytes - y_min) / (y_max - y_min)) * (height - 2.0 * margin);

    let mut svg = svg_header(width, height, "resident memory over time");
    // reference lines: backbone floor and peak bound
    for (value, label) in [(backbone as f64, "backbone"), (peak as f64, "peak bound")] {
        svg.push_str(&format!(
            "<line x1='{}' y1='{:.1}' x2='{}' y2='{:.1}' stroke='#999' stroke-dasharray='4 3'/>\
             <text x='{}' y='{:.1}' font-size='10' fill='#666'>{label}</text>",
            margin,
            y(value),
            width - margin,
            y(value),
            margin + 4.0,
            y(value) - 4.0,
        ));
    }
    let mut path = String::new();
    let mut previous = backbone as f64;
    for (i, row) in rows.iter().enumerate() {
        let px = x(row.at);
        if i == 0 {
            path.push_str(&format!("M {px:.1} {:.1} ", y(previous)));
        } else {
            path.push_str(&format!("L {px:.1} {:.1} ", y(previous)));
        }
        path.push_str(&format!("L {px:.1} {:.1} ", y(row.footprint_bytes as f64)));
        previous = row.footprint_bytes as f64;
    }
    if !rows.is_empty() {
        path.push_str(&format!("L {:.1} {:.1}", width - margin, y(previous)));
    }
    svg.push_str(&format!(
        "<path d='{path}' fill='none' stroke='#2c7' stroke-width='1.5'/>"
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Tokens charged per module, one row each.
pub fn token_breakdown_csv(doc: &RunDocument) -> String {
    let mut out = String::from("module,tokens\n");
    for (module, tokens) in &doc.result.metrics.tokens_by_module {
        out.push_str(&format!("{module},{tokens}\n"));
    }
    out.push_str(&format!("total,{}\n", doc.result.metrics.tokens_total));
    out
}

/// Bar chart of tokens per module.
pub fn token_breakdown_svg(doc: &RunDocument) -> String {
    let tokens = &doc.result.metrics.tokens_by_module;
    let width = 640.0;
    let height = 320.0;
    let margin = 48.0;
    let max = tokens.values().max().copied().unwrap_or(1).max(1) as f64;
    let n = tokens.len().max(1) as f64;
    let band = (width - 2.0 * margin) / n;

    let mut svg = svg_header(width, height, "tokens by module");
    for (i, (module, value)) in tokens.iter().enumerate() {
        let bar_height = (*value as f64 / max) * (height - 2.0 * margin);
        let bx = margin + i as f64 * band + band * 0.15;
        let by = height - margin - bar_height;
        svg.push_str(&format!(
            "<rect x='{bx:.1}' y='{by:.1}' width='{:.1}' height='{bar_height:.1}' fill='#47a'/>\
             <text x='{:.1}' y='{:.1}' font-size='11' text-anchor='middle'>{module}</text>\
             <text x='{:.1}' y='{:.1}' font-size='10' text-anchor='middle' fill='#333'>{value}</text>",
            band * 0.7,
            bx + band * 0.35,
            height - margin + 14.0,
            bx + band * 0.35,
            by - 4.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn svg_header(width: f64, height: f64, title: &str) -> String {
    format!(
        "<svg xmlns='http://www.w3.org/2000/svg' width='{width}' height='{height}' \
         viewBox='0 0 {width} {height}'>\
         <rect width='{width}' height='{height}' fill='white'/>\
         <text x='{:.1}' y='20' font-size='13' font-family='sans-serif'>{title}</text>",
        width / 2.0 - 80.0
    )
}
