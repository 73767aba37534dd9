//! Table, CSV and JSON rendering of command results.

use std::fmt::Write as _;

use clap::ValueEnum;
use serde::Serialize;
use tokpool::costmodel::{Fractions, FlopReport};
use tokpool::filterlab::EquivalenceReport;
use tokpool::pipeline::LayerTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    #[default]
    Table,
    Csv,
    Json,
}

/// Left-aligned first column, right-aligned rest.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut parts = Vec::new();
        for (i, c) in cells.enumerate() {
            if i == 0 {
                parts.push(format!("{c:<w$}", w = widths[0]));
            } else {
                parts.push(format!("{c:>w$}", w = widths[i]));
            }
        }
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut header.iter().copied());
    for r in rows {
        line(&mut r.iter().map(String::as_str));
    }
    out
}

fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

const COST_HEADER: [&str; 8] = ["layer", "tokens", "attention", "qkv", "oproj", "mlp", "clustering", "total"];

#[derive(Serialize)]
struct CostJson<'a> {
    #[serde(flatten)]
    report: &'a FlopReport,
    fractions: &'a Fractions,
}

pub fn cost(report: &FlopReport, fractions: &Fractions, format: Format) -> String {
    let mut rows: Vec<Vec<String>> = report
        .per_layer
        .iter()
        .map(|l| {
            let f = &l.flops;
            vec![
                l.layer.to_string(),
                l.tokens.to_string(),
                f.attention.to_string(),
                f.qkv.to_string(),
                f.oproj.to_string(),
                f.mlp.to_string(),
                f.clustering.to_string(),
                f.total().to_string(),
            ]
        })
        .collect();
    let t = &report.totals;
    rows.push(vec![
        "total".into(),
        String::new(),
        t.attention.to_string(),
        t.qkv.to_string(),
        t.oproj.to_string(),
        t.mlp.to_string(),
        t.clustering.to_string(),
        report.grand_total.to_string(),
    ]);
    match format {
        Format::Json => json(&CostJson { report, fractions }),
        Format::Csv => csv(&COST_HEADER, &rows),
        Format::Table => {
            let mut out = table(&COST_HEADER, &rows);
            let _ = writeln!(
                out,
                "\nshare  attention {:.1}%  qkv {:.1}%  oproj {:.1}%  mlp {:.1}%  clustering {:.1}%  fully-connected {:.1}%",
                100.0 * fractions.attention,
                100.0 * fractions.qkv,
                100.0 * fractions.oproj,
                100.0 * fractions.mlp,
                100.0 * fractions.clustering,
                100.0 * fractions.fully_connected(),
            );
            let _ = writeln!(out, "grand total {:.3} Gflops", report.grand_total as f64 / 1e9);
            out
        }
    }
}

const TRACE_HEADER: [&str; 8] = ["layer", "tokens_in", "tokens_out", "target", "loss", "iterations", "hull_excess", "finite"];

pub fn trace(trace: &[LayerTrace], format: Format) -> String {
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|t| {
            vec![
                t.layer.to_string(),
                t.tokens_in.to_string(),
                t.tokens_out.to_string(),
                opt(t.target),
                opt(t.loss),
                t.iterations.to_string(),
                t.hull_excess.to_string(),
                t.finite.to_string(),
            ]
        })
        .collect();
    match format {
        Format::Json => json(&trace),
        Format::Csv => csv(&TRACE_HEADER, &rows),
        Format::Table => table(&TRACE_HEADER, &rows),
    }
}

const VERIFY_HEADER: [&str; 7] = ["n", "m", "alpha", "seed", "max_abs_dev", "tol", "pass"];

pub fn verify(r: &EquivalenceReport, format: Format) -> String {
    let row = vec![
        r.n.to_string(),
        r.m.to_string(),
        r.alpha.to_string(),
        r.seed.to_string(),
        format!("{:e}", r.max_abs_dev),
        format!("{:e}", r.tol),
        r.pass.to_string(),
    ];
    match format {
        Format::Json => json(r),
        Format::Csv => csv(&VERIFY_HEADER, &[row]),
        Format::Table => table(&VERIFY_HEADER, &[row]),
    }
}

/// Flat key/value summary of a single command run.
pub fn summary(fields: &[(&str, String)], format: Format) -> String {
    let keys: Vec<&str> = fields.iter().map(|(k, _)| *k).collect();
    let values: Vec<String> = fields.iter().map(|(_, v)| v.clone()).collect();
    match format {
        Format::Csv => csv(&keys, &[values]),
        Format::Table => {
            let w = keys.iter().map(|k| k.len()).max().unwrap_or(0);
            fields.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
        }
        Format::Json => {
            let map: serde_json::Map<String, serde_json::Value> = fields
                .iter()
                .map(|(k, v)| {
                    let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.clone()));
                    (k.to_string(), value)
                })
                .collect();
            json(&map)
        }
    }
}
