use std::fmt::Write as _;
use std::io::Write as _;

use anyhow::{Context, Result};

use crate::commands::Metrics;
use crate::{Format, ReportArgs};

const COLUMNS: [&str; 7] = [
    "method",
    "archive",
    "split",
    "K",
    "seed",
    "accuracy_pct",
    "delta_pp",
];

/// One row per metrics file; the delta is against the first file.
pub fn render(rows: &[Metrics], format: Format) -> Result<String> {
    let baseline = rows.first().map(|m| m.accuracy).unwrap_or(0.0);
    let cells: Vec<[String; 7]> = rows
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let delta = if i == 0 {
                "-".to_string()
            } else {
                format!("{:+.2}", 100.0 * (m.accuracy - baseline))
            };
            [
                m.method.clone(),
                m.archive.clone(),
                m.split.clone(),
                m.k.to_string(),
                m.seed.to_string(),
                format!("{:.2}", 100.0 * m.accuracy),
                delta,
            ]
        })
        .collect();

    let mut out = String::new();
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(Vec::new());
            w.write_record(COLUMNS)?;
            for row in &cells {
                w.write_record(row)?;
            }
            out = String::from_utf8(w.into_inner()?)?;
        }
        Format::Md => {
            let _ = writeln!(out, "| {} |", COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(COLUMNS.len()));
            for row in &cells {
                let _ = writeln!(out, "| {} |", row.join(" | ").replace('\n', " "));
            }
        }
    }
    Ok(out)
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let mut rows = Vec::with_capacity(args.metrics.len());
    for path in &args.metrics {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let m: Metrics = serde_json::from_str(&text)
            .with_context(|| format!("malformed metrics file {}", path.display()))?;
        rows.push(m);
    }
    std::io::stdout().write_all(render(&rows, args.format)?.as_bytes())?;
    Ok(())
}
