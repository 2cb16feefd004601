//! Per-round CSV and run summary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::orchestrator::{RoundLog, SimConfig};

/// Fixed column order. Wall time is left out so identical runs give
/// identical bytes.
pub const CSV_HEADER: &str = "round,acc,ce,lp,lr,clients,tasks,samples";

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(";")
}

pub fn write_metrics_csv(w: &mut impl Write, logs: &[RoundLog]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for l in logs {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            l.round,
            l.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            l.ce,
            l.lp,
            l.lr,
            join(&l.selected, |c| c.to_string()),
            join(&l.tasks, |t| t.map(|t| t.to_string()).unwrap_or_else(|| "-".into())),
            join(&l.stage_samples, |n| n.to_string()),
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary<'a> {
    pub final_acc: Option<f64>,
    pub best_acc: Option<f64>,
    pub rounds: usize,
    pub evaluations: usize,
    pub wall_seconds: f64,
    pub config: &'a SimConfig,
}

pub fn summarize<'a>(logs: &[RoundLog], config: &'a SimConfig) -> Summary<'a> {
    let accs: Vec<f64> = logs.iter().filter_map(|l| l.accuracy).collect();
    Summary {
        final_acc: accs.last().copied(),
        best_acc: accs.iter().copied().reduce(f64::max),
        rounds: logs.len(),
        evaluations: accs.len(),
        wall_seconds: logs.iter().map(|l| l.wall_ms).sum::<f64>() / 1e3,
        config,
    }
}

/// Writes `metrics.csv` and `summary.json` into `dir`.
pub fn emit_metrics(dir: impl AsRef<Path>, logs: &[RoundLog], config: &SimConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    write_metrics_csv(&mut w, logs)?;
    w.flush()?;
    let mut s = BufWriter::new(File::create(dir.join("summary.json"))?);
    serde_json::to_writer_pretty(&mut s, &summarize(logs, config))?;
    s.flush()?;
    Ok(())
}
