//! Sweep artifacts: `results.csv`, TREC runs, `figure_data.csv`,
//! `summary.md`, and the document indexes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiments::io::write_trec_run;
use crate::experiments::sweep::{GridPoint, SweepResult};

pub const RESULTS_HEADER: [&str; 7] = ["dataset", "backend", "T", "metric", "k", "value", "ms"];

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

fn metric_label(name: &str, k: Option<usize>) -> String {
    match k {
        Some(k) => format!("{name}@{k}"),
        None => name.to_string(),
    }
}

pub fn results_csv(result: &SweepResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).map_err(csv_err)?;
    for row in result.rows() {
        w.write_record([
            row.dataset,
            row.backend,
            row.steps.to_string(),
            row.metric,
            row.k.map(|k| k.to_string()).unwrap_or_default(),
            row.value.to_string(),
            row.ms.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn metric_columns(points: &[&GridPoint]) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for p in points {
        for r in &p.reports {
            let label = metric_label(&r.metric, r.k);
            if !cols.contains(&label) {
                cols.push(label);
            }
        }
    }
    cols
}

fn grouped(result: &SweepResult) -> BTreeMap<(String, String), Vec<&GridPoint>> {
    let mut groups: BTreeMap<(String, String), Vec<&GridPoint>> = BTreeMap::new();
    for p in &result.points {
        groups
            .entry((p.dataset.clone(), p.backend.clone()))
            .or_default()
            .push(p);
    }
    for pts in groups.values_mut() {
        pts.sort_by_key(|p| p.steps);
    }
    groups
}

fn value_of(p: &GridPoint, label: &str) -> Option<f64> {
    p.reports
        .iter()
        .find(|r| metric_label(&r.metric, r.k) == label)
        .map(|r| r.aggregate)
}

/// Wide table: `dataset,backend,T,<metric columns...>`, one row per `T`.
pub fn figure_data_csv(result: &SweepResult) -> Result<Vec<u8>> {
    let all: Vec<&GridPoint> = result.points.iter().collect();
    let cols = metric_columns(&all);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset".to_string(), "backend".into(), "T".into()];
    header.extend(cols.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for ((dataset, backend), pts) in grouped(result) {
        for p in pts {
            let mut rec = vec![dataset.clone(), backend.clone(), p.steps.to_string()];
            rec.extend(cols.iter().map(|c| value_of(p, c).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Markdown tables, one per `(dataset, backend)`, metrics scaled by 100.
///
/// `T` counts refinement iterations (0 = plain encoding); `passes` is the
/// number of encoder forward passes, `T + 1`.
pub fn summary_markdown(result: &SweepResult) -> String {
    let mut out = String::from("# Refinement sweep\n");
    for ((dataset, backend), pts) in grouped(result) {
        let cols = metric_columns(&pts);
        let _ = write!(out, "\n## {dataset} / {backend}\n\n| T | passes |");
        for c in &cols {
            let _ = write!(out, " {c} |");
        }
        out.push_str("\n|---:|---:|");
        for _ in &cols {
            out.push_str("---:|");
        }
        out.push('\n');
        let baseline = pts.iter().find(|p| p.steps == 0);
        for p in &pts {
            let _ = write!(out, "| {} | {} |", p.steps, p.steps + 1);
            for c in &cols {
                match value_of(p, c) {
                    Some(v) => {
                        let _ = write!(out, " {:.2}", v * 100.0);
                        if let Some(base) = baseline.filter(|b| b.steps != p.steps).and_then(|b| value_of(b, c)) {
                            let _ = write!(out, " ({:+.2})", (v - base) * 100.0);
                        }
                        out.push_str(" |");
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
    }
    if !result.failures.is_empty() {
        out.push_str("\n## Failures\n\n");
        for f in &result.failures {
            let steps = f.steps.map_or_else(|| "-".to_string(), |t| t.to_string());
            let _ = writeln!(out, "- {} / {} / T={}: {}", f.dataset, f.backend, steps, f.error);
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Writes every artifact under `out_dir` and returns the written paths.
pub fn emit_reports(result: &SweepResult, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |rel: &str, bytes: &[u8]| -> Result<()> {
        let path = out_dir.join(rel);
        write_file(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    emit("results.csv", &results_csv(result)?)?;
    emit("figure_data.csv", &figure_data_csv(result)?)?;
    emit("summary.md", summary_markdown(result).as_bytes())?;
    for p in &result.points {
        let mut buf = Vec::new();
        write_trec_run(&mut buf, &p.run, &result.run_tag)?;
        emit(&p.run_file(), &buf)?;
    }
    for idx in &result.indexes {
        let mut buf = Vec::new();
        idx.index.write_to(&mut buf)?;
        emit(&idx.file(), &buf)?;
    }
    Ok(written)
}
