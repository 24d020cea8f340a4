//! Writing run directories: tables, per-cell values, curves and a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::pipelines::{Outcome, TableRow};

/// Manifest format; bump when fields change meaning.
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub pipeline: String,
    pub seed: u64,
    pub trials: usize,
    pub trial_seeds: Vec<u64>,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub failed_cells: usize,
    /// Donor model whose parameters initialized a warm-started fit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<String>,
    pub em_runs: Vec<EmSummary>,
    pub files: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct EmSummary {
    pub key: String,
    pub iterations: usize,
    pub converged: bool,
    pub max_log_likelihood_drop: f64,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, trial_seeds: Vec<u64>) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            tool: "choicelab",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            pipeline: config.pipeline.id().to_string(),
            seed: config.seed,
            trials: config.trials,
            trial_seeds,
            config_sha256: config.hash(),
            config: serde_json::from_str(&config.to_json()).expect("config is JSON"),
            failed_cells: 0,
            warm_start: None,
            em_runs: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.files.sort();
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(dir.join("manifest.json"), text + "\n").with_context(|| format!("writing manifest in {}", dir.display()))
    }
}

/// File-system safe name for a result key such as `trial0/MCCM-20/GAsN/1000`.
pub fn sanitize(key: &str) -> String {
    key.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

fn fmt_samples(s: Option<usize>) -> String {
    s.map(|v| v.to_string()).unwrap_or_default()
}

/// Rows by method and size, one column per truth or metric, cells `mean ± std`.
pub fn markdown_table(table: &[TableRow]) -> String {
    let mut columns: Vec<&str> = Vec::new();
    let mut rows: Vec<(&str, Option<usize>)> = Vec::new();
    let mut cells: BTreeMap<(&str, Option<usize>, &str), &TableRow> = BTreeMap::new();
    for t in table {
        if !columns.contains(&t.column.as_str()) {
            columns.push(&t.column);
        }
        if !rows.contains(&(t.row.as_str(), t.samples)) {
            rows.push((&t.row, t.samples));
        }
        cells.insert((&t.row, t.samples, &t.column), t);
    }
    let mut out = String::new();
    let _ = writeln!(out, "| method | samples | {} |", columns.join(" | "));
    let _ = writeln!(out, "|---|---|{}", "---|".repeat(columns.len()));
    for (row, samples) in rows {
        let values: Vec<String> = columns
            .iter()
            .map(|c| match cells.get(&(row, samples, *c)) {
                Some(t) if t.trials == 0 => "failed".to_string(),
                Some(t) if t.trials == 1 => format!("{:.3}", t.mean),
                Some(t) => format!("{:.3} ± {:.3}", t.mean, t.std),
                None => String::new(),
            })
            .collect();
        let _ = writeln!(out, "| {row} | {} | {} |", fmt_samples(samples), values.join(" | "));
    }
    out
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn subdir(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::create_dir_all(&path)?;
    Ok(path)
}

/// Writes everything in `outcome` below `dir` and finishes with the manifest.
pub fn write_outcome(dir: &Path, command: &str, config: &ExperimentConfig, outcome: &Outcome) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = Manifest::new(command, config, outcome.trial_seeds.clone());
    let mut files = vec!["results.csv".to_string(), "results.md".to_string(), "cells.csv".to_string()];
    write_csv(&dir.join("results.csv"), &outcome.table)?;
    fs::write(dir.join("results.md"), markdown_table(&outcome.table))?;
    write_csv(&dir.join("cells.csv"), &outcome.cells)?;

    if !outcome.em_runs.is_empty() {
        let em = subdir(dir, "em")?;
        for run in &outcome.em_runs {
            let name = format!("{}.csv", sanitize(&run.key));
            crate::models::write_em_trace(&run.trace, &em.join(&name))?;
            files.push(format!("em/{name}"));
            manifest.em_runs.push(EmSummary {
                key: run.key.clone(),
                iterations: run.iterations,
                converged: run.converged,
                max_log_likelihood_drop: run.max_drop,
            });
        }
    }
    if !outcome.histories.is_empty() {
        let hist = subdir(dir, "histories")?;
        for (key, h) in &outcome.histories {
            let name = format!("{}.csv", sanitize(key));
            h.write_csv(&hist.join(&name))?;
            files.push(format!("histories/{name}"));
        }
    }
    if !outcome.calibration.is_empty() {
        let cal = subdir(dir, "calibration")?;
        for (key, bins) in &outcome.calibration {
            let name = format!("{}.csv", sanitize(key));
            bins.write_csv(&cal.join(&name))?;
            files.push(format!("calibration/{name}"));
        }
    }
    if !outcome.delta_u.is_empty() {
        let du = subdir(dir, "delta_u")?;
        for (key, h) in &outcome.delta_u {
            let name = format!("{}.json", sanitize(key));
            fs::write(du.join(&name), serde_json::to_string(h)?)?;
            files.push(format!("delta_u/{name}"));
        }
    }
    if let Some(report) = &outcome.ingest {
        report.save(&dir.join("ingest.json"))?;
        files.push("ingest.json".into());
    }
    manifest.failed_cells = outcome.failed();
    manifest.files = files;
    manifest.write(dir)
}
