//! Run directory layout and report formats.
//!
//! A run directory holds `config.toml`, the `encoder/` checkpoint,
//! `prompts.bin`, `centroids.bin`, `report.json`, `accuracy.csv`,
//! `confusion.csv`, `decisions.jsonl` and `epochs.jsonl`.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::ablation::AblationReport;
use super::config::RunConfig;
use super::metrics::DecisionRecord;
use super::run::{MetricsReport, RunOutput};
use crate::domain::save_centroids;
use crate::encoder::{save_encoder, DualEncoder};
use crate::error::{Error, Result};
use crate::prompt_bank::save_bank;

pub const CONFIG_FILE: &str = "config.toml";
pub const ENCODER_DIR: &str = "encoder";
pub const PROMPTS_FILE: &str = "prompts.bin";
pub const CENTROIDS_FILE: &str = "centroids.bin";
pub const REPORT_FILE: &str = "report.json";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    Ok(BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = create(path)?;
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_decisions(path: &Path) -> Result<Vec<DecisionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_report(dir: &Path) -> Result<MetricsReport> {
    let path = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Accuracy matrix as CSV; cells above the diagonal are empty.
pub fn accuracy_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["after_task".to_string()];
    header.extend((1..=report.tasks).map(|k| format!("task_{k}")));
    w.write_record(&header)?;
    for (t, row) in report.matrix.rows.iter().enumerate() {
        let mut rec = vec![(t + 1).to_string()];
        rec.extend((0..report.tasks).map(|k| row.get(k).map(|v| format!("{v:.2}")).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    finish(w)
}

pub fn confusion_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true_task".to_string()];
    header.extend((1..=report.tasks).map(|k| format!("predicted_{k}")));
    w.write_record(&header)?;
    for (i, row) in report.confusion.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    finish(w)
}

/// One-row summary table.
pub fn metrics_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tasks", "aa", "af", "af_defined", "taa", "rule", "conditioning", "fingerprint"])?;
    w.write_record([
        report.tasks.to_string(),
        format!("{:.2}", report.metrics.aa),
        format!("{:.2}", report.metrics.af),
        report.metrics.af_defined.to_string(),
        format!("{:.2}", report.metrics.taa),
        report.rule.name().to_string(),
        report.conditioning.to_string(),
        report.fingerprint.clone(),
    ])?;
    finish(w)
}

pub fn ablation_csv(report: &AblationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["conditioning", "rule", "aa", "af", "taa"])?;
    for c in &report.cells {
        w.write_record([
            c.conditioning.to_string(),
            c.rule.name().to_string(),
            format!("{:.2}", c.aa),
            format!("{:.2}", c.af),
            format!("{:.2}", c.taa),
        ])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes everything needed to re-evaluate or report on a run.
pub fn write_run(dir: &Path, config: &RunConfig, encoder: &DualEncoder, run: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join(CONFIG_FILE), &config.to_toml()?)?;
    save_encoder(encoder, &dir.join(ENCODER_DIR))?;
    save_bank(&run.bank, &dir.join(PROMPTS_FILE))?;
    save_centroids(&run.centroids, &dir.join(CENTROIDS_FILE))?;
    write_json(&dir.join(REPORT_FILE), &run.report)?;
    write_text(&dir.join(ACCURACY_FILE), &accuracy_csv(&run.report)?)?;
    write_text(&dir.join(CONFUSION_FILE), &confusion_csv(&run.report)?)?;
    write_jsonl(&dir.join(DECISIONS_FILE), &run.records)?;
    write_jsonl(&dir.join(EPOCHS_FILE), &run.epochs)
}
