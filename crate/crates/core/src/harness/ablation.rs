use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{metrics_from_records, DecisionRecord};
use super::run::{run_continual, Progress, RunOutput};
use crate::encoder::DualEncoder;
use crate::ensembler::EnsembleRule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub conditioning: bool,
    pub rule: EnsembleRule,
    pub aa: f64,
    pub af: f64,
    pub taa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub fingerprint: String,
}

impl AblationReport {
    pub fn cell(&self, conditioning: bool, rule: EnsembleRule) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.conditioning == conditioning && c.rule == rule)
    }
}

/// Every record decided again under `rule`.
pub fn rescore(records: &[DecisionRecord], rule: EnsembleRule) -> Result<Vec<DecisionRecord>> {
    records.iter().map(|r| r.rescored(rule)).collect()
}

/// One cell per ensembling rule for a finished run.
pub fn ablation_cells(run: &RunOutput, conditioning: bool) -> Result<Vec<AblationCell>> {
    let tasks = run.report.tasks;
    EnsembleRule::ALL
        .iter()
        .map(|&rule| {
            let (_, m) = metrics_from_records(&rescore(&run.records, rule)?, tasks)?;
            Ok(AblationCell {
                conditioning,
                rule,
                aa: m.aa,
                af: m.af,
                taa: m.taa,
            })
        })
        .collect()
}

/// The grid from an already finished conditioned run and its unconditioned
/// counterpart.
pub fn ablation_from_runs(config: &RunConfig, with: &RunOutput, without: &RunOutput) -> Result<AblationReport> {
    let mut cells = ablation_cells(with, true)?;
    cells.extend(ablation_cells(without, false)?);
    Ok(AblationReport {
        cells,
        fingerprint: config.fingerprint(),
    })
}

/// Runs the protocol with conditioning on and off and scores both under
/// every ensembling rule.
pub fn run_ablations(
    config: &RunConfig,
    encoder: &DualEncoder,
    progress: &mut dyn FnMut(Progress),
) -> Result<(AblationReport, RunOutput, RunOutput)> {
    let mut on = config.clone();
    on.train.conditioning = true;
    let mut off = config.clone();
    off.train.conditioning = false;
    let with = run_continual(&on, encoder, progress).map_err(Error::stage("ablation, conditioned"))?;
    let without = run_continual(&off, encoder, progress).map_err(Error::stage("ablation, unconditioned"))?;
    let report = ablation_from_runs(config, &with, &without)?;
    Ok((report, with, without))
}
