use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{domain_confusion, metrics_from_records, AccuracyMatrix, DecisionRecord, Metrics};
use crate::conditioning::ClassSet;
use crate::data::{pretrain_pairs, DomainSpec, SampleRecord, SPLIT_TEST, SPLIT_TRAIN};
use crate::domain::{fit_centroids, DomainCentroidBank};
use crate::encoder::{pretrain_dual_encoder, DualEncoder, PretrainReport, Vocabulary};
use crate::ensembler::{Detector, EnsembleRule, InferenceConfig};
use crate::error::{Error, Result};
use crate::prompt_bank::PromptBank;
use crate::trainer::{train_task, EpochLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    /// Task being trained when the read happened.
    pub step: usize,
    pub domain: usize,
    pub split: Split,
}

/// Log of every dataset read made by the protocol driver.
#[derive(Debug, Default)]
pub struct AccessAudit {
    events: Mutex<Vec<AccessEvent>>,
}

impl AccessAudit {
    pub fn record(&self, event: AccessEvent) {
        self.events.lock().expect("audit log").push(event);
    }

    pub fn events(&self) -> Vec<AccessEvent> {
        self.events.lock().expect("audit log").clone()
    }

    /// Training-data reads of a domain other than the one being trained.
    pub fn foreign_train_reads(&self) -> usize {
        self.events()
            .iter()
            .filter(|e| e.split == Split::Train && e.domain != e.step)
            .count()
    }
}

/// Hands out each domain's training split only during that domain's step.
struct DomainStream<'a> {
    specs: &'a [DomainSpec],
    image_size: usize,
    audit: &'a AccessAudit,
}

impl DomainStream<'_> {
    fn train(&self, step: usize) -> Result<Vec<SampleRecord>> {
        self.audit.record(AccessEvent {
            step,
            domain: step,
            split: Split::Train,
        });
        self.specs[step - 1].split(SPLIT_TRAIN, self.image_size)
    }

    fn test(&self, step: usize, domain: usize) -> Result<Vec<SampleRecord>> {
        self.audit.record(AccessEvent {
            step,
            domain,
            split: Split::Test,
        });
        self.specs[domain - 1].split(SPLIT_TEST, self.image_size)
    }
}

#[derive(Debug, Clone)]
pub enum Progress {
    Pretrain { step: usize, loss: f64 },
    Epoch(EpochLog),
    Evaluated { after_task: usize, row: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub matrix: AccuracyMatrix,
    pub confusion: Vec<Vec<usize>>,
    pub rule: EnsembleRule,
    pub conditioning: bool,
    pub fingerprint: String,
}

impl MetricsReport {
    pub fn from_records(records: &[DecisionRecord], tasks: usize, config: &RunConfig) -> Result<Self> {
        let (matrix, metrics) = metrics_from_records(records, tasks)?;
        Ok(Self {
            tasks,
            metrics,
            matrix,
            confusion: domain_confusion(records, tasks),
            rule: config.rule,
            conditioning: config.train.conditioning,
            fingerprint: config.fingerprint(),
        })
    }
}

/// Everything a continual run leaves behind.
#[derive(Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub bank: PromptBank,
    pub centroids: DomainCentroidBank,
    pub records: Vec<DecisionRecord>,
    pub epochs: Vec<EpochLog>,
    /// Serialized prompts of each task right after its training.
    pub snapshots: Vec<Vec<u8>>,
    pub audit: AccessAudit,
}

/// Pre-aligns a fresh encoder on the configured caption pairs.
pub fn pretrain_encoder(config: &RunConfig, progress: &mut dyn FnMut(Progress)) -> Result<(DualEncoder, PretrainReport)> {
    config.validate()?;
    let classes = config.class_set()?;
    let names: Vec<&str> = classes.names().iter().map(String::as_str).collect();
    let pairs = pretrain_pairs(
        &names,
        config.pretrain_data.pairs,
        config.encoder.image_size,
        config.pretrain_data.seed,
    )
    .map_err(Error::stage("pretrain data"))?;
    let vocab = Vocabulary::with_default_words(config.encoder.context_length)?;
    let (enc, report) =
        pretrain_dual_encoder(&pairs, vocab, &config.encoder, &config.pretrain).map_err(Error::stage("pretrain"))?;
    for (step, &loss) in report.losses.iter().enumerate() {
        progress(Progress::Pretrain { step: step + 1, loss });
    }
    Ok((enc, report))
}

/// Scores `images` of task `domain` with the current banks.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    encoder: &DualEncoder,
    bank: &PromptBank,
    centroids: &DomainCentroidBank,
    classes: &ClassSet,
    inference: &InferenceConfig,
    domain: usize,
    images: &[SampleRecord],
) -> Result<Vec<DecisionRecord>> {
    let det = Detector::new(encoder, bank, centroids, classes, inference)?;
    evaluate_with(&det, bank.len(), domain, images)
}

fn evaluate_with(det: &Detector<'_>, after_task: usize, domain: usize, images: &[SampleRecord]) -> Result<Vec<DecisionRecord>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let d = det.classify(&r.image)?;
            Ok(DecisionRecord {
                image_id: format!("domain_{domain}/test/{i:05}"),
                after_task,
                domain,
                label: r.label,
                y_hat: d.decision.y_hat,
                branch: d.decision.branch,
                s_r: d.raw.s_r,
                s_f: d.raw.s_f,
                w: d.posterior.w,
                classes: d.classes,
            })
        })
        .collect()
}

/// Trains the domains in order and evaluates every seen task after each
/// one. Training data of a domain exists only inside its own step.
pub fn run_continual(config: &RunConfig, encoder: &DualEncoder, progress: &mut dyn FnMut(Progress)) -> Result<RunOutput> {
    config.validate()?;
    if encoder.config() != &config.encoder {
        return Err(Error::Config("encoder architecture differs from the run configuration".into()));
    }
    let classes = config.class_set()?;
    let inference = config.inference();
    let audit = AccessAudit::default();
    let stream = DomainStream {
        specs: &config.domains,
        image_size: config.encoder.image_size,
        audit: &audit,
    };
    let enc_cfg = encoder.config();
    let mut bank = PromptBank::new(config.train.prompt_len, enc_cfg.vision_width, enc_cfg.text_width);
    let mut centroids = DomainCentroidBank::new(config.centroids.k, enc_cfg.embed_dim);
    let mut tests: Vec<Vec<SampleRecord>> = Vec::new();
    let mut records = Vec::new();
    let mut epochs = Vec::new();
    let mut snapshots = Vec::new();

    for t in 1..=config.domains.len() {
        let tag = |what: &str| Error::stage(format!("{what} task {t}"));
        {
            let train = stream.train(t).map_err(tag("generate"))?;
            let outcome = train_task(&train, &bank, encoder, &classes, &config.train, |log| {
                progress(Progress::Epoch(log.clone()))
            })
            .map_err(tag("train"))?;
            epochs.extend(outcome.epochs);
            snapshots.push(outcome.prompts.block_bytes());
            let features = train
                .par_iter()
                .map(|r| {
                    let f = encoder.encode_image(&r.image, &[])?.joint_feature;
                    Ok(f.iter().map(|&x| x as f64).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()
                .map_err(tag("features"))?;
            let fit = fit_centroids(&features, config.centroids.k, config.centroids.seed ^ t as u64)
                .map_err(tag("k-means"))?;
            bank.append_task(outcome.prompts).map_err(tag("bank"))?;
            centroids.append(fit.centroids, config.centroids.tau).map_err(tag("centroids"))?;
        }
        tests.push(stream.test(t, t).map_err(tag("generate"))?);

        let det = Detector::new(encoder, &bank, &centroids, &classes, &inference).map_err(tag("evaluate"))?;
        let mut row = Vec::with_capacity(t);
        for (k, test) in tests.iter().enumerate() {
            let recs = evaluate_with(&det, t, k + 1, test).map_err(tag("evaluate"))?;
            row.push(100.0 * recs.iter().filter(|r| r.correct()).count() as f64 / recs.len().max(1) as f64);
            records.extend(recs);
        }
        progress(Progress::Evaluated { after_task: t, row });
    }

    let report = MetricsReport::from_records(&records, config.domains.len(), config)?;
    Ok(RunOutput {
        report,
        bank,
        centroids,
        records,
        epochs,
        snapshots,
        audit,
    })
}

/// Final-state evaluation of a finished run on every test set.
pub fn evaluate_final(
    config: &RunConfig,
    encoder: &DualEncoder,
    bank: &PromptBank,
    centroids: &DomainCentroidBank,
) -> Result<Vec<DecisionRecord>> {
    let classes = config.class_set()?;
    let det = Detector::new(encoder, bank, centroids, &classes, &config.inference())?;
    let mut out = Vec::new();
    for (k, spec) in config.domains.iter().enumerate().take(bank.len()) {
        let test = spec.split(SPLIT_TEST, config.encoder.image_size)?;
        out.extend(evaluate_with(&det, bank.len(), k + 1, &test)?);
    }
    Ok(out)
}

/// Final-state metrics without a full matrix: AA and TAA from the final
/// row, AF left undefined.
pub fn final_metrics(records: &[DecisionRecord], tasks: usize) -> Result<Metrics> {
    let mut row = Vec::with_capacity(tasks);
    for k in 1..=tasks {
        let sel: Vec<&DecisionRecord> = records.iter().filter(|r| r.domain == k).collect();
        row.push(super::metrics::accuracy_row_entry(&sel, k)?);
    }
    let pooled = records.iter().filter(|r| r.correct()).count() as f64 / records.len().max(1) as f64;
    Ok(Metrics {
        aa: row.iter().sum::<f64>() / tasks as f64,
        af: 0.0,
        af_defined: false,
        taa: 100.0 * pooled,
        final_accuracies: row,
    })
}
