//! Continual protocol driver, metrics, ablations and reports.

mod ablation;
mod config;
mod metrics;
mod report;
mod run;

pub use ablation::{ablation_cells, ablation_from_runs, rescore, run_ablations, AblationCell, AblationReport};
pub use config::{CentroidConfig, PretrainData, RunConfig};
pub use metrics::{
    accuracy_row_entry, compute_metrics, domain_confusion, metrics_from_records, round2, AccuracyMatrix,
    DecisionRecord, Metrics,
};
pub use report::{
    ablation_csv, accuracy_csv, confusion_csv, metrics_csv, read_decisions, read_report, write_json, write_jsonl,
    write_run, ACCURACY_FILE, CENTROIDS_FILE, CONFIG_FILE, CONFUSION_FILE, DECISIONS_FILE, ENCODER_DIR, EPOCHS_FILE,
    PROMPTS_FILE, REPORT_FILE,
};
pub use run::{
    evaluate, evaluate_final, final_metrics, pretrain_encoder, run_continual, AccessAudit, AccessEvent, MetricsReport,
    Progress, RunOutput, Split,
};
