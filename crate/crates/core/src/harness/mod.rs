//! End-to-end pipeline, evaluation metrics and the ablation driver.

mod ablation;
mod config;
mod metrics;
mod pipeline;

pub use ablation::*;
pub use config::{parse_key_values, Assignment, DataSource, ExperimentConfig, Fusion, Method};
pub use metrics::{per_class_accuracy, topk_accuracy, PerClassAccuracy};
pub use pipeline::{
    affinity_matrix, build_ontology, build_plan, evaluate, execute, fuse, load_data, monolithic_config,
    predictions_csv, rankings, report_from_checkpoints, run_pipeline, train_monolithic, within_group_scores, write_run,
    Classifier, FittedModel, Metrics, MonolithicModel, PipelineRun, Report, TopK,
};
