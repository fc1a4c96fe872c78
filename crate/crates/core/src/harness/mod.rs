//! End-to-end orchestration: configuration, the staged and resumable
//! pipeline, evaluation variants and report emission.
//!
//! A run lives in `<out>/<first 16 hex digits of the config hash>/`:
//!
//! ```text
//! config.toml
//! report.{json,csv,md}
//! seed-<s>/base, select, records, diffusion, scale, eval
//! seed-<s>/records_alt, diffusion_alt, scale_alt   (runner-up layer)
//! ```

mod config;
mod data;
mod eval;
mod pipeline;
mod report;

pub use config::{
    BaseTrainConfig, BlobsConfig, CsvConfig, DatasetConfig, EvalConfig, IdxConfig, ModelConfig, PipelineConfig,
    SelectConfig, TabularConfig, Variant,
};
pub use data::{load_dataset, mean_loss, model_spec, prepare_data, train_base, Splits};
pub use eval::{
    average_predictions, distinct_count, draw_stream, ensemble_predict, eval_variant, evaluate, ocd_draws, predict,
    score, variant_predictions, AuditedLabels, DrawSet, EnsembleMode, EnsembleStats, EvalContext, Metrics,
    OcdArtifacts, Prediction, SeedEval, SharedDraws, TestSet, VariantMetrics,
};
pub use pipeline::{run_pipeline, Branch, Pipeline, Stage};
pub use report::{read_report_csv, EnsembleSummary, EvalReport, ReportFiles, ReportRow};
