//! Experiment orchestration: configuration, the staged pipeline, the record
//! file and report aggregation.

mod config;
mod pipeline;
mod records;
mod report;

pub use config::{DatasetSpec, RunConfig, SweepGrids, ARTIFACT_ROOT_ENV};
pub use pipeline::{
    audit_test_evaluations, classifier_cell_id, gan_cell_id, run_pipeline, test_cell_id, GanCell, GanCellResult,
    PipelineSummary, Workspace,
};
pub use records::{read_records, stage, ExperimentRecord, RecordFile, RecordManifest, COLUMNS};
pub use report::{aggregate, render_report, Aggregate, Report};
