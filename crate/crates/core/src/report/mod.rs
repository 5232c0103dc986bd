//! Experiment orchestration and output artifacts.

mod experiment;
mod heatmap;
mod histogram;

pub use experiment::{
    run_experiment, verify_outputs, AdversarialSummary, Analysis, CounterfactualRecord, ExperimentError, ExperimentSpec,
    Performance, PermutationSummary, PlotData, Report, RunMetadata, ScatterPoint, Stage, JSD_BINS, JSD_RANGE,
    PARTIAL_MARKER, REPORT_SCHEMA_VERSION,
};
pub use heatmap::{heatmap_document, render_heatmap, render_heatmap_pair, HeatmapError};
pub use histogram::{emit_histogram, Histogram};
