//! Dataset ingestion, synthetic scene generation, and metric reporting.

mod dataset;
mod metrics;
mod synth;

pub use dataset::{
    default_split, load_dataset, load_sequence, timestamp_ns, write_sequence, DatasetSplit,
    Sequence, TrajectoryRecord,
};
pub use metrics::{
    compute_metrics, median, plot_trajectory_overlay, read_metrics_report, write_metrics_report,
    MetricsReport, SequenceMetrics,
};
pub use synth::synth_scene_generate;
