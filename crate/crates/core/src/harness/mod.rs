//! Workload generation, experiment drivers and metrics.

pub mod golden;
pub mod metrics;
pub mod scenarios;
pub mod sim;
pub mod sweep;
pub mod workload;

pub use metrics::{
    attach_server_samples, compute_metrics, emit_report, parse_log, render_csv, render_log, steady_state_throughput, LogEvent, LogKind,
    MetricsRow, MetricsSeries, ServerSample, Summary, ThroughputPoint,
};
pub use sim::{run_pull, PullOutcome, PullScenario};
pub use workload::{generate_workload, ideal_throughput, PlannedSubmit, WorkloadSpec};
