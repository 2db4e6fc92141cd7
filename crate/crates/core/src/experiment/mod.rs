//! End-to-end experiments: configuration, closed-loop runs, timing
//! benchmarks and report tables.

mod bench;
mod config;
mod report;
mod runner;

pub use bench::{benchmark_timing, log_log_slope, BenchReport, BenchRow};
pub use config::{DataConfig, ExperimentConfig, ReferenceSpec, Selector};
pub use report::{emit_report, find_runs, REPORT_DIR};
pub use runner::{
    aggregate, closed_loop, compute_metrics, mean_std, nominal_operating_point, prepare_dataset, run_experiment,
    run_on_dataset, settling_time, write_run, write_scores, write_trace, Aggregate, Decision, ExperimentResult,
    RunMetrics, StepRecord, TrialOutcome, Trajectory,
};
