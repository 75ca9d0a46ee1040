//! Run plumbing behind the command-line tool: configuration, synthetic
//! tasks, training and distributed runs, sweeps, verification suites and
//! cost tables.

mod config;
mod report;
mod sweep;
mod tasks;
mod train;
mod verify;

pub use config::{RunConfig, SourceChoice, Task, CONFIG_KEYS};
pub use report::{cost_json_lines, cost_table, memory_json, memory_table};
pub use sweep::{median, median_by_value, rank_tradeoffs, run_sweep, sweep_csv, sweep_table, SweepKind, SweepRow};
pub use tasks::{build_model, TaskData, DATA_STREAM, INIT_STREAM};
pub use train::{
    config_header, metrics_jsonl, read_metrics, run_dist, run_train, write_outputs, MetricsRecord, RunOutcome,
    CHECKPOINT_FILE, COMM_FILE, METRICS_FILE,
};
pub use verify::{run_suite, Check, Relation, Suite, VerifyOptions};
