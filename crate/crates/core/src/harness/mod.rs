//! Closed-loop simulation, metrics and run artifacts.

mod config;
mod io;
mod metrics;
mod run;

pub use config::{
    ClockTime, ClockWindow, ControllerKind, GlucoseSignal, MealEntry, ScenarioConfig,
    MINUTES_PER_DAY, TABLE3_CFG,
};
pub use io::{
    read_metrics, read_timeseries, timeseries_csv, write_outputs, BUFFER_FILE, GP_FILE,
    METRICS_FILE, QP_FILE, TIMESERIES_FILE,
};
pub use metrics::{comparison_table, compute_metrics, MetricBlock, RunMetrics, METRIC_ROWS};
pub use run::{
    run_batch, run_scenario, run_scenario_observed, QpDiagnostic, RunRecord, StepObserver, StepRow,
};
