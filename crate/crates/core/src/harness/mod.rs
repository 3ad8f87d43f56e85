//! Experiment harness: configuration, execution, reporting, verification.

pub mod config;
pub mod report;
pub mod run;
pub mod verify;

pub use config::{
    ConfigError, DatasetSpec, ExperimentConfig, LayerDesc, ModeSpec, SchedulePolicy, SyncSpec,
    TransportChoice,
};
pub use report::{emit_record, emit_report};
pub use run::{
    build_scenario, build_schedule, client_step_flops, load_dataset, run_experiment,
    run_experiment_full, HarnessError, ResultRecord,
};
pub use verify::{run_quick_suite, semi_supervised_gradient_check, CheckOutcome, FdReport};
