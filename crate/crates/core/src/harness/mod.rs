//! Experiment orchestration: training runs, evaluation grids, the
//! generalization matrix, switch-rate analysis, and report emission.

mod config;
mod eval;
mod matrix;
mod report;
mod train;

pub use config::{
    derive_seed, EvalConfig, Method, NetworkSource, RunConfig, ScenarioSpec, TrainConfig,
};
pub use eval::{
    build_policy, evaluate, run_scenario_seed, Checkpoints, EvalRecord, Policy, RunOptions,
    SeedRow,
};
pub use matrix::{generalization_matrix, switch_rate_report, MatrixCell, SwitchRateRow};
pub use report::{
    delay_evolution_svg, matrix_heatmap_svg, read_matrix_csv, write_delay_evolution_csv,
    write_matrix_csv, write_per_seed_csv, write_step_stream_csv, write_summary_csv,
    write_switch_rate_csv,
};
pub use train::{train, TrainArtifacts, TrainLogRow};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Roadnet(#[from] crate::roadnet::RoadnetError),
    #[error(transparent)]
    Trips(#[from] crate::simcore::TripGenError),
    #[error(transparent)]
    Sim(#[from] crate::simcore::SimError),
    #[error(transparent)]
    Model(#[from] crate::gcnmodel::ModelError),
    #[error(transparent)]
    Agent(#[from] crate::agents::AgentError),
    #[error(transparent)]
    Obs(#[from] crate::obsgraph::ObsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no records to report")]
    EmptyRecords,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("csv error: {0}")]
    Csv(String),
}
