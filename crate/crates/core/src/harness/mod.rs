//! Closed-loop experiments: single runs of each controller variant, Monte-Carlo
//! statistics with paired seeds, regularization tuning and parameter sweeps.

pub mod closed_loop;
pub mod config;
pub mod stats;
pub mod sweep;

pub use closed_loop::{
    closed_loop_cost, generate_dataset, mpc_oracle, prepare_data, prepare_from_trajectories, run_closed_loop, ExperimentResult,
    MpcOracle, PreparedData,
};
pub use config::{ExperimentConfig, Reference, SweepParameter, Variant};
pub use stats::{sign_test, summarize, SignTest, Summary};
pub use sweep::{
    monte_carlo, monte_carlo_with, repetition_seed, sweep_lambda, sweep_parameter, tuned_comparison, LambdaSweep,
    MonteCarloReport, SweepReport,
};
