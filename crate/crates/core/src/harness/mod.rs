//! The episode loop and everything around it: run configs, experiments,
//! run logs, replay and the three-stage training pipeline.
//!
//! Each step scores the candidates, asks when the ask policy fires (at most
//! `max_rounds` times), appends the exchange to the instruction, re-scores,
//! then executes the selected action.

mod config;
mod experiment;
pub mod pipeline;
mod runner;

pub use config::{
    load_dataset, BuiltinNavigator, DialogueSpec, NavigatorSpec, Oracle, Resources, RunConfig, Selection,
    DEFAULT_MAX_ACTIONS, DEFAULT_MAX_ROUNDS,
};
pub use experiment::{
    read_run_log, replay, run_experiment, write_run_log, EpisodeFailure, ExperimentOutcome, ExperimentReport,
};
pub use pipeline::{train_pipeline, PipelineConfig, PipelineOutcome};
pub use runner::{run_episode, EpisodeLog, EpisodeRunner, EpisodeSpec, Exchange, PendingQuestion, Poll, StepRecord};
