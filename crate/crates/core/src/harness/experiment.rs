use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::metrics::{EpisodeMetrics, NavMetricsReport};
use crate::navgraph::NavGraph;
use crate::navigator::{execute, AgentState};

use super::config::{Resources, RunConfig};
use super::runner::{episode_metrics, run_episode, EpisodeLog, EpisodeSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metrics: NavMetricsReport,
    /// Episodes left out of the means.
    pub failures: Vec<EpisodeFailure>,
}

impl ExperimentReport {
    pub fn merge(self, other: ExperimentReport) -> Self {
        let mut failures = self.failures;
        failures.extend(other.failures);
        failures.sort_by(|a, b| a.id.cmp(&b.id));
        ExperimentReport {
            metrics: self.metrics.merge(other.metrics),
            failures,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    /// One log per successful episode, in id order.
    pub logs: Vec<EpisodeLog>,
}

/// Evaluates every episode independently. Failed episodes are reported and
/// excluded from the means; if none succeed the run fails.
pub fn run_experiment(config: &RunConfig, resources: &Resources, episodes: &[EpisodeSpec]) -> Result<ExperimentOutcome> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    let results: Vec<(String, Result<EpisodeLog>)> = episodes
        .par_iter()
        .map(|spec| {
            let r = resources
                .graph(&spec.env)
                .and_then(|g| run_episode(config, spec, g, resources.policy.clone(), resources.oracle.clone()));
            (spec.id.clone(), r)
        })
        .collect();
    let mut logs = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(log) => logs.push(log),
            Err(e) => {
                log::warn!("episode {id} failed: {e}");
                failures.push(EpisodeFailure {
                    id,
                    error: e.to_string(),
                });
            }
        }
    }
    if logs.is_empty() {
        return Err(Error::AllEpisodesFailed(failures.len()));
    }
    logs.sort_by(|a, b| a.episode.id.cmp(&b.episode.id));
    failures.sort_by(|a, b| a.id.cmp(&b.id));
    let metrics = NavMetricsReport::from_records(logs.iter().map(|l| l.metrics.clone()).collect());
    Ok(ExperimentOutcome {
        report: ExperimentReport { metrics, failures },
        logs,
    })
}

/// One JSON line per episode.
pub fn write_run_log(path: impl AsRef<Path>, logs: &[EpisodeLog]) -> Result<()> {
    write_jsonl(path, logs)
}

pub fn read_run_log(path: impl AsRef<Path>) -> Result<Vec<EpisodeLog>> {
    read_jsonl(path)
}

/// Re-executes a log's recorded actions and recomputes its metrics. Fails
/// if the walk or the metrics differ from the recording.
pub fn replay(log: &EpisodeLog, graph: &NavGraph) -> Result<EpisodeMetrics> {
    let spec = &log.episode;
    let mismatch = |what: String| Error::Format(format!("replay of `{}` diverged: {what}", spec.id));
    let mut state = AgentState::new(graph, &spec.start, spec.heading)?;
    for rec in &log.steps {
        if state.current != rec.node {
            return Err(mismatch(format!("step {} starts at {} instead of {}", rec.t, state.current, rec.node)));
        }
        let tr = execute(&state, graph, &rec.action).map_err(|e| Error::at_step(rec.t, e))?;
        if tr.traversed != rec.traversed {
            return Err(mismatch(format!("step {} walked a different route", rec.t)));
        }
        state = tr.state;
    }
    if state.visited != log.trajectory {
        return Err(mismatch("trajectory".into()));
    }
    let metrics = episode_metrics(graph, spec, &state.visited, log.distance, log.questions())?;
    if metrics != log.metrics {
        return Err(mismatch("metrics".into()));
    }
    Ok(metrics)
}
