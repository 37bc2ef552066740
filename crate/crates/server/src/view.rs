//! Serialized session views. Field names here are the wire format; bump
//! [`SCHEMA_VERSION`] on any incompatible change and update `schemas/`.

use serde::{Deserialize, Serialize};
use vdn_core::dialogue::{detokenize, DialogueContext, Waypoint};
use vdn_core::harness::{EpisodeLog, EpisodeRunner, EpisodeSpec, StepRecord};
use vdn_core::metrics::NavMetricsReport;
use vdn_core::navigator::Action;
use vdn_core::util::norm;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingAnswer,
    Finished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub mean: f64,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaypointView {
    pub node: String,
    pub room: String,
    pub objects: Vec<String>,
    /// Heading sector on arrival.
    pub heading: usize,
    /// `straight`, `left`, `right` or `around`; absent for the current node.
    pub turn: Option<String>,
    /// 0 for the best-matching exit of that kind, 1 for the next, and so on.
    pub ordinal: Option<usize>,
    pub features: FeatureSummary,
    /// Reserved for rendered panoramas.
    pub image_url: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingView {
    pub t: usize,
    pub round: usize,
    pub question: String,
    pub target_object: String,
    /// The current node, then up to `max_future` nodes along the shortest
    /// path to the target.
    pub waypoints: Vec<WaypointView>,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub t: usize,
    pub node: String,
    pub action: String,
    pub entropy_pre: f64,
    pub entropy_post: Option<f64>,
    pub questions: usize,
}

/// Entropies of the step in progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenStepView {
    pub t: usize,
    pub entropy_pre: f64,
    pub entropy_post: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub t: usize,
    pub round: usize,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressView {
    pub steps: usize,
    pub path_length: f64,
    pub distance_to_target: f64,
    pub goal_progress: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub schema: u32,
    pub session: String,
    pub status: Status,
    pub episode: EpisodeSpec,
    pub current_node: String,
    pub heading: usize,
    pub visited: Vec<String>,
    /// Observed nodes not yet visited.
    pub frontier: Vec<String>,
    pub instruction: String,
    pub pending: Option<PendingView>,
    pub current_step: Option<OpenStepView>,
    pub steps: Vec<StepView>,
    pub transcript: Vec<TranscriptEntry>,
    pub progress: ProgressView,
    pub report: Option<NavMetricsReport>,
    pub log: Option<EpisodeLog>,
}

fn feature_summary(v: &[f64]) -> FeatureSummary {
    FeatureSummary {
        mean: if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 },
        norm: norm(v),
    }
}

fn waypoint_view(w: &Waypoint, features: &[f64]) -> WaypointView {
    WaypointView {
        node: w.node.to_string(),
        room: w.room.clone(),
        objects: w.objects.clone(),
        heading: w.heading,
        turn: w.turn.map(|t| t.class.as_str().to_string()),
        ordinal: w.turn.map(|t| t.ordinal),
        features: feature_summary(features),
        image_url: None,
    }
}

pub fn pending_view(t: usize, round: usize, question: &[String], ctx: &DialogueContext) -> PendingView {
    PendingView {
        t,
        round,
        question: detokenize(question),
        target_object: ctx.target_object.clone(),
        waypoints: ctx
            .waypoints
            .iter()
            .zip(&ctx.future_obs)
            .map(|(w, f)| waypoint_view(w, f))
            .collect(),
        truncated: ctx.truncated,
    }
}

fn step_view(s: &StepRecord) -> StepView {
    StepView {
        t: s.t,
        node: s.node.to_string(),
        action: match &s.action {
            Action::Node(n) => n.to_string(),
            Action::Stop => "STOP".into(),
        },
        entropy_pre: s.entropy_pre,
        entropy_post: s.entropy_post,
        questions: s.exchanges.len(),
    }
}

pub fn state_view(
    session: &str,
    runner: &EpisodeRunner,
    transcript: &[TranscriptEntry],
    progress: ProgressView,
) -> StateView {
    let state = runner.state();
    let log = runner.log();
    let steps = log.map_or(runner.steps(), |l| l.steps.as_slice());
    StateView {
        schema: SCHEMA_VERSION,
        session: session.to_string(),
        status: if log.is_some() { Status::Finished } else { Status::AwaitingAnswer },
        episode: runner.spec().clone(),
        current_node: state.current.to_string(),
        heading: state.heading,
        visited: state.visited.iter().map(ToString::to_string).collect(),
        frontier: state
            .observed
            .iter()
            .filter(|n| !state.visited.contains(n))
            .map(ToString::to_string)
            .collect(),
        instruction: detokenize(&runner.instruction().tokens),
        pending: runner
            .pending()
            .map(|q| pending_view(q.t, q.round, &q.question, &q.context)),
        current_step: runner.open_entropies().map(|(pre, post)| OpenStepView {
            t: runner.steps().len() + 1,
            entropy_pre: pre,
            entropy_post: post,
        }),
        steps: steps.iter().map(step_view).collect(),
        transcript: transcript.to_vec(),
        progress,
        report: log.map(|l| NavMetricsReport::from_records(vec![l.metrics.clone()])),
        log: log.cloned(),
    }
}
