use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no valid target object in environment `{0}`")]
    NoValidTarget(String),
    #[error("episode `{0}` has no dialogue turns")]
    EmptyDialogue(String),
    #[error("invalid episode `{id}`: {reason}")]
    InvalidEpisode { id: String, reason: String },
    #[error("dialogue generation failed for instance `{instance}`: {source}")]
    Generation {
        instance: String,
        #[source]
        source: Box<Error>,
    },
    #[error("no candidate actions available")]
    NoCandidates,
    #[error("`{0}` is not a candidate action")]
    UnknownCandidate(String),
    #[error("illegal action `{action}`: {reason}")]
    IllegalAction { action: String, reason: String },
    #[error("loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("path is empty")]
    EmptyPath,
    #[error("invalid length {0}: shortest path length must be positive")]
    InvalidLength(f64),
    #[error("candidate is empty")]
    EmptyCandidate,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("entropy log contains a single label value")]
    DegenerateLabels,
    #[error("all {0} episodes failed")]
    AllEpisodesFailed(usize),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn at_step(step: usize, err: Error) -> Self {
        Error::AtStep {
            step,
            source: Box::new(err),
        }
    }
}
