//! Question/answer generation.
//!
//! Two backends share the [`DialogueBackend`] trait: a rule-based template
//! oracle grounded in the shortest path, and a small causal decoder that
//! consumes the interleaved target/image/question/answer layout built by
//! [`build_sequence`].

pub mod context;
pub mod decoder;
pub mod model;
pub mod sequence;
pub mod template;
pub mod tokenize;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use context::{DialogueContext, TurnClass, TurnDirective, Waypoint, DEFAULT_MAX_FUTURE};
pub use decoder::{DecoderConfig, DecoderParams};
pub use model::{generate_qa, train_dialogue_model, DialogueModel, TrainOptions, TrainReport};
pub use sequence::{build_sequence, DialogueSequence, Element, Segment};
pub use template::{template_generate, TemplateBackend, TemplateSet};
pub use tokenize::{detokenize, tokenize, Vocabulary};

/// How a generated span ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanEnd {
    /// The end-of-span marker was produced.
    Eos,
    /// Generation hit the per-span token cap.
    Cap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub answer_end: SpanEnd,
}

/// A source of question/answer pairs for a navigation context.
pub trait DialogueBackend: Send + Sync {
    fn name(&self) -> &'static str;

    fn generate(&self, context: &DialogueContext, seed: u64) -> Result<QaPair>;
}
