//! The interleaved decoder input:
//!
//! ```text
//! BOS target.. EOS [v_t] BOS question.. EOS [v_t .. v_t+k] BOS answer.. EOS
//! ```
//!
//! The current observation appears twice: once as the question's only image
//! and again as the first of the answer's images. Position `i` is trained to
//! predict element `i + 1` only when that element is a question or answer
//! token (including the closing EOS); predictions of anything that follows
//! an image slot are masked out.

use serde::{Deserialize, Serialize};

use super::context::DialogueContext;
use super::tokenize::{tokenize, Vocabulary, BOS_ID, EOS_ID};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Target = 0,
    QuestionText = 1,
    AnswerText = 2,
    Image = 3,
}

pub const SEGMENTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Element {
    Token(usize),
    /// Index into [`DialogueSequence::images`].
    Image(usize),
}

impl Element {
    pub fn is_token(&self) -> bool {
        matches!(self, Element::Token(_))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueSequence {
    pub elements: Vec<Element>,
    pub segments: Vec<Segment>,
    /// `loss_mask[i]` is true when position `i`'s next-element prediction is
    /// trained.
    pub loss_mask: Vec<bool>,
    pub images: Vec<Vec<f64>>,
}

impl DialogueSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Position ids are simply `0..len`.
    pub fn positions(&self) -> impl Iterator<Item = usize> {
        0..self.elements.len()
    }

    /// Next-token target for position `i`, if it is trained.
    pub fn target(&self, i: usize) -> Option<usize> {
        if !self.loss_mask[i] {
            return None;
        }
        match self.elements[i + 1] {
            Element::Token(t) => Some(t),
            Element::Image(_) => None,
        }
    }

    pub fn mask_count(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }
}

/// Incremental builder; the generation loop uses it to grow prompts.
#[derive(Clone, Debug, Default)]
pub(crate) struct SequenceBuilder {
    seq: DialogueSequence,
    trained: Vec<bool>,
}

impl SequenceBuilder {
    pub fn token(&mut self, id: usize, segment: Segment, trained: bool) {
        self.seq.elements.push(Element::Token(id));
        self.seq.segments.push(segment);
        self.trained.push(trained);
    }

    pub fn image(&mut self, features: &[f64]) {
        self.seq.elements.push(Element::Image(self.seq.images.len()));
        self.seq.images.push(features.to_vec());
        self.seq.segments.push(Segment::Image);
        self.trained.push(false);
    }

    pub fn len(&self) -> usize {
        self.seq.elements.len()
    }

    /// Target span and the single current-view image, then the question BOS.
    pub fn question_prompt(context: &DialogueContext, vocab: &Vocabulary) -> Self {
        let mut b = SequenceBuilder::default();
        b.token(BOS_ID, Segment::Target, false);
        for t in tokenize(&context.target_object) {
            b.token(vocab.id(&t), Segment::Target, false);
        }
        b.token(EOS_ID, Segment::Target, false);
        b.image(&context.current_obs);
        b.token(BOS_ID, Segment::QuestionText, false);
        b
    }

    /// Closes the question and appends the route images and the answer BOS.
    pub fn open_answer(&mut self, context: &DialogueContext) {
        self.token(EOS_ID, Segment::QuestionText, true);
        for f in &context.future_obs {
            self.image(f);
        }
        self.token(BOS_ID, Segment::AnswerText, false);
    }

    /// Mask is derived from whether the *next* element is trained.
    pub fn finish(mut self) -> DialogueSequence {
        let n = self.seq.elements.len();
        self.seq.loss_mask = (0..n).map(|i| i + 1 < n && self.trained[i + 1]).collect();
        self.seq
    }
}

/// Lays out `context`, `question` and `answer` as a training sequence.
pub fn build_sequence(
    context: &DialogueContext,
    vocab: &Vocabulary,
    question: &[String],
    answer: &[String],
    max_len: usize,
) -> Result<DialogueSequence> {
    if question.is_empty() || answer.is_empty() {
        return Err(Error::Format("question and answer must be non-empty".into()));
    }
    if context.future_obs.is_empty() {
        return Err(Error::Format("context has no observations".into()));
    }
    let mut b = SequenceBuilder::question_prompt(context, vocab);
    for t in question {
        b.token(vocab.id(t), Segment::QuestionText, true);
    }
    b.open_answer(context);
    for t in answer {
        b.token(vocab.id(t), Segment::AnswerText, true);
    }
    b.token(EOS_ID, Segment::AnswerText, true);
    if b.len() > max_len {
        return Err(Error::SequenceTooLong { len: b.len(), max: max_len });
    }
    Ok(b.finish())
}
