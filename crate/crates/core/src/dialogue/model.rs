use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::context::DialogueContext;
use super::decoder::{self, DecoderConfig, DecoderParams};
use super::sequence::{build_sequence, DialogueSequence, Segment, SequenceBuilder};
use super::tokenize::{Vocabulary, EOS_ID};
use super::{DialogueBackend, QaPair, SpanEnd};
use crate::error::{Error, Result};
use crate::util::rng;

/// Hard cap on generated tokens per span.
pub const SPAN_CAP: usize = 40;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 100,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean masked cross-entropy per epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], o: &TrainOptions) {
        self.step += 1;
        let c1 = 1.0 - o.beta1.powi(self.step);
        let c2 = 1.0 - o.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = o.beta1 * self.m[i] + (1.0 - o.beta1) * grad[i];
            self.v[i] = o.beta2 * self.v[i] + (1.0 - o.beta2) * grad[i] * grad[i];
            params[i] -= o.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + o.eps);
        }
    }
}

/// Trains a fresh decoder on `corpus` with Adam. Deterministic given
/// `options.seed`; gradients within a batch are computed in parallel but
/// summed in corpus order.
pub fn train_dialogue_model(
    config: &DecoderConfig,
    corpus: &[DialogueSequence],
    options: &TrainOptions,
) -> Result<(DecoderParams, TrainReport)> {
    let params = DecoderParams::init(config, options.seed);
    continue_training(config, params, corpus, options)
}

/// Like [`train_dialogue_model`] but starting from existing parameters.
pub fn continue_training(
    config: &DecoderConfig,
    mut params: DecoderParams,
    corpus: &[DialogueSequence],
    options: &TrainOptions,
) -> Result<(DecoderParams, TrainReport)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if options.batch_size == 0 || options.epochs == 0 {
        return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
    }
    if let Some(s) = corpus.iter().find(|s| s.len() > config.max_len) {
        return Err(Error::SequenceTooLong {
            len: s.len(),
            max: config.max_len,
        });
    }
    let mut adam = Adam::new(params.data.len());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut r = rng(options.seed ^ 0x5eed);
    let mut report = TrainReport { epoch_losses: Vec::new() };
    for epoch in 0..options.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(options.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| decoder::loss_and_grad(config, &params, &corpus[i]))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; params.data.len()];
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::DivergedLoss { epoch });
                }
                total += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.update(&mut params.data, &grad, options);
        }
        let mean = total / corpus.len() as f64;
        log::debug!("dialogue epoch {epoch}: loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok((params, report))
}

/// A trained decoder together with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueModel {
    pub config: DecoderConfig,
    pub params: DecoderParams,
    pub vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: DecoderConfig,
    vocabulary: Vec<String>,
    tensors: BTreeMap<String, Vec<f64>>,
}

impl DialogueModel {
    pub fn new(config: DecoderConfig, params: DecoderParams, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::DimensionMismatch(format!(
                "vocabulary has {} tokens, config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        if params.data.len() != config.param_count() {
            return Err(Error::DimensionMismatch("parameter count does not match config".into()));
        }
        Ok(DialogueModel { config, params, vocab })
    }

    /// Encodes `(context, question, answer)` triples as training sequences.
    pub fn encode_corpus<'a>(
        vocab: &Vocabulary,
        max_len: usize,
        pairs: impl IntoIterator<Item = (&'a DialogueContext, &'a QaPair)>,
    ) -> Result<Vec<DialogueSequence>> {
        pairs
            .into_iter()
            .map(|(c, qa)| build_sequence(c, vocab, &qa.question, &qa.answer, max_len))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: "vdn-dialogue-decoder".into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocabulary: (0..self.vocab.len()).map(|i| self.vocab.token(i).to_string()).collect(),
            tensors: self.params.to_named(&self.config),
        };
        serde_json::to_string(&ck).map_err(|e| Error::json("dialogue checkpoint", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::json("dialogue checkpoint", e))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        let vocab = Vocabulary::from_text(&ck.vocabulary.join("\n"))?;
        let params = DecoderParams::from_named(&ck.config, &ck.tensors)?;
        DialogueModel::new(ck.config, params, vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DialogueModel::from_json(&text)
    }

    /// Greedy continuation of `builder` in `segment` until EOS or the cap.
    /// The EOS (if any) is appended to the builder.
    fn decode_span(&self, builder: &mut SequenceBuilder, segment: Segment) -> Result<(Vec<String>, SpanEnd)> {
        let mut out = Vec::new();
        while out.len() < SPAN_CAP {
            let seq = builder.clone().finish();
            let cache = decoder::forward(&self.config, &self.params, &seq)?;
            let v = self.config.vocab_size;
            let row = &cache.logits[(seq.len() - 1) * v..seq.len() * v];
            let next = argmax(row);
            if next == EOS_ID {
                if segment == Segment::AnswerText {
                    builder.token(EOS_ID, segment, true);
                }
                return Ok((out, SpanEnd::Eos));
            }
            builder.token(next, segment, true);
            out.push(self.vocab.token(next).to_string());
        }
        Ok((out, SpanEnd::Cap))
    }

    /// Greedy question then answer. The question sees only the target and the
    /// current view; route images are appended before the answer.
    pub fn generate(&self, context: &DialogueContext) -> Result<QaPair> {
        if context.future_obs.is_empty() {
            return Err(Error::EmptyPath);
        }
        let mut b = SequenceBuilder::question_prompt(context, &self.vocab);
        let (question, _) = self.decode_span(&mut b, Segment::QuestionText)?;
        b.open_answer(context);
        let (answer, answer_end) = self.decode_span(&mut b, Segment::AnswerText)?;
        Ok(QaPair {
            question,
            answer,
            answer_end,
        })
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of a question/answer pair.
pub fn generate_qa(model: &DialogueModel, context: &DialogueContext) -> Result<QaPair> {
    model.generate(context)
}

impl DialogueBackend for DialogueModel {
    fn name(&self) -> &'static str {
        "decoder"
    }

    fn generate(&self, context: &DialogueContext, _seed: u64) -> Result<QaPair> {
        DialogueModel::generate(self, context)
    }
}
