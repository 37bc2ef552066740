use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::askpolicy::{train_threshold, AskPolicy, EntropyRecord, ThresholdConfig, ThresholdReport};
use crate::dialogue::{
    train_dialogue_model, DecoderConfig, DialogueContext, DialogueModel, DialogueSequence, QaPair,
    SpanEnd, TemplateSet, TrainOptions, TrainReport, Vocabulary,
};
use crate::episodes::{
    augment_with_generated_dialogue, load_env_set, read_jsonl, split_ndh, write_jsonl, EnvSet, Episode, NdhInstance,
    Supervision,
};
use crate::error::{Error, Result};
use crate::navigator::{train_teacher_forcing, NavigatorPolicy, TeacherForcingConfig, TeacherForcingReport};
use crate::util::derive_seed;

use super::config::{DialogueSpec, NavigatorSpec, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DialogueStageConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Future observations per training sequence.
    pub max_future: usize,
    /// Cap on training sequences, taken in dataset order.
    pub max_sequences: usize,
    pub train: TrainOptions,
}

impl Default for DialogueStageConfig {
    fn default() -> Self {
        DialogueStageConfig {
            layers: 2,
            d_model: 32,
            heads: 2,
            max_len: 128,
            max_future: 4,
            max_sequences: 96,
            train: TrainOptions {
                epochs: 30,
                lr: 3e-3,
                batch_size: 8,
                ..TrainOptions::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavigatorStageConfig {
    pub tau: f64,
    pub supervision: Supervision,
    /// Doubles the training set with dialogue-model exchanges.
    pub augment: bool,
    pub train: TeacherForcingConfig,
}

impl Default for NavigatorStageConfig {
    fn default() -> Self {
        NavigatorStageConfig {
            tau: 1.0,
            supervision: Supervision::Player,
            augment: true,
            train: TeacherForcingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub environments: PathBuf,
    pub episodes: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dialogue: DialogueStageConfig,
    #[serde(default)]
    pub navigator: NavigatorStageConfig,
    #[serde(default)]
    pub threshold: ThresholdConfig,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let hint = path.to_string_lossy();
        let mut c: PipelineConfig = if hint.ends_with(".json") {
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{hint}: {e}")))?
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{hint}: {e}")))?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.environments, &mut c.episodes, &mut c.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }
}

/// File names of the pipeline's outputs inside the output directory.
pub mod artifacts {
    pub const DIALOGUE_MODEL: &str = "dialogue_model.json";
    pub const DIALOGUE_LOSSES: &str = "dialogue_losses.json";
    pub const NDH_TRAIN: &str = "ndh_train.jsonl";
    pub const NAVIGATOR: &str = "navigator.json";
    pub const NAVIGATOR_LOSSES: &str = "navigator_losses.json";
    pub const ENTROPY_LOG: &str = "entropy_log.jsonl";
    pub const ASK_POLICY: &str = "ask_policy.json";
    pub const THRESHOLD_REPORT: &str = "threshold_report.json";
    pub const RUN_CONFIG: &str = "run.toml";
}

/// Vocabulary covering the template phrasing, every label in `envs` and
/// any extra tokens.
pub fn dialogue_vocabulary<'a>(envs: &EnvSet, extra: impl IntoIterator<Item = &'a str>) -> Vocabulary {
    let labels: Vec<String> = envs
        .values()
        .flat_map(|g| g.nodes().iter().flat_map(|n| std::iter::once(n.room.clone()).chain(n.objects.iter().cloned())))
        .collect();
    let mut words = TemplateSet::bundled().vocabulary_words(labels.iter().map(String::as_str));
    words.extend(extra.into_iter().map(str::to_string));
    Vocabulary::from_tokens(words.iter().map(String::as_str))
}

/// Recorded exchanges of `episodes` with their dialogue contexts.
pub fn dialogue_corpus(episodes: &[Episode], envs: &EnvSet, max_future: usize) -> Result<Vec<(DialogueContext, QaPair)>> {
    let mut out = Vec::new();
    for ep in episodes {
        let graph = envs
            .get(&ep.env)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown environment `{}`", ep.env)))?;
        let headings = ep.player_headings(graph)?;
        for turn in &ep.dialogue {
            let ctx = DialogueContext::from_graph(
                graph,
                &turn.node,
                headings[turn.time_step - 1],
                &ep.target_node,
                &ep.target_object,
                max_future,
            )?;
            out.push((
                ctx,
                QaPair {
                    question: turn.question.clone(),
                    answer: turn.answer.clone(),
                    answer_end: SpanEnd::Eos,
                },
            ));
        }
    }
    Ok(out)
}

/// Stage 1: fits the decoder to the recorded exchanges.
pub fn train_dialogue_stage(
    episodes: &[Episode],
    envs: &EnvSet,
    config: &DialogueStageConfig,
    seed: u64,
) -> Result<(DialogueModel, TrainReport)> {
    let corpus = dialogue_corpus(episodes, envs, config.max_future)?;
    let vocab = dialogue_vocabulary(
        envs,
        corpus.iter().flat_map(|(_, qa)| qa.question.iter().chain(&qa.answer).map(String::as_str)),
    );
    let feature_dim = envs.values().next().ok_or(Error::EmptyCorpus)?.feature_dim();
    let decoder = DecoderConfig {
        layers: config.layers,
        d_model: config.d_model,
        heads: config.heads,
        vocab_size: vocab.len(),
        max_len: config.max_len,
        feature_dim,
    };
    decoder.validate()?;
    let mut sequences: Vec<DialogueSequence> = Vec::new();
    let mut skipped = 0;
    for (ctx, qa) in &corpus {
        if sequences.len() == config.max_sequences {
            break;
        }
        match DialogueModel::encode_corpus(&vocab, config.max_len, [(ctx, qa)]) {
            Ok(mut s) => sequences.append(&mut s),
            Err(Error::SequenceTooLong { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} dialogue sequences longer than {}", config.max_len);
    }
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let opts = TrainOptions {
        seed: derive_seed(seed, "dialogue"),
        ..config.train.clone()
    };
    let (params, report) = train_dialogue_model(&decoder, &sequences, &opts)?;
    Ok((DialogueModel::new(decoder, params, vocab)?, report))
}

/// Stage 2: teacher-forced training of the linear navigator, returning the
/// training instances it used.
pub fn train_navigator_stage(
    episodes: &[Episode],
    envs: &EnvSet,
    model: Option<&DialogueModel>,
    config: &NavigatorStageConfig,
    seed: u64,
) -> Result<(NavigatorPolicy, TeacherForcingReport, Vec<NdhInstance>)> {
    let mut instances = split_ndh(episodes, envs, config.supervision)?;
    if let (true, Some(m)) = (config.augment, model) {
        instances = augment_with_generated_dialogue(&instances, envs, m, derive_seed(seed, "augment"))?;
    }
    let tf = TeacherForcingConfig {
        seed: derive_seed(seed, "navigator"),
        ..config.train.clone()
    };
    let (policy, report) = train_teacher_forcing(&NavigatorPolicy::linear(config.tau), &instances, envs, &tf)?;
    Ok((policy, report, instances))
}

/// Stage 3: fits the learnable threshold to the entropy log.
pub fn train_threshold_stage(log: &[EntropyRecord], config: &ThresholdConfig) -> Result<(AskPolicy, ThresholdReport)> {
    let pairs: Vec<(f64, bool)> = log.iter().map(|r| (r.entropy, r.asked)).collect();
    let report = train_threshold(&pairs, config)?;
    Ok((
        AskPolicy::Learnable {
            alpha_hat: report.alpha_hat,
            stochastic: false,
        },
        report,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    pub dialogue_losses: TrainReport,
    pub navigator_losses: Vec<f64>,
    pub threshold: ThresholdReport,
    pub ask: AskPolicy,
    /// Config that evaluates the trained artifacts on the training episodes.
    pub run_config: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Runs the three stages in order, writing each stage's outputs before the
/// next starts.
pub fn train_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    let envs = load_env_set(&config.environments)?;
    let episodes: Vec<Episode> = read_jsonl(&config.episodes)?;
    if episodes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let out = &config.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    log::info!("stage 1: dialogue model");
    let (model, dialogue_losses) = train_dialogue_stage(&episodes, &envs, &config.dialogue, config.seed)?;
    model.save(out.join(artifacts::DIALOGUE_MODEL))?;
    write_json(&out.join(artifacts::DIALOGUE_LOSSES), &dialogue_losses)?;

    log::info!("stage 2: navigator");
    let (policy, nav, instances) = train_navigator_stage(&episodes, &envs, Some(&model), &config.navigator, config.seed)?;
    write_jsonl(out.join(artifacts::NDH_TRAIN), &instances)?;
    policy.save(out.join(artifacts::NAVIGATOR))?;
    write_json(&out.join(artifacts::NAVIGATOR_LOSSES), &nav.epoch_losses)?;
    write_jsonl(out.join(artifacts::ENTROPY_LOG), &nav.entropy_log)?;

    log::info!("stage 3: ask threshold");
    let (ask, threshold) = train_threshold_stage(&nav.entropy_log, &config.threshold)?;
    write_json(&out.join(artifacts::ASK_POLICY), &ask)?;
    write_json(&out.join(artifacts::THRESHOLD_REPORT), &threshold)?;

    // Written paths are absolute so the config loads from any directory.
    let abs = |p: PathBuf| std::path::absolute(&p).map_err(|e| Error::io(&p, e));
    let run = RunConfig {
        environments: Some(abs(config.environments.clone())?),
        dataset: Some(abs(config.episodes.clone())?),
        navigator: NavigatorSpec::File {
            path: abs(out.join(artifacts::NAVIGATOR))?,
        },
        ask: ask.clone(),
        dialogue: DialogueSpec::Model {
            checkpoint: abs(out.join(artifacts::DIALOGUE_MODEL))?,
        },
        seed: config.seed,
        ..RunConfig::default()
    };
    let run_config = out.join(artifacts::RUN_CONFIG);
    std::fs::write(&run_config, run.to_toml()?).map_err(|e| Error::io(&run_config, e))?;

    Ok(PipelineOutcome {
        dialogue_losses,
        navigator_losses: nav.epoch_losses,
        threshold,
        ask,
        run_config,
    })
}
