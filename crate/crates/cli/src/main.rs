use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use vdn_core::askpolicy::{EntropyRecord, ThresholdConfig};
use vdn_core::dialogue::{tokenize, DialogueBackend, DialogueModel, TemplateBackend};
use vdn_core::episodes::{
    augment_with_generated_dialogue, inter_turn_distances, load_env_set, mode, read_jsonl, save_env_set,
    split_ndh, synthesize_dataset, write_jsonl, EnvSet, Episode, EpisodeConfig, NdhInstance, Supervision,
};
use vdn_core::harness::pipeline::{
    artifacts, train_dialogue_stage, train_pipeline, train_threshold_stage, DialogueStageConfig,
    PipelineConfig,
};
use vdn_core::harness::{
    load_dataset, read_run_log, replay, run_experiment, write_run_log, EpisodeSpec, Resources, RunConfig,
};
use vdn_core::metrics::evaluate_text;
use vdn_core::navgraph::{generate_environment, EnvConfig};
use vdn_core::navigator::{train_teacher_forcing, NavigatorPolicy, TeacherForcingConfig};
use vdn_core::util::derive_seed;

#[derive(Parser)]
#[command(name = "vdn", version, about = "Dialogue-assisted navigation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SupervisionArg {
    Planner,
    Player,
}

impl From<SupervisionArg> for Supervision {
    fn from(s: SupervisionArg) -> Self {
        match s {
            SupervisionArg::Planner => Supervision::Planner,
            SupervisionArg::Player => Supervision::Player,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural environments, one JSON file each.
    GenEnv {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        rooms: usize,
        #[arg(long, default_value_t = 4)]
        nodes_per_room: usize,
        #[arg(long, default_value = "env")]
        prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize dialogue episodes over a set of environments.
    GenEpisodes {
        #[arg(long)]
        envs: PathBuf,
        #[arg(long, default_value_t = 10)]
        per_env: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut episodes into one navigation instance per dialogue turn.
    SplitNdh {
        #[arg(long)]
        envs: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long, value_enum, default_value = "player")]
        supervision: SupervisionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append a generated-dialogue copy of every instance.
    Augment {
        #[arg(long)]
        envs: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        /// Dialogue model checkpoint; the template oracle when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the dialogue model on recorded exchanges.
    TrainDialogue {
        #[arg(long)]
        envs: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        /// TOML or JSON with model and optimizer settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: teacher-forced training of the linear navigator.
    TrainNavigator {
        #[arg(long)]
        envs: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 3: fit the ask threshold to an entropy log.
    TrainThreshold {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all three training stages from a pipeline config.
    Pipeline { config: PathBuf },
    /// Evaluate a run config and print the metrics summary.
    Run {
        config: PathBuf,
        /// Per-episode run log (JSONL).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-episode metrics as CSV.
        #[arg(long)]
        emit_csv: Option<PathBuf>,
    },
    /// Re-execute a run log and check its metrics.
    Replay {
        log: PathBuf,
        #[arg(long)]
        envs: PathBuf,
    },
    /// BLEU, ROUGE-L and CIDEr over candidate/reference pairs.
    EvalText { pairs: PathBuf },
    /// Serve human-answered sessions over HTTP and WebSocket.
    Serve {
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Idle seconds before a session is dropped.
        #[arg(long, default_value_t = 1800)]
        idle_timeout: u64,
    },
}

/// A user-side mistake: exit code 1.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<vdn_core::Error>() {
            return match err {
                vdn_core::Error::InvalidConfig(_) | vdn_core::Error::Io { .. } | vdn_core::Error::Json { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Reads a TOML or JSON settings file, or the defaults.
fn settings<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|x| x == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

fn write_pretty<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| path.display().to_string())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn envs(dir: &Path) -> anyhow::Result<EnvSet> {
    Ok(load_env_set(dir)?)
}

#[derive(Deserialize)]
struct TextPair {
    candidate: String,
    reference: String,
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenEnv {
            count,
            seed,
            rooms,
            nodes_per_room,
            prefix,
            out,
        } => {
            let config = EnvConfig::new(rooms, nodes_per_room);
            let set: EnvSet = (0..count)
                .map(|i| {
                    let g = generate_environment(seed + i as u64, &config)?;
                    Ok((format!("{prefix}{i}"), g))
                })
                .collect::<vdn_core::Result<_>>()?;
            save_env_set(&out, &set)?;
            log::info!("wrote {count} environments to {}", out.display());
        }
        Command::GenEpisodes {
            envs: dir,
            per_env,
            seed,
            out,
        } => {
            let set = envs(&dir)?;
            let episodes = synthesize_dataset(&set, per_env, seed, &EpisodeConfig::default())?;
            write_jsonl(&out, &episodes)?;
            let gaps = inter_turn_distances(&episodes);
            log::info!(
                "wrote {} episodes to {}; inter-turn gap mode {:?}",
                episodes.len(),
                out.display(),
                mode(&gaps)
            );
        }
        Command::SplitNdh {
            envs: dir,
            episodes,
            supervision,
            out,
        } => {
            let set = envs(&dir)?;
            let eps: Vec<Episode> = read_jsonl(&episodes)?;
            let instances = split_ndh(&eps, &set, supervision.into())?;
            write_jsonl(&out, &instances)?;
            log::info!("wrote {} instances to {}", instances.len(), out.display());
        }
        Command::Augment {
            envs: dir,
            instances,
            model,
            seed,
            out,
        } => {
            let set = envs(&dir)?;
            let base: Vec<NdhInstance> = read_jsonl(&instances)?;
            let backend: Box<dyn DialogueBackend> = match model {
                Some(path) => Box::new(DialogueModel::load(path)?),
                None => Box::new(TemplateBackend),
            };
            let all = augment_with_generated_dialogue(&base, &set, backend.as_ref(), seed)?;
            write_jsonl(&out, &all)?;
            log::info!("wrote {} instances to {}", all.len(), out.display());
        }
        Command::TrainDialogue {
            envs: dir,
            episodes,
            config,
            seed,
            out,
        } => {
            let cfg: DialogueStageConfig = settings(config.as_deref())?;
            let set = envs(&dir)?;
            let eps: Vec<Episode> = read_jsonl(&episodes)?;
            create_dir(&out)?;
            let (model, report) = train_dialogue_stage(&eps, &set, &cfg, seed)?;
            model.save(out.join(artifacts::DIALOGUE_MODEL))?;
            write_pretty(&out.join(artifacts::DIALOGUE_LOSSES), &report)?;
            log::info!("dialogue loss {:?} -> {:?}", report.initial(), report.last());
        }
        Command::TrainNavigator {
            envs: dir,
            instances,
            config,
            tau,
            seed,
            out,
        } => {
            let mut cfg: TeacherForcingConfig = settings(config.as_deref())?;
            cfg.seed = derive_seed(seed, "navigator");
            let set = envs(&dir)?;
            let data: Vec<NdhInstance> = read_jsonl(&instances)?;
            create_dir(&out)?;
            let (policy, report) = train_teacher_forcing(&NavigatorPolicy::linear(tau), &data, &set, &cfg)?;
            policy.save(out.join(artifacts::NAVIGATOR))?;
            write_pretty(&out.join(artifacts::NAVIGATOR_LOSSES), &report.epoch_losses)?;
            write_jsonl(out.join(artifacts::ENTROPY_LOG), &report.entropy_log)?;
            log::info!(
                "navigator loss {:?} -> {:?}",
                report.epoch_losses.first(),
                report.epoch_losses.last()
            );
        }
        Command::TrainThreshold { log, config, out } => {
            let cfg: ThresholdConfig = settings(config.as_deref())?;
            let records: Vec<EntropyRecord> = read_jsonl(&log)?;
            create_dir(&out)?;
            let (ask, report) = train_threshold_stage(&records, &cfg)?;
            write_pretty(&out.join(artifacts::ASK_POLICY), &ask)?;
            write_pretty(&out.join(artifacts::THRESHOLD_REPORT), &report)?;
            print_json(&ask)?;
        }
        Command::Pipeline { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let outcome = train_pipeline(&cfg)?;
            print_json(&outcome.ask)?;
            log::info!("run config written to {}", outcome.run_config.display());
        }
        Command::Run {
            config,
            log,
            report,
            emit_csv,
        } => {
            let cfg = RunConfig::load(&config)?;
            let resources = Resources::load(&cfg)?;
            let specs: Vec<EpisodeSpec> = load_dataset(&cfg)?.iter().map(EpisodeSpec::from).collect();
            let outcome = run_experiment(&cfg, &resources, &specs)?;
            if let Some(path) = log {
                write_run_log(&path, &outcome.logs)?;
            }
            if let Some(path) = report {
                write_pretty(&path, &outcome.report)?;
            }
            if let Some(path) = emit_csv {
                std::fs::write(&path, outcome.report.metrics.to_csv()).with_context(|| path.display().to_string())?;
            }
            let m = &outcome.report.metrics;
            print_json(&serde_json::json!({
                "episodes": m.episodes,
                "failures": outcome.report.failures.len(),
                "gp": m.gp,
                "sr": m.sr,
                "spl": m.spl,
                "ndtw": m.ndtw,
                "mean_questions": m.mean_questions,
            }))?;
        }
        Command::Replay { log, envs: dir } => {
            let set = envs(&dir)?;
            let logs = read_run_log(&log)?;
            for l in &logs {
                let graph = set
                    .get(&l.episode.env)
                    .ok_or_else(|| ConfigError(format!("unknown environment `{}`", l.episode.env)))?;
                replay(l, graph)?;
            }
            println!("replayed {} episodes", logs.len());
        }
        Command::EvalText { pairs } => {
            let rows: Vec<TextPair> = read_jsonl(&pairs)?;
            let tokenized: Vec<_> = rows
                .iter()
                .map(|p| (tokenize(&p.candidate), tokenize(&p.reference)))
                .collect();
            let report = evaluate_text(&tokenized)?;
            print_json(&serde_json::json!({
                "pairs": report.pairs,
                "bleu": report.bleu,
                "rouge_l": report.rouge_l,
                "cider": report.cider,
            }))?;
        }
        Command::Serve {
            config,
            addr,
            idle_timeout,
        } => {
            let cfg = RunConfig::load(&config)?;
            let resources = Resources::load(&cfg)?;
            let specs: Vec<EpisodeSpec> = match cfg.dataset {
                Some(_) => load_dataset(&cfg)?.iter().map(EpisodeSpec::from).collect(),
                None => Vec::new(),
            };
            let state = vdn_server::AppState::new(cfg, resources, specs)
                .map_err(|e| ConfigError(e.to_string()))?
                .with_idle_timeout(Duration::from_secs(idle_timeout));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .map_err(|e| ConfigError(format!("cannot bind {addr}: {e}")))?;
                log::info!("listening on {}", listener.local_addr()?);
                vdn_server::serve(listener, state).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let config = anyhow::Error::new(vdn_core::Error::InvalidConfig("x".into()));
        assert_eq!(exit_code(&config), 1);
        assert_eq!(exit_code(&anyhow::Error::new(ConfigError("x".into()))), 1);
        assert_eq!(exit_code(&anyhow::Error::new(vdn_core::Error::NoCandidates)), 2);
        let wrapped = anyhow::Error::new(vdn_core::Error::EmptyCorpus).context("while training");
        assert_eq!(exit_code(&wrapped), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 2);
    }

    #[test]
    fn arguments_parse() {
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["vdn", "run", "x.toml", "--emit-csv", "m.csv"]).unwrap();
        assert!(matches!(cli.command, Command::Run { emit_csv: Some(_), .. }));
    }
}
