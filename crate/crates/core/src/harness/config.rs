use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::askpolicy::AskPolicy;
use crate::dialogue::{DialogueBackend, DialogueModel, TemplateBackend, DEFAULT_MAX_FUTURE};
use crate::episodes::{load_env_set, read_jsonl, EnvSet, Episode};
use crate::error::{Error, Result};
use crate::metrics::DistanceMode;
use crate::navgraph::NavGraph;
use crate::navigator::NavigatorPolicy;

pub const DEFAULT_MAX_ACTIONS: usize = 15;
pub const DEFAULT_MAX_ROUNDS: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Argmax,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinNavigator {
    GreedyGeodesic,
    KeywordMatch,
    Random,
}

/// Where the navigator policy comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum NavigatorSpec {
    Builtin { variant: BuiltinNavigator },
    File { path: PathBuf },
    Inline { policy: NavigatorPolicy },
}

impl Default for NavigatorSpec {
    fn default() -> Self {
        NavigatorSpec::Builtin {
            variant: BuiltinNavigator::GreedyGeodesic,
        }
    }
}

impl NavigatorSpec {
    pub fn resolve(&self) -> Result<NavigatorPolicy> {
        let p = match self {
            NavigatorSpec::Builtin { variant } => match variant {
                BuiltinNavigator::GreedyGeodesic => NavigatorPolicy::greedy_geodesic(),
                BuiltinNavigator::KeywordMatch => NavigatorPolicy::keyword_match(),
                BuiltinNavigator::Random => NavigatorPolicy::random(),
            },
            NavigatorSpec::File { path } => NavigatorPolicy::load(path)?,
            NavigatorSpec::Inline { policy } => policy.clone(),
        };
        p.validate()?;
        Ok(p)
    }
}

/// Who answers the navigator's questions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum DialogueSpec {
    #[default]
    Template,
    Model {
        checkpoint: PathBuf,
    },
    /// Questions are relayed to a person through the session server.
    Human,
}

fn default_max_actions() -> usize {
    DEFAULT_MAX_ACTIONS
}

fn default_max_rounds() -> usize {
    DEFAULT_MAX_ROUNDS
}

fn default_max_future() -> usize {
    DEFAULT_MAX_FUTURE
}

fn default_ask() -> AskPolicy {
    AskPolicy::Never
}

/// Experiment configuration, loadable from TOML or JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory of environment JSON files, or a single file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environments: Option<PathBuf>,
    /// Episodes JSONL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub navigator: NavigatorSpec,
    #[serde(default = "default_ask")]
    pub ask: AskPolicy,
    #[serde(default)]
    pub dialogue: DialogueSpec,
    #[serde(default = "default_max_actions")]
    pub max_actions: usize,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Future observations shown to the oracle.
    #[serde(default = "default_max_future")]
    pub max_future: usize,
    #[serde(default)]
    pub distance: DistanceMode,
    #[serde(default)]
    pub seed: u64,
    /// Adds wall-clock time to each log. Logs are then no longer
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            environments: None,
            dataset: None,
            navigator: NavigatorSpec::default(),
            ask: default_ask(),
            dialogue: DialogueSpec::default(),
            max_actions: DEFAULT_MAX_ACTIONS,
            selection: Selection::default(),
            max_rounds: DEFAULT_MAX_ROUNDS,
            max_future: DEFAULT_MAX_FUTURE,
            distance: DistanceMode::default(),
            seed: 0,
            record_timing: false,
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when `format_hint` ends in `.json`.
    pub fn parse(text: &str, format_hint: &str) -> Result<Self> {
        if format_hint.ends_with(".json") {
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("{format_hint}: {e}")))
        } else {
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("{format_hint}: {e}")))
        }
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory, and must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = RunConfig::parse(&text, &path.to_string_lossy())?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.rebase(base);
        config.validate()?;
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.environments.iter_mut().for_each(fix);
        self.dataset.iter_mut().for_each(fix);
        if let NavigatorSpec::File { path } = &mut self.navigator {
            fix(path);
        }
        if let DialogueSpec::Model { checkpoint } = &mut self.dialogue {
            fix(checkpoint);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_actions == 0 {
            return Err(Error::InvalidConfig("max_actions must be at least 1".into()));
        }
        self.ask.validate()?;
        let mut files: Vec<&Path> = Vec::new();
        files.extend(self.environments.as_deref());
        files.extend(self.dataset.as_deref());
        if let NavigatorSpec::File { path } = &self.navigator {
            files.push(path);
        }
        if let DialogueSpec::Model { checkpoint } = &self.dialogue {
            files.push(checkpoint);
        }
        for f in files {
            if !f.exists() {
                return Err(Error::InvalidConfig(format!("{} does not exist", f.display())));
            }
        }
        if let NavigatorSpec::Inline { policy } = &self.navigator {
            policy.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config: {e}")))
    }
}

/// Answers come from an autonomous backend or from a person.
#[derive(Clone)]
pub enum Oracle {
    Backend(Arc<dyn DialogueBackend>),
    Human,
}

impl Oracle {
    pub fn name(&self) -> &'static str {
        match self {
            Oracle::Backend(b) => b.name(),
            Oracle::Human => "human",
        }
    }
}

impl std::fmt::Debug for Oracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl DialogueSpec {
    pub fn resolve(&self) -> Result<Oracle> {
        Ok(match self {
            DialogueSpec::Template => Oracle::Backend(Arc::new(TemplateBackend)),
            DialogueSpec::Model { checkpoint } => Oracle::Backend(Arc::new(DialogueModel::load(checkpoint)?)),
            DialogueSpec::Human => Oracle::Human,
        })
    }
}

/// Shared, immutable inputs of a run.
#[derive(Clone, Debug)]
pub struct Resources {
    pub graphs: BTreeMap<String, Arc<NavGraph>>,
    pub policy: Arc<NavigatorPolicy>,
    pub oracle: Oracle,
}

impl Resources {
    pub fn new(envs: EnvSet, policy: NavigatorPolicy, oracle: Oracle) -> Result<Self> {
        policy.validate()?;
        Ok(Resources {
            graphs: envs.into_iter().map(|(k, g)| (k, Arc::new(g))).collect(),
            policy: Arc::new(policy),
            oracle,
        })
    }

    pub fn graph(&self, env: &str) -> Result<Arc<NavGraph>> {
        self.graphs
            .get(env)
            .cloned()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown environment `{env}`")))
    }

    /// Loads the environments, policy and oracle named by `config`.
    pub fn load(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = config
            .environments
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("no environments given".into()))?;
        Resources::new(load_env_set(dir)?, config.navigator.resolve()?, config.dialogue.resolve()?)
    }
}

/// Reads the episodes named by `config.dataset`.
pub fn load_dataset(config: &RunConfig) -> Result<Vec<Episode>> {
    let path = config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no dataset given".into()))?;
    read_jsonl(path)
}
