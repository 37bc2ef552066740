use std::sync::Arc;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::askpolicy::should_ask;
use crate::dialogue::{detokenize, tokenize, DialogueContext, TemplateSet};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::metrics::{DistanceMode, EpisodeMetrics};
use crate::navgraph::{NavGraph, NodeId};
use crate::navigator::{execute, score, Action, ActionDistribution, AgentState, Instruction, NavigatorPolicy};
use crate::util::{derive_seed, rng};

use super::config::{Oracle, RunConfig, Selection};

/// Candidates kept in a step record's distribution summary.
const SUMMARY_SIZE: usize = 3;

/// What the runner needs to know about an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub id: String,
    pub env: String,
    pub start: NodeId,
    pub heading: usize,
    pub target_object: String,
    pub target_node: NodeId,
}

impl From<&Episode> for EpisodeSpec {
    fn from(ep: &Episode) -> Self {
        EpisodeSpec {
            id: ep.id.clone(),
            env: ep.env.clone(),
            start: ep.start.clone(),
            heading: ep.heading,
            target_object: ep.target_object.clone(),
            target_node: ep.target_node.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub question: String,
    pub answer: String,
    /// Entropy after the answer was added.
    pub entropy: f64,
    /// Instruction length in tokens after the exchange.
    pub instruction_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub t: usize,
    pub node: NodeId,
    pub heading: usize,
    pub candidates: usize,
    /// Most probable candidates of the distribution the action was drawn from.
    pub top: Vec<(Action, f64)>,
    pub entropy_pre: f64,
    /// Entropy after the last exchange; present iff a trigger fired.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_post: Option<f64>,
    pub triggered: bool,
    /// Instruction length in tokens before any exchange at this step.
    pub instruction_len: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchanges: Vec<Exchange>,
    pub action: Action,
    pub traversed: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: EpisodeSpec,
    pub backend: String,
    pub navigator: String,
    pub ask: String,
    pub distance: DistanceMode,
    pub steps: Vec<StepRecord>,
    /// Realized walk, starting at the start node.
    pub trajectory: Vec<NodeId>,
    pub stopped: bool,
    pub metrics: EpisodeMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

impl EpisodeLog {
    pub fn questions(&self) -> usize {
        self.steps.iter().map(|s| s.exchanges.len()).sum()
    }
}

/// A question waiting for a human answer.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingQuestion {
    pub t: usize,
    pub round: usize,
    pub question: Vec<String>,
    pub context: DialogueContext,
    /// Seed the autonomous template oracle would use for this exchange.
    pub seed: u64,
}

#[derive(Debug)]
pub enum Poll<'a> {
    Question(&'a PendingQuestion),
    Finished(&'a EpisodeLog),
}

#[derive(Clone, Debug)]
struct OpenStep {
    t: usize,
    node: NodeId,
    heading: usize,
    instruction_len: usize,
    entropy_pre: f64,
    dist: ActionDistribution,
    exchanges: Vec<Exchange>,
    pending: Option<PendingQuestion>,
}

/// One episode of the navigate/ask/answer loop. The runner advances on its
/// own until it finishes or, with a human oracle, a question is pending.
#[derive(Clone, Debug)]
pub struct EpisodeRunner {
    spec: EpisodeSpec,
    graph: Arc<NavGraph>,
    policy: Arc<NavigatorPolicy>,
    oracle: Oracle,
    config: RunConfig,
    state: AgentState,
    instruction: Instruction,
    rng: ChaCha8Rng,
    steps: Vec<StepRecord>,
    open: Option<OpenStep>,
    stopped: bool,
    log: Option<EpisodeLog>,
    started: Instant,
}

impl EpisodeRunner {
    pub fn new(
        config: &RunConfig,
        spec: EpisodeSpec,
        graph: Arc<NavGraph>,
        policy: Arc<NavigatorPolicy>,
        oracle: Oracle,
    ) -> Result<Self> {
        if config.max_actions == 0 {
            return Err(Error::InvalidConfig("max_actions must be at least 1".into()));
        }
        config.ask.validate()?;
        policy.validate()?;
        graph.index_of(&spec.target_node)?;
        let state = AgentState::new(&graph, &spec.start, spec.heading)?;
        Ok(EpisodeRunner {
            instruction: Instruction::for_target(&spec.target_object),
            rng: rng(derive_seed(config.seed, &spec.id)),
            config: config.clone(),
            spec,
            graph,
            policy,
            oracle,
            state,
            steps: Vec::new(),
            open: None,
            stopped: false,
            log: None,
            started: Instant::now(),
        })
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn instruction(&self) -> &Instruction {
        &self.instruction
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn pending(&self) -> Option<&PendingQuestion> {
        self.open.as_ref().and_then(|s| s.pending.as_ref())
    }

    pub fn log(&self) -> Option<&EpisodeLog> {
        self.log.as_ref()
    }

    /// Entropies of the step in progress, before and after its exchanges.
    pub fn open_entropies(&self) -> Option<(f64, Option<f64>)> {
        self.open
            .as_ref()
            .map(|s| (s.entropy_pre, (!s.exchanges.is_empty()).then_some(s.dist.entropy)))
    }

    /// Runs until the episode ends or a question awaits a human answer.
    pub fn advance(&mut self) -> Result<Poll<'_>> {
        loop {
            if self.log.is_some() {
                break;
            }
            if self.pending().is_some() {
                break;
            }
            let t = self.open.as_ref().map_or(self.steps.len() + 1, |s| s.t);
            self.step().map_err(|e| Error::at_step(t, e))?;
        }
        Ok(match (&self.log, self.pending()) {
            (Some(log), _) => Poll::Finished(log),
            (None, Some(q)) => Poll::Question(q),
            (None, None) => unreachable!("loop exits only when finished or pending"),
        })
    }

    /// Feeds a human answer into the pending exchange.
    pub fn answer(&mut self, text: &str) -> Result<()> {
        let open = self.open.as_mut().ok_or_else(|| Error::Format("no question is pending".into()))?;
        let q = open.pending.take().ok_or_else(|| Error::Format("no question is pending".into()))?;
        let t = q.t;
        self.apply_exchange(q.question, tokenize(text)).map_err(|e| Error::at_step(t, e))
    }

    /// One transition of the loop: open a step, ask, or act.
    fn step(&mut self) -> Result<()> {
        let Some(open) = &self.open else {
            if self.stopped || self.steps.len() == self.config.max_actions {
                return self.finish();
            }
            let dist = self.score()?;
            self.open = Some(OpenStep {
                t: self.steps.len() + 1,
                node: self.state.current.clone(),
                heading: self.state.heading,
                instruction_len: self.instruction.tokens.len(),
                entropy_pre: dist.entropy,
                dist,
                exchanges: Vec::new(),
                pending: None,
            });
            return Ok(());
        };
        let (t, round, h) = (open.t, open.exchanges.len(), open.dist.entropy);
        if round < self.config.max_rounds && should_ask(&self.config.ask, h, t, &mut self.rng) {
            let context = DialogueContext::from_graph(
                &self.graph,
                &self.state.current,
                self.state.heading,
                &self.spec.target_node,
                &self.spec.target_object,
                self.config.max_future,
            )?;
            let seed = derive_seed(self.config.seed, &format!("{}/{t}/{round}", self.spec.id));
            match &self.oracle {
                Oracle::Backend(b) => {
                    let qa = b.generate(&context, seed)?;
                    self.apply_exchange(qa.question, qa.answer)?;
                }
                Oracle::Human => {
                    let question = TemplateSet::bundled().generate(&context, seed)?.question;
                    self.open.as_mut().expect("open step").pending = Some(PendingQuestion {
                        t,
                        round,
                        question,
                        context,
                        seed,
                    });
                }
            }
            return Ok(());
        }
        self.act()
    }

    fn score(&self) -> Result<ActionDistribution> {
        score(&self.policy, &self.state, &self.graph, &self.instruction, &self.spec.target_node)
    }

    fn apply_exchange(&mut self, question: Vec<String>, answer: Vec<String>) -> Result<()> {
        self.instruction.tokens.extend(question.iter().cloned());
        self.instruction.tokens.extend(answer.iter().cloned());
        let dist = self.score()?;
        let open = self.open.as_mut().expect("exchange inside an open step");
        open.exchanges.push(Exchange {
            question: detokenize(&question),
            answer: detokenize(&answer),
            entropy: dist.entropy,
            instruction_len: self.instruction.tokens.len(),
        });
        open.dist = dist;
        Ok(())
    }

    fn act(&mut self) -> Result<()> {
        let open = self.open.take().expect("open step");
        let action = match self.config.selection {
            Selection::Argmax => open.dist.argmax().clone(),
            Selection::Sample => open.dist.sample(&mut self.rng).clone(),
        };
        let tr = execute(&self.state, &self.graph, &action)?;
        let mut top = open.dist.candidates.clone();
        top.sort_by(|a, b| b.1.total_cmp(&a.1));
        top.truncate(SUMMARY_SIZE);
        let triggered = !open.exchanges.is_empty();
        self.steps.push(StepRecord {
            t: open.t,
            node: open.node,
            heading: open.heading,
            candidates: open.dist.candidates.len(),
            top,
            entropy_pre: open.entropy_pre,
            entropy_post: triggered.then_some(open.dist.entropy),
            triggered,
            instruction_len: open.instruction_len,
            exchanges: open.exchanges,
            action,
            traversed: tr.traversed,
        });
        self.stopped = tr.stopped;
        self.state = tr.state;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        let metrics = episode_metrics(&self.graph, &self.spec, &self.state.visited, self.config.distance, self.questions())?;
        self.log = Some(EpisodeLog {
            episode: self.spec.clone(),
            backend: self.oracle.name().to_string(),
            navigator: format!("{:?}", self.policy.variant),
            ask: self.config.ask.label(),
            distance: self.config.distance,
            steps: std::mem::take(&mut self.steps),
            trajectory: self.state.visited.clone(),
            stopped: self.stopped,
            metrics,
            elapsed_ms: self
                .config
                .record_timing
                .then(|| self.started.elapsed().as_secs_f64() * 1e3),
        });
        Ok(())
    }

    fn questions(&self) -> usize {
        self.steps.iter().map(|s| s.exchanges.len()).sum()
    }
}

pub(crate) fn episode_metrics(
    graph: &NavGraph,
    spec: &EpisodeSpec,
    trajectory: &[NodeId],
    mode: DistanceMode,
    questions: usize,
) -> Result<EpisodeMetrics> {
    let reference = graph.dijkstra(&spec.start, &spec.target_node)?.nodes;
    EpisodeMetrics::compute(graph, &spec.id, trajectory, &spec.target_node, &reference, mode, questions)
}

/// Runs one episode to completion with an autonomous oracle.
pub fn run_episode(
    config: &RunConfig,
    spec: &EpisodeSpec,
    graph: Arc<NavGraph>,
    policy: Arc<NavigatorPolicy>,
    oracle: Oracle,
) -> Result<EpisodeLog> {
    if matches!(oracle, Oracle::Human) {
        return Err(Error::InvalidConfig("a human oracle needs an interactive session".into()));
    }
    let mut runner = EpisodeRunner::new(config, spec.clone(), graph, policy, oracle)?;
    match runner.advance()? {
        Poll::Finished(log) => Ok(log.clone()),
        Poll::Question(_) => unreachable!("autonomous oracles never leave questions pending"),
    }
}
