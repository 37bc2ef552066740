//! Agent state, the global action space and linear-softmax navigation
//! policies.
//!
//! The action space at every step is every node the agent has observed
//! except the one it stands on, plus STOP. Nodes it has already visited stay
//! selectable so the agent can backtrack. Selecting a non-adjacent node walks
//! the shortest path to it.

use std::collections::BTreeSet;
use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::askpolicy::EntropyRecord;
use crate::dialogue::tokenize;
use crate::episodes::{EnvSet, NdhInstance};
use crate::error::{Error, Result};
use crate::navgraph::{bearing, label_embedding, sector_for_bearing, NavGraph, NodeId, SECTORS};
use crate::util::{cosine, entropy, rng, softmax};

pub const FEATURE_DIM: usize = 5;

/// Phrase that marks an answer given at the goal.
pub const TERMINAL_PHRASE: [&str; 2] = ["stop", "here"];

/// Agent's walk and topological map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub current: NodeId,
    pub heading: usize,
    pub visited: Vec<NodeId>,
    pub observed: BTreeSet<NodeId>,
    pub steps_taken: usize,
    /// Meters walked so far.
    pub path_length: f64,
}

impl AgentState {
    /// Fresh state at `start` with the map already updated.
    pub fn new(graph: &NavGraph, start: &NodeId, heading: usize) -> Result<Self> {
        graph.index_of(start)?;
        if heading >= SECTORS {
            return Err(Error::InvalidConfig(format!("heading sector {heading} out of range")));
        }
        let state = AgentState {
            current: start.clone(),
            heading,
            visited: vec![start.clone()],
            observed: BTreeSet::from([start.clone()]),
            steps_taken: 0,
            path_length: 0.0,
        };
        update_map(state, graph)
    }
}

/// Adds the current node and its neighbours to the map.
pub fn update_map(mut state: AgentState, graph: &NavGraph) -> Result<AgentState> {
    state.observed.insert(state.current.clone());
    for (n, _) in graph.neighbors(&state.current)? {
        state.observed.insert(n.clone());
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Node(NodeId),
    Stop,
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::Node(n) => write!(f, "{n}"),
            Action::Stop => f.write_str("STOP"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub candidates: Vec<(Action, f64)>,
    /// Nats.
    pub entropy: f64,
}

impl ActionDistribution {
    fn from_scores(actions: Vec<Action>, scores: &[f64], tau: f64) -> Self {
        let probs = softmax(scores, tau);
        let entropy = entropy(&probs);
        ActionDistribution {
            candidates: actions.into_iter().zip(probs).collect(),
            entropy,
        }
    }

    /// Most probable action; ties go to the earlier candidate.
    pub fn argmax(&self) -> &Action {
        let mut best = 0;
        for (i, (_, p)) in self.candidates.iter().enumerate() {
            if *p > self.candidates[best].1 {
                best = i;
            }
        }
        &self.candidates[best].0
    }

    pub fn sample(&self, r: &mut impl Rng) -> &Action {
        let u: f64 = r.random();
        let mut acc = 0.0;
        for (a, p) in &self.candidates {
            acc += p;
            if u < acc {
                return a;
            }
        }
        &self.candidates.last().expect("non-empty").0
    }

    pub fn probability(&self, action: &Action) -> Option<f64> {
        self.candidates.iter().find(|(a, _)| a == action).map(|(_, p)| *p)
    }
}

/// Instruction tokens with the label phrases and terminal marker it mentions.
#[derive(Clone, Debug, PartialEq)]
pub struct Instruction {
    pub tokens: Vec<String>,
}

impl Instruction {
    pub fn new(tokens: Vec<String>) -> Self {
        Instruction { tokens }
    }

    pub fn from_text(text: &str) -> Self {
        Instruction { tokens: tokenize(text) }
    }

    /// The opening pseudo-instruction, `find the {object}`.
    pub fn for_target(object: &str) -> Self {
        Instruction::from_text(&format!("find the {object}"))
    }

    pub fn push_text(&mut self, text: &str) {
        self.tokens.extend(tokenize(text));
    }

    pub fn mentions(&self, phrase: &str) -> bool {
        let p = tokenize(phrase);
        !p.is_empty() && self.tokens.windows(p.len()).any(|w| w == p.as_slice())
    }

    pub fn is_terminal(&self) -> bool {
        self.tokens.windows(2).any(|w| w[0] == TERMINAL_PHRASE[0] && w[1] == TERMINAL_PHRASE[1])
    }

    /// Sum of the label embeddings of every room and object in `graph` that
    /// the instruction mentions.
    pub fn label_bag(&self, graph: &NavGraph) -> Vec<f64> {
        let dim = graph.feature_dim();
        let mut bag = vec![0.0; dim];
        let mut add = |token: String| {
            for (b, e) in bag.iter_mut().zip(label_embedding(&token, dim)) {
                *b += e;
            }
        };
        let mut rooms: Vec<&str> = graph.nodes().iter().map(|n| n.room.as_str()).collect();
        rooms.sort_unstable();
        rooms.dedup();
        for r in rooms {
            if self.mentions(r) {
                add(format!("room:{r}"));
            }
        }
        for o in graph.object_labels() {
            if self.mentions(o) {
                add(format!("object:{o}"));
            }
        }
        bag
    }
}

/// Per-state feature cache shared by every candidate of one scoring call.
struct FeatureContext<'a> {
    graph: &'a NavGraph,
    state: &'a AgentState,
    instruction: &'a Instruction,
    bag: Vec<f64>,
    terminal: bool,
}

impl<'a> FeatureContext<'a> {
    fn new(graph: &'a NavGraph, state: &'a AgentState, instruction: &'a Instruction) -> Self {
        FeatureContext {
            graph,
            state,
            instruction,
            bag: instruction.label_bag(graph),
            terminal: instruction.is_terminal(),
        }
    }

    fn overlap(&self, node: &NodeId) -> Result<f64> {
        let n = self.graph.node(node)?;
        Ok(n.labels().filter(|l| self.instruction.mentions(l)).count() as f64)
    }

    fn frontal_cosine(&self, node: &NodeId, sector: usize) -> Result<f64> {
        let f = self.graph.node(node)?.sector_feature(sector);
        Ok(if self.bag.iter().all(|x| *x == 0.0) { 0.0 } else { cosine(&f, &self.bag) })
    }

    fn features(&self, action: &Action) -> Result<[f64; FEATURE_DIM]> {
        match action {
            Action::Stop => Ok([
                0.0,
                self.overlap(&self.state.current)?,
                0.0,
                self.frontal_cosine(&self.state.current, self.state.heading)?,
                if self.terminal { 1.0 } else { 0.0 },
            ]),
            Action::Node(c) => {
                if c == &self.state.current || !self.state.observed.contains(c) {
                    return Err(Error::UnknownCandidate(c.to_string()));
                }
                let path = self.graph.dijkstra(&self.state.current, c)?;
                let n = path.nodes.len();
                let arrival = sector_for_bearing(bearing(
                    &self.graph.node(&path.nodes[n - 2])?.position,
                    &self.graph.node(c)?.position,
                ));
                Ok([
                    -path.length,
                    self.overlap(c)?,
                    if self.state.visited.contains(c) { 1.0 } else { 0.0 },
                    self.frontal_cosine(c, arrival)?,
                    0.0,
                ])
            }
        }
    }
}

/// Feature vector of one candidate action.
pub fn action_features(
    state: &AgentState,
    graph: &NavGraph,
    instruction: &Instruction,
    action: &Action,
) -> Result<[f64; FEATURE_DIM]> {
    FeatureContext::new(graph, state, instruction).features(action)
}

/// Observed nodes other than the current one, in id order, then STOP.
pub fn candidate_actions(state: &AgentState) -> Result<Vec<Action>> {
    let mut out: Vec<Action> = state
        .observed
        .iter()
        .filter(|n| **n != state.current)
        .map(|n| Action::Node(n.clone()))
        .collect();
    if out.is_empty() {
        return Err(Error::NoCandidates);
    }
    out.push(Action::Stop);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    /// Oracle: scores candidates by negative geodesic distance to the target.
    GreedyGeodesic,
    /// Fixed hand-set weights over the same features as the linear policy.
    KeywordMatch,
    TrainableLinear,
    Random,
}

const KEYWORD_WEIGHTS: [f64; FEATURE_DIM] = [0.3, 2.0, -1.0, 1.0, 4.0];
const KEYWORD_STOP_BIAS: f64 = -2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavigatorPolicy {
    pub variant: PolicyVariant,
    pub tau: f64,
    #[serde(default)]
    pub weights: Vec<f64>,
    /// Constant added to the STOP score.
    #[serde(default)]
    pub stop_bias: f64,
}

impl NavigatorPolicy {
    pub fn greedy_geodesic() -> Self {
        NavigatorPolicy {
            variant: PolicyVariant::GreedyGeodesic,
            tau: 1.0,
            weights: vec![],
            stop_bias: 0.0,
        }
    }

    pub fn random() -> Self {
        NavigatorPolicy {
            variant: PolicyVariant::Random,
            tau: 1.0,
            weights: vec![],
            stop_bias: 0.0,
        }
    }

    pub fn keyword_match() -> Self {
        NavigatorPolicy {
            variant: PolicyVariant::KeywordMatch,
            tau: 1.0,
            weights: KEYWORD_WEIGHTS.to_vec(),
            stop_bias: KEYWORD_STOP_BIAS,
        }
    }

    /// Trainable linear policy with zero weights (uniform distribution).
    pub fn linear(tau: f64) -> Self {
        NavigatorPolicy {
            variant: PolicyVariant::TrainableLinear,
            tau,
            weights: vec![0.0; FEATURE_DIM],
            stop_bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.tau)));
        }
        let needs_weights = matches!(self.variant, PolicyVariant::TrainableLinear | PolicyVariant::KeywordMatch);
        if needs_weights && self.weights.len() != FEATURE_DIM {
            return Err(Error::DimensionMismatch(format!(
                "policy has {} weights, features have {FEATURE_DIM}",
                self.weights.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("navigator policy", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: NavigatorPolicy = serde_json::from_str(text).map_err(|e| Error::json("navigator policy", e))?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        NavigatorPolicy::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn linear_score(&self, f: &[f64; FEATURE_DIM], action: &Action) -> f64 {
        let s: f64 = self.weights.iter().zip(f).map(|(w, x)| w * x).sum();
        if *action == Action::Stop {
            s + self.stop_bias
        } else {
            s
        }
    }
}

/// Candidates with their feature vectors.
pub fn featurize(
    state: &AgentState,
    graph: &NavGraph,
    instruction: &Instruction,
) -> Result<(Vec<Action>, Vec<[f64; FEATURE_DIM]>)> {
    let actions = candidate_actions(state)?;
    let ctx = FeatureContext::new(graph, state, instruction);
    let feats = actions.iter().map(|a| ctx.features(a)).collect::<Result<_>>()?;
    Ok((actions, feats))
}

/// Action distribution of `policy` in `state`. `target` is read only by the
/// greedy-geodesic oracle.
pub fn score(
    policy: &NavigatorPolicy,
    state: &AgentState,
    graph: &NavGraph,
    instruction: &Instruction,
    target: &NodeId,
) -> Result<ActionDistribution> {
    policy.validate()?;
    match policy.variant {
        PolicyVariant::Random => {
            let actions = candidate_actions(state)?;
            let scores = vec![0.0; actions.len()];
            Ok(ActionDistribution::from_scores(actions, &scores, policy.tau))
        }
        PolicyVariant::GreedyGeodesic => {
            let actions = candidate_actions(state)?;
            let scores = actions
                .iter()
                .map(|a| match a {
                    Action::Node(n) => graph.geodesic_distance(n, target).map(|d| -d),
                    Action::Stop => graph.geodesic_distance(&state.current, target).map(|d| -d),
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(ActionDistribution::from_scores(actions, &scores, policy.tau))
        }
        PolicyVariant::KeywordMatch | PolicyVariant::TrainableLinear => {
            let (actions, feats) = featurize(state, graph, instruction)?;
            let scores: Vec<f64> = actions.iter().zip(&feats).map(|(a, f)| policy.linear_score(f, a)).collect();
            Ok(ActionDistribution::from_scores(actions, &scores, policy.tau))
        }
    }
}

/// Result of executing one action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: AgentState,
    /// Nodes walked, excluding the starting node; empty for STOP.
    pub traversed: Vec<NodeId>,
    pub length: f64,
    pub stopped: bool,
}

/// Applies `action`: STOP ends the episode, a node is reached by walking the
/// shortest path to it, updating the map at every node passed.
pub fn execute(state: &AgentState, graph: &NavGraph, action: &Action) -> Result<Transition> {
    let target = match action {
        Action::Stop => {
            return Ok(Transition {
                state: state.clone(),
                traversed: vec![],
                length: 0.0,
                stopped: true,
            })
        }
        Action::Node(n) => n,
    };
    if target == &state.current {
        return Err(Error::IllegalAction {
            action: target.to_string(),
            reason: "the current node is not a candidate".into(),
        });
    }
    if !state.observed.contains(target) {
        return Err(Error::IllegalAction {
            action: target.to_string(),
            reason: "node has not been observed".into(),
        });
    }
    let path = graph.dijkstra(&state.current, target)?;
    let mut next = state.clone();
    for pair in path.nodes.windows(2) {
        let from = graph.node(&pair[0])?.position;
        let to = graph.node(&pair[1])?.position;
        next.heading = sector_for_bearing(bearing(&from, &to));
        next.current = pair[1].clone();
        next.visited.push(pair[1].clone());
        next.steps_taken += 1;
        next = update_map(next, graph)?;
    }
    next.path_length += path.length;
    Ok(Transition {
        state: next,
        traversed: path.nodes[1..].to_vec(),
        length: path.length,
        stopped: false,
    })
}

// ---------------------------------------------------------------------------
// Training

/// Cross-entropy of `label` under softmax(scores / tau) for a linear policy,
/// with gradients for the weights and the STOP bias.
pub fn cross_entropy_and_grad(
    weights: &[f64],
    stop_bias: f64,
    tau: f64,
    feats: &[[f64; FEATURE_DIM]],
    stop_index: Option<usize>,
    label: usize,
) -> (f64, [f64; FEATURE_DIM], f64) {
    let scores: Vec<f64> = feats
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let s: f64 = weights.iter().zip(f).map(|(w, x)| w * x).sum();
            if Some(i) == stop_index {
                s + stop_bias
            } else {
                s
            }
        })
        .collect();
    let probs = softmax(&scores, tau);
    let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
    let mut gw = [0.0; FEATURE_DIM];
    let mut gb = 0.0;
    for (i, (f, p)) in feats.iter().zip(&probs).enumerate() {
        let coef = (p - if i == label { 1.0 } else { 0.0 }) / tau;
        for (g, x) in gw.iter_mut().zip(f) {
            *g += coef * x;
        }
        if Some(i) == stop_index {
            gb += coef;
        }
    }
    (loss, gw, gb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherForcingConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the teacher-forcing (imitation) term.
    pub ml_weight: f64,
    /// Weight of the sampled-rollout term; ignored unless `rollout`.
    pub sample_weight: f64,
    pub rollout: bool,
    pub max_rollout_steps: usize,
    pub seed: u64,
}

impl Default for TeacherForcingConfig {
    fn default() -> Self {
        TeacherForcingConfig {
            epochs: 20,
            lr: 0.05,
            ml_weight: 0.2,
            sample_weight: 1.0,
            rollout: false,
            max_rollout_steps: 15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcingReport {
    pub epoch_losses: Vec<f64>,
    pub entropy_log: Vec<EntropyRecord>,
}

/// Instruction for an NDH instance: the target label, then the dialogue.
/// With `drop_last_exchange`, the final question/answer is left out.
pub fn instance_instruction(inst: &NdhInstance, drop_last_exchange: bool) -> Instruction {
    let mut ins = Instruction::for_target(&inst.target_object);
    let keep = if drop_last_exchange {
        inst.instruction.len().saturating_sub(2)
    } else {
        inst.instruction.len()
    };
    for u in &inst.instruction[..keep] {
        ins.push_text(&u.text);
    }
    ins
}

struct Step {
    feats: Vec<[f64; FEATURE_DIM]>,
    stop_index: usize,
    label: usize,
}

/// Supervision steps along an instance's path, with STOP labelled at the
/// final node when it is the target.
fn supervision_steps(inst: &NdhInstance, graph: &NavGraph, instruction: &Instruction) -> Result<Vec<Step>> {
    let mut state = AgentState::new(graph, inst.start(), inst.heading)?;
    let mut steps = Vec::new();
    for (k, node) in inst.path.iter().enumerate() {
        let label_action = match inst.path.get(k + 1) {
            Some(next) => Action::Node(next.clone()),
            None if *node == inst.target_node => Action::Stop,
            None => break,
        };
        let (actions, feats) = featurize(&state, graph, instruction)?;
        let label = actions
            .iter()
            .position(|a| *a == label_action)
            .ok_or_else(|| Error::UnknownCandidate(label_action.to_string()))?;
        steps.push(Step {
            stop_index: actions.len() - 1,
            feats,
            label,
        });
        if let Action::Node(_) = label_action {
            state = execute(&state, graph, &label_action)?.state;
        }
    }
    Ok(steps)
}

/// Trains a linear policy on NDH instances by teacher forcing, optionally
/// mixed with a sampled-rollout term, then logs per-step entropies under the
/// trained weights.
pub fn train_teacher_forcing(
    policy: &NavigatorPolicy,
    dataset: &[NdhInstance],
    envs: &EnvSet,
    config: &TeacherForcingConfig,
) -> Result<(NavigatorPolicy, TeacherForcingReport)> {
    if policy.variant != PolicyVariant::TrainableLinear {
        return Err(Error::InvalidConfig("only the trainable linear policy can be trained".into()));
    }
    policy.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let graph_of = |inst: &NdhInstance| {
        envs.get(&inst.env)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown environment `{}`", inst.env)))
    };
    let prepared: Vec<Vec<Step>> = dataset
        .iter()
        .map(|inst| supervision_steps(inst, graph_of(inst)?, &instance_instruction(inst, false)))
        .collect::<Result<_>>()?;

    let mut p = policy.clone();
    let mut r = rng(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut count = 0usize;
        for &i in &order {
            let mut gw = [0.0; FEATURE_DIM];
            let mut gb = 0.0;
            let mut n = 0.0;
            for s in &prepared[i] {
                let (loss, w, b) = cross_entropy_and_grad(&p.weights, p.stop_bias, p.tau, &s.feats, Some(s.stop_index), s.label);
                total += loss;
                count += 1;
                for (g, x) in gw.iter_mut().zip(w) {
                    *g += config.ml_weight * x;
                }
                gb += config.ml_weight * b;
                n += 1.0;
            }
            if config.rollout {
                let inst = &dataset[i];
                let graph = graph_of(inst)?;
                let ins = instance_instruction(inst, false);
                for (w, b) in rollout_gradients(&p, inst, graph, &ins, config.max_rollout_steps, &mut r)? {
                    for (g, x) in gw.iter_mut().zip(w) {
                        *g += config.sample_weight * x;
                    }
                    gb += config.sample_weight * b;
                    n += 1.0;
                }
            }
            if n > 0.0 {
                for (wt, g) in p.weights.iter_mut().zip(gw) {
                    *wt -= config.lr * g / n;
                }
                p.stop_bias -= config.lr * gb / n;
            }
        }
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        if !mean.is_finite() || p.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::DivergedLoss { epoch });
        }
        log::debug!("navigator epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }

    let entropy_log = entropy_log(&p, dataset, envs)?;
    Ok((p, TeacherForcingReport { epoch_losses, entropy_log }))
}

/// Follows the policy's own samples; at each step the label is the next node
/// on the shortest path to the target, or STOP at the target.
fn rollout_gradients(
    p: &NavigatorPolicy,
    inst: &NdhInstance,
    graph: &NavGraph,
    instruction: &Instruction,
    max_steps: usize,
    r: &mut impl Rng,
) -> Result<Vec<([f64; FEATURE_DIM], f64)>> {
    let mut state = AgentState::new(graph, inst.start(), inst.heading)?;
    let mut out = Vec::new();
    for _ in 0..max_steps {
        let (actions, feats) = featurize(&state, graph, instruction)?;
        let label_action = if state.current == inst.target_node {
            Action::Stop
        } else {
            Action::Node(graph.dijkstra(&state.current, &inst.target_node)?.nodes[1].clone())
        };
        let label = actions.iter().position(|a| *a == label_action).expect("neighbours are observed");
        let (_, w, b) = cross_entropy_and_grad(&p.weights, p.stop_bias, p.tau, &feats, Some(actions.len() - 1), label);
        out.push((w, b));
        let scores: Vec<f64> = actions.iter().zip(&feats).map(|(a, f)| p.linear_score(f, a)).collect();
        let dist = ActionDistribution::from_scores(actions, &scores, p.tau);
        let chosen = dist.sample(r).clone();
        let t = execute(&state, graph, &chosen)?;
        if t.stopped {
            break;
        }
        state = t.state;
    }
    Ok(out)
}

/// Per-step entropies of `policy` along every instance's supervision path.
/// The first step of each instance is where its dialogue turn happened, so
/// its entropy is taken before the turn's answer is added and it is labelled
/// as asked.
pub fn entropy_log(policy: &NavigatorPolicy, dataset: &[NdhInstance], envs: &EnvSet) -> Result<Vec<EntropyRecord>> {
    let mut log = Vec::new();
    for inst in dataset {
        let graph = envs
            .get(&inst.env)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown environment `{}`", inst.env)))?;
        let full = instance_instruction(inst, false);
        let before = instance_instruction(inst, true);
        let steps = supervision_steps(inst, graph, &full)?;
        let mut state = AgentState::new(graph, inst.start(), inst.heading)?;
        for k in 0..steps.len() {
            let ins = if k == 0 { &before } else { &full };
            let dist = score(policy, &state, graph, ins, &inst.target_node)?;
            log.push(EntropyRecord {
                entropy: dist.entropy,
                asked: k == 0,
                episode: inst.id(),
                t: k + 1,
            });
            if let Some(next) = inst.path.get(k + 1) {
                state = execute(&state, graph, &Action::Node(next.clone()))?.state;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navgraph::{Node, Path};

    fn node(id: &str, x: f64, y: f64, room: &str, objects: &[&str]) -> Node {
        Node {
            id: id.into(),
            position: [x, y, 0.0],
            room: room.into(),
            objects: objects.iter().map(|s| s.to_string()).collect(),
            panorama: vec![vec![1.0, 0.0]; SECTORS],
        }
    }

    /// a - b - c - d in a line, with e hanging off b.
    fn line() -> NavGraph {
        NavGraph::new(
            2,
            vec![
                node("a", 0.0, 0.0, "hallway", &[]),
                node("b", 2.0, 0.0, "hallway", &["lamp"]),
                node("c", 4.0, 0.0, "kitchen", &["sink"]),
                node("d", 6.0, 0.0, "kitchen", &["oven"]),
                node("e", 2.0, 2.0, "office", &["desk"]),
            ],
            &[
                ("a".into(), "b".into()),
                ("b".into(), "c".into()),
                ("c".into(), "d".into()),
                ("b".into(), "e".into()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn map_update_is_idempotent_and_closes() {
        let g = line();
        let s = AgentState::new(&g, &"b".into(), 0).unwrap();
        let ids: BTreeSet<NodeId> = ["a", "b", "c", "e"].iter().map(|s| NodeId::from(*s)).collect();
        assert_eq!(s.observed, ids);
        assert_eq!(update_map(s.clone(), &g).unwrap(), s);
        let mut t = s;
        for n in ["c", "d"] {
            t = execute(&t, &g, &Action::Node(n.into())).unwrap().state;
        }
        assert_eq!(t.observed.len(), 5);
    }

    #[test]
    fn features_of_a_neighbour() {
        let g = line();
        let s = AgentState::new(&g, &"a".into(), 0).unwrap();
        let empty = Instruction::new(vec![]);
        let f = action_features(&s, &g, &empty, &Action::Node("b".into())).unwrap();
        assert_eq!(f[0], -2.0);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[2], 0.0);
        let ins = Instruction::from_text("the lamp is in the hallway");
        let f = action_features(&s, &g, &ins, &Action::Node("b".into())).unwrap();
        assert_eq!(f[1], 2.0);
        assert_eq!(f, action_features(&s, &g, &ins, &Action::Node("b".into())).unwrap());
        assert!(matches!(
            action_features(&s, &g, &ins, &Action::Node("d".into())),
            Err(Error::UnknownCandidate(_))
        ));
        let stop = action_features(&s, &g, &Instruction::from_text("stop here , the lamp"), &Action::Stop).unwrap();
        assert_eq!(stop[4], 1.0);
    }

    #[test]
    fn distributions_are_valid() {
        let g = line();
        let s = AgentState::new(&g, &"b".into(), 0).unwrap();
        let ins = Instruction::from_text("go to the kitchen");
        for policy in [
            NavigatorPolicy::random(),
            NavigatorPolicy::greedy_geodesic(),
            NavigatorPolicy::keyword_match(),
            NavigatorPolicy::linear(0.5),
        ] {
            let d = score(&policy, &s, &g, &ins, &"d".into()).unwrap();
            let total: f64 = d.candidates.iter().map(|c| c.1).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(d.candidates.iter().all(|c| c.1 >= 0.0 && c.0 != Action::Node("b".into())));
        }
        let r = score(&NavigatorPolicy::random(), &s, &g, &ins, &"d".into()).unwrap();
        assert_eq!(r.candidates.len(), 4);
        assert!((r.entropy - 4f64.ln()).abs() < 1e-12);
        let zero = score(&NavigatorPolicy::linear(1.0), &s, &g, &ins, &"d".into()).unwrap();
        assert!(zero.candidates.iter().all(|c| (c.1 - 0.25).abs() < 1e-12));
    }

    #[test]
    fn greedy_picks_the_planner_next_node() {
        let g = line();
        let s = AgentState::new(&g, &"a".into(), 0).unwrap();
        let mut p = NavigatorPolicy::greedy_geodesic();
        p.tau = 1e-3;
        let d = score(&p, &s, &g, &Instruction::new(vec![]), &"d".into()).unwrap();
        assert_eq!(d.argmax(), &Action::Node(g.dijkstra(&"a".into(), &"d".into()).unwrap().nodes[1].clone()));
    }

    #[test]
    fn single_node_graph_has_no_candidates() {
        let g = NavGraph::new(2, vec![node("a", 0.0, 0.0, "hallway", &["lamp"])], &[]).unwrap();
        let s = AgentState::new(&g, &"a".into(), 0).unwrap();
        assert!(matches!(
            score(&NavigatorPolicy::random(), &s, &g, &Instruction::new(vec![]), &"a".into()),
            Err(Error::NoCandidates)
        ));
    }

    #[test]
    fn execute_walks_and_backtracks() {
        let g = line();
        let s = AgentState::new(&g, &"b".into(), 0).unwrap();
        let t = execute(&s, &g, &Action::Node("c".into())).unwrap();
        assert_eq!(t.state.visited.len(), 2);
        let t2 = execute(&t.state, &g, &Action::Node("e".into())).unwrap();
        // c -> b -> e: two hops, both edges accrued.
        assert_eq!(t2.traversed, vec![NodeId::from("b"), NodeId::from("e")]);
        assert_eq!(t2.state.visited.len(), 4);
        let oracle = g.dijkstra(&"c".into(), &"e".into()).unwrap();
        assert_eq!(t2.length, oracle.length);
        // Back to a visited node.
        let t3 = execute(&t2.state, &g, &Action::Node("c".into())).unwrap();
        assert_eq!(t3.state.current, NodeId::from("c"));
        let walk = Path::from_nodes(&g, t3.state.visited.clone()).unwrap();
        assert!((walk.length - t3.state.path_length).abs() < 1e-12);
        assert_eq!(t3.state.steps_taken, t3.state.visited.len() - 1);
        assert!(matches!(
            execute(&t3.state, &g, &Action::Node("c".into())),
            Err(Error::IllegalAction { .. })
        ));
        let fresh = AgentState::new(&g, &"a".into(), 0).unwrap();
        assert!(matches!(
            execute(&fresh, &g, &Action::Node("d".into())),
            Err(Error::IllegalAction { .. })
        ));
        let stop = execute(&fresh, &g, &Action::Stop).unwrap();
        assert!(stop.stopped && stop.state == fresh);
    }

    #[test]
    fn heading_follows_the_last_edge() {
        let g = line();
        let s = AgentState::new(&g, &"a".into(), 3).unwrap();
        let t = execute(&s, &g, &Action::Node("b".into())).unwrap();
        assert_eq!(t.state.heading, 0);
        let t = execute(&t.state, &g, &Action::Node("e".into())).unwrap();
        assert_eq!(t.state.heading, sector_for_bearing(90.0));
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let feats = [[-1.0, 2.0, 0.0, 0.3, 0.0], [-2.5, 0.0, 1.0, -0.2, 0.0], [0.0, 1.0, 0.0, 0.5, 1.0]];
        let w = [0.4, -0.3, 0.7, 1.1, -0.5];
        let (b, tau) = (0.25, 0.7);
        for label in 0..3 {
            let (_, gw, gb) = cross_entropy_and_grad(&w, b, tau, &feats, Some(2), label);
            let h = 1e-6;
            for i in 0..FEATURE_DIM {
                let (mut up, mut down) = (w, w);
                up[i] += h;
                down[i] -= h;
                let fd = (cross_entropy_and_grad(&up, b, tau, &feats, Some(2), label).0
                    - cross_entropy_and_grad(&down, b, tau, &feats, Some(2), label).0)
                    / (2.0 * h);
                assert!((fd - gw[i]).abs() <= 1e-5 * fd.abs().max(gw[i].abs()).max(1e-6));
            }
            let fd = (cross_entropy_and_grad(&w, b + h, tau, &feats, Some(2), label).0
                - cross_entropy_and_grad(&w, b - h, tau, &feats, Some(2), label).0)
                / (2.0 * h);
            assert!((fd - gb).abs() <= 1e-5 * fd.abs().max(gb.abs()).max(1e-6));
        }
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let scores = [1.0, -0.5, 2.0, 0.0];
        let mut last = 0.0;
        for tau in [0.1, 0.3, 1.0, 3.0, 10.0] {
            let h = entropy(&softmax(&scores, tau));
            assert!(h >= last);
            last = h;
        }
    }

    #[test]
    fn policy_json_round_trip() {
        let mut p = NavigatorPolicy::linear(0.8);
        p.weights = vec![0.1, 0.2, -0.3, 0.4, 0.5];
        p.stop_bias = -1.0;
        let back = NavigatorPolicy::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(NavigatorPolicy::from_json(r#"{"variant":"trainable_linear","tau":0.0,"weights":[0,0,0,0,0]}"#).is_err());
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(v["variant"], "trainable_linear");
    }
}
