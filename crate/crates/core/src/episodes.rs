//! Episodes, NDH-style instances and the synthetic data generator.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dialogue::{detokenize, template_generate, DialogueBackend, DialogueContext, SpanEnd, DEFAULT_MAX_FUTURE};
use crate::error::{Error, Result};
use crate::navgraph::{bearing, sector_for_bearing, NavGraph, NodeId, Path, SECTORS};
use crate::util::{derive_seed, rng};

/// Environments by id.
pub type EnvSet = BTreeMap<String, NavGraph>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub node: NodeId,
    pub question: Vec<String>,
    pub answer: Vec<String>,
    /// 1-based step at which the exchange happened: the navigator had made
    /// `time_step - 1` moves along the player path.
    pub time_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub env: String,
    pub start: NodeId,
    /// Initial heading sector.
    pub heading: usize,
    pub target_object: String,
    pub target_node: NodeId,
    pub planner_path: Path,
    pub player_path: Path,
    pub dialogue: Vec<DialogueTurn>,
}

impl Episode {
    /// Checks the structural invariants against the episode's environment.
    pub fn validate(&self, graph: &NavGraph) -> Result<()> {
        let bad = |reason: String| Error::InvalidEpisode {
            id: self.id.clone(),
            reason,
        };
        let planner = graph.dijkstra(&self.start, &self.target_node)?;
        if planner.nodes != self.planner_path.nodes {
            return Err(bad("planner path is not the shortest path".into()));
        }
        Path::from_nodes(graph, self.player_path.nodes.clone()).map_err(|e| bad(e.to_string()))?;
        if self.player_path.start() != &self.start {
            return Err(bad("player path does not begin at the start node".into()));
        }
        let end = graph.node(self.player_path.end())?;
        let target = graph.node(&self.target_node)?;
        if crate::navgraph::euclidean(&end.position, &target.position) > crate::metrics::SUCCESS_RADIUS {
            return Err(bad("player path ends too far from the target".into()));
        }
        if !target.objects.contains(&self.target_object) {
            return Err(bad(format!("`{}` is not at the target node", self.target_object)));
        }
        if self.heading >= SECTORS {
            return Err(bad("heading out of range".into()));
        }
        let mut last = 0;
        for turn in &self.dialogue {
            if turn.question.is_empty() || turn.answer.is_empty() {
                return Err(bad("empty question or answer".into()));
            }
            if turn.time_step <= last {
                return Err(bad("dialogue time steps must be >= 1 and strictly increasing".into()));
            }
            if self.player_path.nodes.get(turn.time_step - 1) != Some(&turn.node) {
                return Err(bad(format!("turn at step {} is off the player path", turn.time_step)));
            }
            last = turn.time_step;
        }
        Ok(())
    }

    /// Heading sector on arrival at each player-path node.
    pub fn player_headings(&self, graph: &NavGraph) -> Result<Vec<usize>> {
        arrival_headings(graph, &self.player_path.nodes, self.heading)
    }
}

pub(crate) fn arrival_headings(graph: &NavGraph, nodes: &[NodeId], initial: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(nodes.len());
    out.push(initial);
    for pair in nodes.windows(2) {
        let a = graph.node(&pair[0])?.position;
        let b = graph.node(&pair[1])?.position;
        out.push(sector_for_bearing(bearing(&a, &b)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub min_hops: usize,
    pub max_hops: usize,
    pub max_detours: usize,
    /// Inter-turn gaps are `gap_shift + Poisson(gap_lambda)` steps.
    pub gap_shift: usize,
    pub gap_lambda: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            min_hops: 5,
            max_hops: 14,
            max_detours: 2,
            gap_shift: 3,
            gap_lambda: 2.63,
        }
    }
}

/// Synthesizes one episode with the default configuration.
pub fn synthesize_episode(graph: &NavGraph, env: &str, seed: u64) -> Result<Episode> {
    synthesize_episode_with(graph, env, seed, &EpisodeConfig::default())
}

pub fn synthesize_episode_with(graph: &NavGraph, env: &str, seed: u64, config: &EpisodeConfig) -> Result<Episode> {
    if config.min_hops > config.max_hops || config.gap_shift == 0 || !(config.gap_lambda > 0.0) {
        return Err(Error::InvalidConfig("episode config out of range".into()));
    }
    let mut r = rng(seed);
    let (start, target_node) = pick_endpoints(graph, config, &mut r)?;
    let target_object = pick_target_object(graph, &target_node, &mut r);

    let planner_path = graph.dijkstra(&start, &target_node)?;
    let detours = r.random_range(0..=config.max_detours);
    let player_nodes = perturb(graph, &planner_path.nodes, detours, &mut r)?;
    let player_path = Path::from_nodes(graph, player_nodes)?;
    let heading = r.random_range(0..SECTORS);
    let headings = arrival_headings(graph, &player_path.nodes, heading)?;

    let gaps = Poisson::new(config.gap_lambda).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut dialogue = Vec::new();
    let mut t = 1usize;
    // Exchanges happen before the goal is reached.
    while t < player_path.nodes.len() {
        let node = player_path.nodes[t - 1].clone();
        let context =
            DialogueContext::from_graph(graph, &node, headings[t - 1], &target_node, &target_object, DEFAULT_MAX_FUTURE)?;
        let qa = template_generate(&context, derive_seed(seed, &format!("turn{t}")))?;
        dialogue.push(DialogueTurn {
            node,
            question: qa.question,
            answer: qa.answer,
            time_step: t,
        });
        t += config.gap_shift + gaps.sample(&mut r) as usize;
    }

    Ok(Episode {
        id: format!("{env}-{seed:016x}"),
        env: env.to_string(),
        start,
        heading,
        target_object,
        target_node,
        planner_path,
        player_path,
        dialogue,
    })
}

fn pick_endpoints(graph: &NavGraph, config: &EpisodeConfig, r: &mut impl Rng) -> Result<(NodeId, NodeId)> {
    let with_objects: Vec<&NodeId> = graph.nodes().iter().filter(|n| !n.objects.is_empty()).map(|n| &n.id).collect();
    if with_objects.is_empty() {
        return Err(Error::NoValidTarget("no node carries an object label".into()));
    }
    let mut in_range = Vec::new();
    let mut longest: Vec<(NodeId, NodeId)> = Vec::new();
    let mut longest_hops = 0;
    for s in graph.nodes() {
        for t in &with_objects {
            if &s.id == *t {
                continue;
            }
            let hops = graph.dijkstra(&s.id, t)?.hops();
            if (config.min_hops..=config.max_hops).contains(&hops) {
                in_range.push((s.id.clone(), (*t).clone()));
            }
            if hops > longest_hops {
                longest_hops = hops;
                longest.clear();
            }
            if hops == longest_hops {
                longest.push((s.id.clone(), (*t).clone()));
            }
        }
    }
    let pool = if in_range.is_empty() { &longest } else { &in_range };
    pool.choose(r)
        .cloned()
        .ok_or_else(|| Error::NoValidTarget("no start/target pair available".into()))
}

/// Prefers an object that appears at the target node and nowhere else.
fn pick_target_object(graph: &NavGraph, target: &NodeId, r: &mut impl Rng) -> String {
    let node = graph.node(target).expect("target comes from the graph");
    let elsewhere: HashSet<&str> = graph
        .nodes()
        .iter()
        .filter(|n| &n.id != target)
        .flat_map(|n| n.objects.iter().map(String::as_str))
        .collect();
    let unique: Vec<&String> = node.objects.iter().filter(|o| !elsewhere.contains(o.as_str())).collect();
    let pool: Vec<&String> = if unique.is_empty() { node.objects.iter().collect() } else { unique };
    pool.choose(r).map(|s| s.to_string()).expect("target has objects")
}

/// Inserts wrong-turn-and-backtrack detours into `planner`.
fn perturb(graph: &NavGraph, planner: &[NodeId], detours: usize, r: &mut impl Rng) -> Result<Vec<NodeId>> {
    let on_path: HashSet<&NodeId> = planner.iter().collect();
    // Insertion points: planner index -> detour excursion.
    let mut inserts: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for _ in 0..detours {
        let candidates: Vec<usize> = (0..planner.len().saturating_sub(1)).filter(|i| !inserts.contains_key(i)).collect();
        let Some(&i) = candidates.choose(r) else { break };
        let at = &planner[i];
        let off: Vec<&NodeId> = graph.neighbors(at)?.map(|(n, _)| n).filter(|n| !on_path.contains(n)).collect();
        let Some(&first) = off.choose(r) else { continue };
        let mut excursion = vec![first.clone()];
        if r.random_bool(0.5) {
            let further: Vec<&NodeId> = graph
                .neighbors(first)?
                .map(|(n, _)| n)
                .filter(|n| !on_path.contains(n) && *n != first)
                .collect();
            if let Some(&second) = further.choose(r) {
                excursion.push(second.clone());
            }
        }
        // Walk back along the same nodes to the branching point.
        let back: Vec<NodeId> = excursion.iter().rev().skip(1).cloned().collect();
        excursion.extend(back);
        excursion.push(at.clone());
        inserts.insert(i, excursion);
    }
    let mut out = Vec::with_capacity(planner.len() + 4 * detours);
    for (i, n) in planner.iter().enumerate() {
        out.push(n.clone());
        if let Some(ex) = inserts.get(&i) {
            out.extend(ex.iter().cloned());
        }
    }
    Ok(out)
}

/// Synthesizes `per_env` episodes for every environment, in environment id
/// order. Seeds are derived from `seed`, the environment id and the index.
pub fn synthesize_dataset(envs: &EnvSet, per_env: usize, seed: u64, config: &EpisodeConfig) -> Result<Vec<Episode>> {
    let jobs: Vec<(&String, &NavGraph, usize)> = envs
        .iter()
        .flat_map(|(id, g)| (0..per_env).map(move |i| (id, g, i)))
        .collect();
    jobs.par_iter()
        .map(|(id, g, i)| {
            let s = derive_seed(seed, &format!("{id}/{i}"));
            synthesize_episode_with(g, id, s, config).map(|mut e| {
                e.id = format!("{id}-{i:04}");
                e
            })
        })
        .collect()
}

/// Step distances between consecutive dialogue turns.
pub fn inter_turn_distances(episodes: &[Episode]) -> Vec<usize> {
    episodes
        .iter()
        .flat_map(|e| e.dialogue.windows(2).map(|w| w[1].time_step - w[0].time_step))
        .collect()
}

/// Most frequent value; ties go to the smaller value.
pub fn mode(values: &[usize]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(*v).or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (v, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((v, c));
        }
    }
    best.map(|(v, _)| v)
}

// ---------------------------------------------------------------------------
// NDH instances

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Planner,
    Player,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Navigator,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdhInstance {
    pub parent_id: String,
    pub turn_index: usize,
    pub instruction: Vec<Utterance>,
    pub supervision: Supervision,
    pub path: Vec<NodeId>,
    pub synthetic: bool,
    pub env: String,
    /// Heading sector at the instance's start node.
    pub heading: usize,
    pub target_object: String,
    pub target_node: NodeId,
    /// How the generated answer ended, for synthetic instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_end: Option<SpanEnd>,
}

impl NdhInstance {
    pub fn id(&self) -> String {
        let tag = if self.synthetic { "-syn" } else { "" };
        format!("{}#{}{}", self.parent_id, self.turn_index, tag)
    }

    pub fn start(&self) -> &NodeId {
        &self.path[0]
    }

    /// The dialogue history as one whitespace-joined string.
    pub fn instruction_text(&self) -> String {
        self.instruction.iter().map(|u| u.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// One instance per dialogue turn. Planner supervision is the shortest path
/// from the turn node to the target; player supervision is the recorded
/// player segment up to the next turn node (or the goal).
pub fn split_ndh(dataset: &[Episode], envs: &EnvSet, supervision: Supervision) -> Result<Vec<NdhInstance>> {
    let mut out = Vec::new();
    for ep in dataset {
        if ep.dialogue.is_empty() {
            return Err(Error::EmptyDialogue(ep.id.clone()));
        }
        let graph = envs
            .get(&ep.env)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown environment `{}`", ep.env)))?;
        let headings = ep.player_headings(graph)?;
        let mut history = Vec::new();
        for (i, turn) in ep.dialogue.iter().enumerate() {
            history.push(Utterance {
                speaker: Speaker::Navigator,
                text: detokenize(&turn.question),
            });
            history.push(Utterance {
                speaker: Speaker::Oracle,
                text: detokenize(&turn.answer),
            });
            let path = match supervision {
                Supervision::Planner => graph.dijkstra(&turn.node, &ep.target_node)?.nodes,
                Supervision::Player => {
                    let from = turn.time_step - 1;
                    let to = ep
                        .dialogue
                        .get(i + 1)
                        .map_or(ep.player_path.nodes.len() - 1, |next| next.time_step - 1);
                    ep.player_path.nodes[from..=to].to_vec()
                }
            };
            out.push(NdhInstance {
                parent_id: ep.id.clone(),
                turn_index: i,
                instruction: history.clone(),
                supervision,
                path,
                synthetic: false,
                env: ep.env.clone(),
                heading: headings[turn.time_step - 1],
                target_object: ep.target_object.clone(),
                target_node: ep.target_node.clone(),
                answer_end: None,
            });
        }
    }
    Ok(out)
}

/// Returns the originals followed by one synthetic copy of each, whose final
/// question/answer exchange comes from `backend`.
pub fn augment_with_generated_dialogue(
    dataset: &[NdhInstance],
    envs: &EnvSet,
    backend: &dyn DialogueBackend,
    seed: u64,
) -> Result<Vec<NdhInstance>> {
    let synthetic: Vec<NdhInstance> = dataset
        .par_iter()
        .map(|inst| {
            let wrap = |e: Error| Error::Generation {
                instance: inst.id(),
                source: Box::new(e),
            };
            let graph = envs
                .get(&inst.env)
                .ok_or_else(|| wrap(Error::InvalidConfig(format!("unknown environment `{}`", inst.env))))?;
            let ctx = DialogueContext::from_graph(
                graph,
                inst.start(),
                inst.heading,
                &inst.target_node,
                &inst.target_object,
                DEFAULT_MAX_FUTURE,
            )
            .map_err(wrap)?;
            let qa = backend.generate(&ctx, derive_seed(seed, &inst.id())).map_err(wrap)?;
            let mut copy = inst.clone();
            let keep = copy.instruction.len().saturating_sub(2);
            copy.instruction.truncate(keep);
            copy.instruction.push(Utterance {
                speaker: Speaker::Navigator,
                text: detokenize(&qa.question),
            });
            copy.instruction.push(Utterance {
                speaker: Speaker::Oracle,
                text: detokenize(&qa.answer),
            });
            copy.synthetic = true;
            copy.answer_end = Some(qa.answer_end);
            Ok(copy)
        })
        .collect::<Result<_>>()?;
    let mut out = dataset.to_vec();
    out.extend(synthetic);
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSONL

pub fn write_jsonl<T: Serialize>(path: impl AsRef<FsPath>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::json(path.display().to_string(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<FsPath>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?);
    }
    Ok(out)
}

/// Writes each environment to `{dir}/{id}.json`.
pub fn save_env_set(dir: impl AsRef<FsPath>, envs: &EnvSet) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, graph) in envs {
        graph.save(dir.join(format!("{id}.json")))?;
    }
    Ok(())
}

/// Loads every `*.json` file in `dir`, keyed by file stem. A single file is
/// loaded as a one-environment set.
pub fn load_env_set(dir: impl AsRef<FsPath>) -> Result<EnvSet> {
    let dir = dir.as_ref();
    let stem = |p: &FsPath| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if dir.is_file() {
        return Ok(BTreeMap::from([(stem(dir), NavGraph::load(dir)?)]));
    }
    let mut envs = EnvSet::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            envs.insert(stem(&path), NavGraph::load(&path)?);
        }
    }
    if envs.is_empty() {
        return Err(Error::InvalidConfig(format!("no environments found in {}", dir.display())));
    }
    Ok(envs)
}
