//! Topological environments.
//!
//! A [`NavGraph`] is an immutable, connected, undirected graph of viewpoints.
//! Edge weights are always the Euclidean distance between endpoint positions
//! and are never stored on disk. Nodes are kept sorted by id, so node index
//! order coincides with lexicographic id order; shortest-path tie breaking
//! relies on this.

mod features;
mod generate;
mod io;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{featurize_observation, label_embedding, object_sectors};
pub use generate::{generate_environment, EnvConfig};
pub use io::GraphFile;

pub const SECTORS: usize = 6;
pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const EDGE_WEIGHT_TOLERANCE: f64 = 1e-9;

/// Vocabulary version; bump when either list below changes.
pub const VOCAB_VERSION: u32 = 1;

pub const ROOM_LABELS: [&str; 8] = [
    "kitchen",
    "hallway",
    "living room",
    "bedroom",
    "bathroom",
    "stairs",
    "office",
    "dining room",
];

pub const OBJECT_LABELS: [&str; 24] = [
    "armchair",
    "bathtub",
    "bed",
    "bookshelf",
    "cabinet",
    "chair",
    "clock",
    "couch",
    "desk",
    "dresser",
    "fireplace",
    "fridge",
    "lamp",
    "mirror",
    "oven",
    "painting",
    "piano",
    "plant",
    "rug",
    "shower",
    "sink",
    "table",
    "television",
    "toilet",
];

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidGraph("empty node id".into()));
        }
        Ok(NodeId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for NodeId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        NodeId::new(value)
    }
}

impl From<NodeId> for String {
    fn from(value: NodeId) -> Self {
        value.0
    }
}

impl From<&str> for NodeId {
    /// Panics on an empty string; intended for literals.
    fn from(value: &str) -> Self {
        NodeId::new(value).expect("node id must be non-empty")
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A viewpoint with a position in meters, a room label, object labels and a
/// six-sector panorama (sector `s` covers the 60° bucket centred on bearing
/// `60·s` degrees).
#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub position: [f64; 3],
    pub room: String,
    pub objects: Vec<String>,
    pub panorama: Vec<Vec<f32>>,
}

impl Node {
    /// Room and object labels, room first.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.room.as_str()).chain(self.objects.iter().map(String::as_str))
    }

    pub fn sector_feature(&self, sector: usize) -> Vec<f64> {
        self.panorama[sector].iter().map(|x| f64::from(*x)).collect()
    }
}

pub fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Planar bearing from `a` to `b` in degrees, in `(-180, 180]`.
pub fn bearing(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (b[1] - a[1]).atan2(b[0] - a[0]).to_degrees()
}

/// Nearest 60° sector for a bearing; exact ties go to the lower index.
pub fn sector_for_bearing(degrees: f64) -> usize {
    let buckets = degrees.rem_euclid(360.0) / 60.0;
    let lower = buckets.floor();
    let idx = if buckets - lower > 0.5 { lower + 1.0 } else { lower };
    (idx as usize) % SECTORS
}

/// An ordered walk through the graph with its total length in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub nodes: Vec<NodeId>,
    pub length: f64,
}

impl Path {
    /// Builds a path from consecutive adjacent nodes, summing edge weights in
    /// walk order.
    pub fn from_nodes(graph: &NavGraph, nodes: Vec<NodeId>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyPath);
        }
        let mut length = 0.0;
        for pair in nodes.windows(2) {
            length += graph.edge_weight(&pair[0], &pair[1]).ok_or_else(|| {
                Error::InvalidGraph(format!("`{}` and `{}` are not adjacent", pair[0], pair[1]))
            })?;
        }
        for node in &nodes {
            graph.index_of(node)?;
        }
        Ok(Path { nodes, length })
    }

    pub fn start(&self) -> &NodeId {
        &self.nodes[0]
    }

    pub fn end(&self) -> &NodeId {
        self.nodes.last().expect("paths are non-empty")
    }

    /// Number of edges traversed.
    pub fn hops(&self) -> usize {
        self.nodes.len() - 1
    }
}

#[derive(Debug)]
struct ShortestPathTree {
    dist: Vec<f64>,
    pred: Vec<Option<usize>>,
}

pub struct NavGraph {
    feature_dim: usize,
    nodes: Vec<Node>,
    index: HashMap<NodeId, usize>,
    adjacency: Vec<Vec<(usize, f64)>>,
    trees: Vec<OnceLock<ShortestPathTree>>,
}

impl fmt::Debug for NavGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NavGraph")
            .field("feature_dim", &self.feature_dim)
            .field("nodes", &self.nodes.len())
            .field("edges", &self.edge_count())
            .finish()
    }
}

impl PartialEq for NavGraph {
    fn eq(&self, other: &Self) -> bool {
        self.feature_dim == other.feature_dim
            && self.nodes == other.nodes
            && self.adjacency == other.adjacency
    }
}

impl Clone for NavGraph {
    fn clone(&self) -> Self {
        NavGraph {
            feature_dim: self.feature_dim,
            nodes: self.nodes.clone(),
            index: self.index.clone(),
            adjacency: self.adjacency.clone(),
            trees: (0..self.nodes.len()).map(|_| OnceLock::new()).collect(),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance, then on node index (= id order).
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl NavGraph {
    /// Validates and builds a graph. Nodes may be given in any order; edges
    /// are unordered id pairs.
    pub fn new(
        feature_dim: usize,
        mut nodes: Vec<Node>,
        edges: &[(NodeId, NodeId)],
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidGraph("feature dimension must be positive".into()));
        }
        if nodes.is_empty() {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter_mut().enumerate() {
            if index.insert(node.id.clone(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node id `{}`", node.id)));
            }
            if node.position.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidGraph(format!("node `{}` has a non-finite position", node.id)));
            }
            if node.panorama.len() != SECTORS {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` has {} panorama sectors, expected {SECTORS}",
                    node.id,
                    node.panorama.len()
                )));
            }
            if node.panorama.iter().any(|f| f.len() != feature_dim) {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` has features of the wrong dimension (expected {feature_dim})",
                    node.id
                )));
            }
            node.objects.sort();
            node.objects.dedup();
        }

        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nodes.len()];
        for (a, b) in edges {
            let ia = *index.get(a).ok_or_else(|| Error::UnknownNode(a.to_string()))?;
            let ib = *index.get(b).ok_or_else(|| Error::UnknownNode(b.to_string()))?;
            if ia == ib {
                return Err(Error::InvalidGraph(format!("self-loop at `{a}`")));
            }
            if adjacency[ia].iter().any(|(n, _)| *n == ib) {
                return Err(Error::InvalidGraph(format!("duplicate edge `{a}`-`{b}`")));
            }
            let w = euclidean(&nodes[ia].position, &nodes[ib].position);
            adjacency[ia].push((ib, w));
            adjacency[ib].push((ia, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|(n, _)| *n);
        }

        let graph = NavGraph {
            feature_dim,
            trees: (0..nodes.len()).map(|_| OnceLock::new()).collect(),
            nodes,
            index,
            adjacency,
        };
        if !graph.is_connected() {
            return Err(Error::InvalidGraph("graph is not connected".into()));
        }
        Ok(graph)
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for (v, _) in &self.adjacency[u] {
                if !seen[*v] {
                    seen[*v] = true;
                    stack.push(*v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges as id pairs with the smaller id first, in id order.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (u, list) in self.adjacency.iter().enumerate() {
            for (v, _) in list {
                if u < *v {
                    out.push((self.nodes[u].id.clone(), self.nodes[*v].id.clone()));
                }
            }
        }
        out
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.index.contains_key(id)
    }

    pub fn index_of(&self, id: &NodeId) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn node(&self, id: &NodeId) -> Result<&Node> {
        Ok(&self.nodes[self.index_of(id)?])
    }

    /// Neighbors of `id` in id order, with edge weights.
    pub fn neighbors(&self, id: &NodeId) -> Result<impl Iterator<Item = (&NodeId, f64)>> {
        let i = self.index_of(id)?;
        Ok(self.adjacency[i]
            .iter()
            .map(move |(n, w)| (&self.nodes[*n].id, *w)))
    }

    pub fn edge_weight(&self, a: &NodeId, b: &NodeId) -> Option<f64> {
        let ia = *self.index.get(a)?;
        let ib = *self.index.get(b)?;
        self.adjacency[ia]
            .iter()
            .find(|(n, _)| *n == ib)
            .map(|(_, w)| *w)
    }

    pub fn euclidean_distance(&self, a: &NodeId, b: &NodeId) -> Result<f64> {
        Ok(euclidean(&self.node(a)?.position, &self.node(b)?.position))
    }

    /// Objects present anywhere in the graph, sorted and deduplicated.
    pub fn object_labels(&self) -> Vec<&str> {
        let mut all: Vec<&str> = self
            .nodes
            .iter()
            .flat_map(|n| n.objects.iter().map(String::as_str))
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    fn tree(&self, source: usize) -> &ShortestPathTree {
        self.trees[source].get_or_init(|| self.run_dijkstra(source))
    }

    fn run_dijkstra(&self, source: usize) -> ShortestPathTree {
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred: Vec<Option<usize>> = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(HeapEntry { dist: 0.0, node: source });
        while let Some(HeapEntry { dist: d, node: u }) = heap.pop() {
            if done[u] || d > dist[u] {
                continue;
            }
            done[u] = true;
            for &(v, w) in &self.adjacency[u] {
                if done[v] {
                    continue;
                }
                let alt = d + w;
                let better = alt < dist[v] || (alt == dist[v] && pred[v].is_some_and(|p| u < p));
                if better {
                    dist[v] = alt;
                    pred[v] = Some(u);
                    heap.push(HeapEntry { dist: alt, node: v });
                }
            }
        }
        ShortestPathTree { dist, pred }
    }

    /// Minimum-weight path from `from` to `to`. Equal-weight alternatives are
    /// resolved toward the lexicographically smaller predecessor.
    pub fn dijkstra(&self, from: &NodeId, to: &NodeId) -> Result<Path> {
        let s = self.index_of(from)?;
        let t = self.index_of(to)?;
        let tree = self.tree(s);
        let mut rev = vec![t];
        let mut cur = t;
        while let Some(p) = tree.pred[cur] {
            rev.push(p);
            cur = p;
        }
        debug_assert_eq!(cur, s);
        let nodes = rev
            .into_iter()
            .rev()
            .map(|i| self.nodes[i].id.clone())
            .collect();
        Ok(Path {
            nodes,
            length: tree.dist[t],
        })
    }

    /// Shortest-path distance; identical to `dijkstra(a, b).length`.
    pub fn geodesic_distance(&self, a: &NodeId, b: &NodeId) -> Result<f64> {
        let s = self.index_of(a)?;
        let t = self.index_of(b)?;
        Ok(self.tree(s).dist[t])
    }
}
