//! Procedural environments: rooms laid out on a jittered grid, a handful of
//! viewpoints per room, intra-room edges from a minimum spanning tree plus
//! short extra links, and doorways between neighbouring rooms.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{euclidean, featurize_observation, NavGraph, Node, NodeId, OBJECT_LABELS, ROOM_LABELS, SECTORS};
use crate::error::{Error, Result};
use crate::util::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub rooms: usize,
    pub nodes_per_room: usize,
    #[serde(default = "default_dim")]
    pub feature_dim: usize,
    /// Distance between neighbouring room centres, meters.
    #[serde(default = "default_spacing")]
    pub room_spacing: f64,
    /// Half-width of the square in which a room's viewpoints are scattered.
    #[serde(default = "default_room_radius")]
    pub room_radius: f64,
}

fn default_dim() -> usize {
    super::DEFAULT_FEATURE_DIM
}

fn default_spacing() -> f64 {
    7.0
}

fn default_room_radius() -> f64 {
    2.5
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            rooms: 6,
            nodes_per_room: 4,
            feature_dim: default_dim(),
            room_spacing: default_spacing(),
            room_radius: default_room_radius(),
        }
    }
}

impl EnvConfig {
    pub fn new(rooms: usize, nodes_per_room: usize) -> Self {
        EnvConfig {
            rooms,
            nodes_per_room,
            ..EnvConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rooms < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 rooms, got {}", self.rooms)));
        }
        if self.nodes_per_room < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 nodes per room, got {}",
                self.nodes_per_room
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        if !(self.room_spacing > 0.0 && self.room_radius > 0.0) {
            return Err(Error::InvalidConfig("room geometry must be positive".into()));
        }
        Ok(())
    }
}

const MIN_SEPARATION: f64 = 0.8;
const EXTRA_INTRA_EDGE_PROB: f64 = 0.35;
const EXTRA_INTRA_EDGE_RANGE: f64 = 3.5;
const EXTRA_DOOR_PROB: f64 = 0.3;
const MAX_OBJECTS: usize = 3;

/// Deterministic procedural environment for `seed`.
pub fn generate_environment(seed: u64, config: &EnvConfig) -> Result<NavGraph> {
    config.validate()?;
    let mut r = rng(seed);
    let cols = (config.rooms as f64).sqrt().ceil() as usize;

    let mut labels: Vec<&str> = ROOM_LABELS.to_vec();
    labels.shuffle(&mut r);

    let mut nodes = Vec::with_capacity(config.rooms * config.nodes_per_room);
    let mut room_members: Vec<Vec<usize>> = Vec::with_capacity(config.rooms);
    let width = (config.rooms * config.nodes_per_room).to_string().len().max(2);
    for room in 0..config.rooms {
        let (row, col) = (room / cols, room % cols);
        let jitter = config.room_spacing * 0.1;
        let centre = [
            col as f64 * config.room_spacing + r.random_range(-jitter..=jitter),
            row as f64 * config.room_spacing + r.random_range(-jitter..=jitter),
        ];
        let label = labels[room % labels.len()];
        let mut members = Vec::with_capacity(config.nodes_per_room);
        for _ in 0..config.nodes_per_room {
            let mut position = [0.0; 3];
            // Rejection sampling for a minimum spacing between viewpoints;
            // the last draw is kept if the room is crowded.
            for _ in 0..64 {
                position = [
                    centre[0] + r.random_range(-config.room_radius..=config.room_radius),
                    centre[1] + r.random_range(-config.room_radius..=config.room_radius),
                    0.0,
                ];
                if members
                    .iter()
                    .all(|m: &usize| euclidean(&nodes_pos(&nodes, *m), &position) >= MIN_SEPARATION)
                {
                    break;
                }
            }
            let n_objects = r.random_range(0..=MAX_OBJECTS);
            let objects: Vec<String> = OBJECT_LABELS
                .choose_multiple(&mut r, n_objects)
                .map(|s| s.to_string())
                .collect();
            let id = NodeId::new(format!("n{:0width$}", nodes.len()))?;
            members.push(nodes.len());
            nodes.push(Node {
                id,
                position,
                room: label.to_string(),
                objects,
                panorama: Vec::new(),
            });
        }
        room_members.push(members);
    }

    let mut edges: Vec<(usize, usize)> = Vec::new();
    for members in &room_members {
        spanning_tree(&nodes, members, &mut edges);
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                let close = euclidean(&nodes[a].position, &nodes[b].position) <= EXTRA_INTRA_EDGE_RANGE;
                if close && !has_edge(&edges, a, b) && r.random_bool(EXTRA_INTRA_EDGE_PROB) {
                    edges.push((a, b));
                }
            }
        }
    }

    // Doorways: a random spanning tree over the room grid, plus extra grid
    // links. Each doorway joins the closest viewpoint pair of the two rooms.
    let mut grid_links: Vec<(usize, usize)> = Vec::new();
    for room in 0..config.rooms {
        let col = room % cols;
        if col + 1 < cols && room + 1 < config.rooms {
            grid_links.push((room, room + 1));
        }
        if room + cols < config.rooms {
            grid_links.push((room, room + cols));
        }
    }
    grid_links.shuffle(&mut r);
    let mut parent: Vec<usize> = (0..config.rooms).collect();
    for (a, b) in grid_links {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let joins = ra != rb;
        if joins {
            parent[ra] = rb;
        }
        if joins || r.random_bool(EXTRA_DOOR_PROB) {
            let (u, v) = closest_pair(&nodes, &room_members[a], &room_members[b]);
            if !has_edge(&edges, u, v) {
                edges.push((u, v));
            }
        }
    }

    for node in &mut nodes {
        node.panorama = (0..SECTORS)
            .map(|s| featurize_observation(node, s, config.feature_dim))
            .collect();
    }
    let edge_ids: Vec<(NodeId, NodeId)> = edges
        .into_iter()
        .map(|(a, b)| (nodes[a].id.clone(), nodes[b].id.clone()))
        .collect();
    NavGraph::new(config.feature_dim, nodes, &edge_ids)
}

fn nodes_pos(nodes: &[Node], i: usize) -> [f64; 3] {
    nodes[i].position
}

fn has_edge(edges: &[(usize, usize)], a: usize, b: usize) -> bool {
    edges.iter().any(|&(u, v)| (u, v) == (a, b) || (u, v) == (b, a))
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Prim's algorithm over the complete Euclidean graph of `members`.
fn spanning_tree(nodes: &[Node], members: &[usize], edges: &mut Vec<(usize, usize)>) {
    let mut in_tree = vec![members[0]];
    let mut rest: Vec<usize> = members[1..].to_vec();
    while !rest.is_empty() {
        let mut best = (f64::INFINITY, 0, 0);
        for (ri, &b) in rest.iter().enumerate() {
            for &a in &in_tree {
                let d = euclidean(&nodes[a].position, &nodes[b].position);
                if d < best.0 {
                    best = (d, a, ri);
                }
            }
        }
        let b = rest.remove(best.2);
        edges.push((best.1, b));
        in_tree.push(b);
    }
}

fn closest_pair(nodes: &[Node], a: &[usize], b: &[usize]) -> (usize, usize) {
    let mut best = (f64::INFINITY, a[0], b[0]);
    for &u in a {
        for &v in b {
            let d = euclidean(&nodes[u].position, &nodes[v].position);
            if d < best.0 {
                best = (d, u, v);
            }
        }
    }
    (best.1, best.2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navgraph::EDGE_WEIGHT_TOLERANCE;

    #[test]
    fn twelve_node_environment() {
        let g = generate_environment(1, &EnvConfig::new(4, 3)).unwrap();
        assert_eq!(g.len(), 12);
        // NavGraph::new rejects disconnected graphs, so reaching here implies
        // connectivity; check it independently anyway.
        for n in g.nodes() {
            assert!(g.geodesic_distance(&g.nodes()[0].id, &n.id).unwrap().is_finite());
        }
    }

    #[test]
    fn generated_graph_invariants() {
        for seed in 0..20 {
            let g = generate_environment(seed, &EnvConfig::new(5, 4)).unwrap();
            for n in g.nodes() {
                assert!(ROOM_LABELS.contains(&n.room.as_str()));
                assert!(n.objects.len() <= MAX_OBJECTS);
                assert_eq!(n.panorama.len(), SECTORS);
                for (m, w) in g.neighbors(&n.id).unwrap() {
                    assert_ne!(m, &n.id);
                    let d = g.euclidean_distance(&n.id, m).unwrap();
                    assert!((d - w).abs() <= EDGE_WEIGHT_TOLERANCE);
                }
            }
        }
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(matches!(
            generate_environment(0, &EnvConfig::new(1, 3)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            generate_environment(0, &EnvConfig::new(3, 1)),
            Err(Error::InvalidConfig(_))
        ));
    }
}
