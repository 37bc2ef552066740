use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::navgraph::{bearing, sector_for_bearing, NavGraph, NodeId, SECTORS};

/// Future observations given to the answerer by default.
pub const DEFAULT_MAX_FUTURE: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnClass {
    Straight,
    Left,
    Right,
    Around,
}

impl TurnClass {
    pub const ALL: [TurnClass; 4] = [TurnClass::Straight, TurnClass::Left, TurnClass::Right, TurnClass::Around];

    /// Bearing change (degrees, counter-clockwise positive) to a turn class:
    /// straight below 30°, left in [30°, 150°), right in (-150°, -30°],
    /// turn around otherwise.
    pub fn classify(delta: f64) -> TurnClass {
        if delta.abs() < 30.0 {
            TurnClass::Straight
        } else if (30.0..150.0).contains(&delta) {
            TurnClass::Left
        } else if delta > -150.0 && delta <= -30.0 {
            TurnClass::Right
        } else {
            TurnClass::Around
        }
    }

    /// Angular distance between `delta` and this class's ideal turn.
    pub fn deviation(self, delta: f64) -> f64 {
        match self {
            TurnClass::Straight => delta.abs(),
            TurnClass::Left => (delta - 90.0).abs(),
            TurnClass::Right => (delta + 90.0).abs(),
            TurnClass::Around => 180.0 - delta.abs(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TurnClass::Straight => "straight",
            TurnClass::Left => "left",
            TurnClass::Right => "right",
            TurnClass::Around => "around",
        }
    }
}

/// Signed bearing change from `from` to `to`, normalized to (-180, 180].
pub fn turn_delta(from: f64, to: f64) -> f64 {
    let d = (to - from).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Neighbours of `at` that fall in `class` when facing `facing` degrees,
/// best match first. Ties go to the smaller node id.
pub fn rank_turn_options(
    graph: &NavGraph,
    at: &NodeId,
    facing: f64,
    class: TurnClass,
) -> Result<Vec<NodeId>> {
    let origin = graph.node(at)?.position;
    let mut options: Vec<(f64, NodeId)> = Vec::new();
    for (n, _) in graph.neighbors(at)? {
        let delta = turn_delta(facing, bearing(&origin, &graph.node(n)?.position));
        if TurnClass::classify(delta) == class {
            options.push((class.deviation(delta), n.clone()));
        }
    }
    options.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(options.into_iter().map(|(_, n)| n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnDirective {
    pub class: TurnClass,
    /// Position of the taken edge among same-class options, 0 = best match.
    pub ordinal: usize,
}

/// Symbolic annotation of one node along the route to the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub node: NodeId,
    pub room: String,
    pub objects: Vec<String>,
    pub position: [f64; 3],
    /// Heading sector on arrival.
    pub heading: usize,
    /// Turn taken to reach this waypoint; `None` for the first one.
    pub turn: Option<TurnDirective>,
}

/// Everything a question/answer generator may condition on.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueContext {
    pub target_object: String,
    pub target_room: String,
    pub heading: usize,
    /// Frontal feature at the current node.
    pub current_obs: Vec<f64>,
    /// Frontal features along the route, starting at the current node.
    pub future_obs: Vec<Vec<f64>>,
    pub waypoints: Vec<Waypoint>,
    /// True when the route was cut to fit `max_future`.
    pub truncated: bool,
}

impl DialogueContext {
    /// Builds the context from the shortest path between `current` and
    /// `target_node`, keeping at most `max_future + 1` observations.
    pub fn from_graph(
        graph: &NavGraph,
        current: &NodeId,
        heading: usize,
        target_node: &NodeId,
        target_object: &str,
        max_future: usize,
    ) -> Result<Self> {
        if heading >= SECTORS {
            return Err(Error::InvalidConfig(format!("heading sector {heading} out of range")));
        }
        let path = graph.dijkstra(current, target_node)?;
        let keep = path.nodes.len().min(max_future + 1);
        let mut waypoints: Vec<Waypoint> = Vec::with_capacity(keep);
        let mut facing = heading as f64 * 60.0;
        for (i, id) in path.nodes.iter().take(keep).enumerate() {
            let node = graph.node(id)?;
            let (turn, arrival) = if i == 0 {
                (None, heading)
            } else {
                let prev = &path.nodes[i - 1];
                let from = graph.node(prev)?.position;
                let b = bearing(&from, &node.position);
                let class = TurnClass::classify(turn_delta(facing, b));
                let ordinal = rank_turn_options(graph, prev, facing, class)?
                    .iter()
                    .position(|n| n == id)
                    .expect("taken edge is among its own class options");
                facing = b;
                (Some(TurnDirective { class, ordinal }), sector_for_bearing(b))
            };
            waypoints.push(Waypoint {
                node: id.clone(),
                room: node.room.clone(),
                objects: node.objects.clone(),
                position: node.position,
                heading: arrival,
                turn,
            });
        }
        let future_obs: Vec<Vec<f64>> = waypoints
            .iter()
            .map(|w| graph.node(&w.node).map(|n| n.sector_feature(w.heading)))
            .collect::<Result<_>>()?;
        Ok(DialogueContext {
            target_object: target_object.to_string(),
            target_room: graph.node(target_node)?.room.clone(),
            heading,
            current_obs: future_obs[0].clone(),
            future_obs,
            waypoints,
            truncated: keep < path.nodes.len(),
        })
    }

    /// Number of additional observations beyond the current one.
    pub fn k(&self) -> usize {
        self.future_obs.len().saturating_sub(1)
    }

    pub fn current(&self) -> Option<&Waypoint> {
        self.waypoints.first()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_boundaries() {
        assert_eq!(TurnClass::classify(0.0), TurnClass::Straight);
        assert_eq!(TurnClass::classify(29.9), TurnClass::Straight);
        assert_eq!(TurnClass::classify(30.0), TurnClass::Left);
        assert_eq!(TurnClass::classify(90.0), TurnClass::Left);
        assert_eq!(TurnClass::classify(149.9), TurnClass::Left);
        assert_eq!(TurnClass::classify(150.0), TurnClass::Around);
        assert_eq!(TurnClass::classify(-30.0), TurnClass::Right);
        assert_eq!(TurnClass::classify(-149.9), TurnClass::Right);
        assert_eq!(TurnClass::classify(-150.0), TurnClass::Around);
        assert_eq!(TurnClass::classify(180.0), TurnClass::Around);
    }

    #[test]
    fn delta_normalization() {
        assert_eq!(turn_delta(170.0, -170.0), 20.0);
        assert_eq!(turn_delta(-170.0, 170.0), -20.0);
        assert_eq!(turn_delta(0.0, 180.0), 180.0);
        assert_eq!(turn_delta(0.0, -180.0), 180.0);
    }
}
