use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use super::{featurize_observation, NavGraph, Node, NodeId, SECTORS};
use crate::error::{Error, Result};

/// On-disk graph schema. Edge weights are derived from positions on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub d_v: usize,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<(NodeId, NodeId)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub position: [f64; 3],
    pub room: String,
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panorama: Option<Vec<Vec<f32>>>,
}

impl From<&NavGraph> for GraphFile {
    fn from(g: &NavGraph) -> Self {
        GraphFile {
            d_v: g.feature_dim(),
            nodes: g
                .nodes()
                .iter()
                .map(|n| NodeRecord {
                    id: n.id.clone(),
                    position: n.position,
                    room: n.room.clone(),
                    objects: n.objects.clone(),
                    panorama: Some(n.panorama.clone()),
                })
                .collect(),
            edges: g.edges(),
        }
    }
}

impl TryFrom<GraphFile> for NavGraph {
    type Error = Error;

    fn try_from(file: GraphFile) -> Result<Self> {
        let nodes = file
            .nodes
            .into_iter()
            .map(|rec| {
                let mut node = Node {
                    id: rec.id,
                    position: rec.position,
                    room: rec.room,
                    objects: rec.objects,
                    panorama: Vec::new(),
                };
                node.objects.sort();
                node.objects.dedup();
                node.panorama = match rec.panorama {
                    Some(p) => p,
                    None => (0..SECTORS)
                        .map(|s| featurize_observation(&node, s, file.d_v))
                        .collect(),
                };
                node
            })
            .collect();
        NavGraph::new(file.d_v, nodes, &file.edges)
    }
}

impl NavGraph {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&GraphFile::from(self)).expect("graph serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| Error::json("graph", e))?;
        NavGraph::try_from(file)
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        NavGraph::from_json(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::json(path.display().to_string(), source),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navgraph::{generate_environment, EnvConfig};

    #[test]
    fn round_trip_is_structural_identity() {
        let g = generate_environment(3, &EnvConfig::new(4, 3)).unwrap();
        let back = NavGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);
        assert_eq!(g.to_json(), back.to_json());
    }

    #[test]
    fn missing_panorama_is_recomputed() {
        let text = r#"{"d_v": 8, "nodes": [
            {"id": "a", "position": [0,0,0], "room": "kitchen", "objects": ["oven"]},
            {"id": "b", "position": [3,4,0], "room": "hallway"}
        ], "edges": [["a","b"]]}"#;
        let g = NavGraph::from_json(text).unwrap();
        assert_eq!(g.edge_weight(&"a".into(), &"b".into()), Some(5.0));
        let a = g.node(&"a".into()).unwrap();
        assert_eq!(a.panorama[2], featurize_observation(a, 2, 8));
    }

    #[test]
    fn deterministic_generation_bytes() {
        let cfg = EnvConfig::new(4, 3);
        let a = generate_environment(42, &cfg).unwrap().to_json();
        let b = generate_environment(42, &cfg).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_panorama_dimension() {
        let text = r#"{"d_v": 2, "nodes": [
            {"id": "a", "position": [0,0,0], "room": "kitchen",
             "panorama": [[1,0],[1,0],[1,0],[1,0],[1,0],[1]]}
        ], "edges": []}"#;
        assert!(matches!(NavGraph::from_json(text), Err(Error::InvalidGraph(_))));
    }
}
