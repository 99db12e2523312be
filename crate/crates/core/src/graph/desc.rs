//! TOML graph description files.
//!
//! ```toml
//! output = "fc"
//! head = "classifier"        # or "embedding"; optional
//!
//! [[node]]
//! name = "input"
//! layer = { kind = "input", channels = 3, height = 32, width = 32 }
//!
//! [[node]]
//! name = "conv1"
//! inputs = ["input"]
//! layer = { kind = "conv", out_channels = 16, in_channels = 3, kernel = 3, stride = 1, padding = 1 }
//! ```
//!
//! Layer kinds: `input`, `conv`, `batch_norm`, `linear`, `relu`, `gap`,
//! `max_pool`, `add`, `concat`. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use super::{GraphError, Head, LayerKind, LayerNode, NetworkGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDescription {
    pub output: String,
    #[serde(default)]
    pub head: Head,
    #[serde(rename = "node")]
    pub nodes: Vec<NodeDescription>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDescription {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    pub layer: LayerKind,
}

impl GraphDescription {
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        toml::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("graph description serializes")
    }

    pub fn build(&self) -> Result<NetworkGraph, GraphError> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| LayerNode {
                name: n.name.clone(),
                kind: n.layer.clone(),
                inputs: n.inputs.clone(),
            })
            .collect();
        NetworkGraph::new(nodes, &self.output, self.head)
    }
}

impl From<&NetworkGraph> for GraphDescription {
    fn from(g: &NetworkGraph) -> Self {
        Self {
            output: g.output_name().to_string(),
            head: g.head(),
            nodes: g
                .nodes()
                .iter()
                .map(|n| NodeDescription {
                    name: n.name.clone(),
                    inputs: n.inputs.clone(),
                    layer: n.kind.clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_architecture, Family};

    #[test]
    fn parses_documented_schema() {
        let text = r#"
output = "fc"

[[node]]
name = "input"
layer = { kind = "input", channels = 3, height = 8, width = 8 }

[[node]]
name = "conv1"
inputs = ["input"]
layer = { kind = "conv", out_channels = 4, in_channels = 3, kernel = 3, padding = 1 }

[[node]]
name = "gap"
inputs = ["conv1"]
layer = { kind = "gap" }

[[node]]
name = "fc"
inputs = ["gap"]
layer = { kind = "linear", out_features = 2, in_features = 4, bias = true }
"#;
        let g = GraphDescription::parse(text).unwrap().build().unwrap();
        assert_eq!(g.output_width(), 2);
        assert_eq!(g.nodes().len(), 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"
output = "input"
[[node]]
name = "input"
layer = { kind = "input", channels = 3, height = 8, width = 8, depth = 2 }
"#;
        assert!(matches!(GraphDescription::parse(text), Err(GraphError::Parse(_))));
    }

    #[test]
    fn builder_graphs_round_trip_through_toml() {
        let g = build_architecture(Family::ToyResnet, 5, [3, 16, 16]).unwrap();
        let text = GraphDescription::from(&g).to_toml();
        let back = GraphDescription::parse(&text).unwrap().build().unwrap();
        assert_eq!(back, g);
    }
}
