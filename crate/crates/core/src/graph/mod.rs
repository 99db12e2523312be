//! Declarative network description: typed layers wired into a DAG,
//! validated and shape-inferred before anything executes.

mod builders;
mod desc;
mod exec;
mod params;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{conv_output_dim, BatchNormConfig, EngineError};

pub use builders::{build_architecture, build_architecture_with, ArchOptions, ConcatVariant, Family};
pub use desc::GraphDescription;
pub use exec::{Gradients, Mode, Trace};
pub(crate) use params::fresh_tensor;
pub use params::{stream_id, ParamRole, ParamSpec, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph has no nodes")]
    Empty,
    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("node `{node}` references unknown input `{input}`")]
    DanglingInput { node: String, input: String },
    #[error("cycle detected among nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("graph must have exactly one input node, found {0}")]
    InputNodes(usize),
    #[error("output node `{0}` does not exist")]
    UnknownOutput(String),
    #[error("node `{node}` expects {expected} inputs, got {actual}")]
    Arity {
        node: String,
        expected: &'static str,
        actual: usize,
    },
    #[error("node `{node}` declares {declared} input channels but `{source_node}` provides {inferred}")]
    ChannelMismatch {
        node: String,
        source_node: String,
        declared: usize,
        inferred: usize,
    },
    #[error("add `{node}`: operand `{left}` has shape {} but `{right}` has shape {}", .shapes[0], .shapes[1])]
    AddShapeMismatch {
        node: String,
        left: String,
        right: String,
        shapes: Box<[FeatureShape; 2]>,
    },
    #[error("concat `{node}`: operand `{operand}` spatial size {actual} differs from {expected}")]
    ConcatMismatch {
        node: String,
        operand: String,
        expected: String,
        actual: String,
    },
    #[error("node `{node}` needs a spatial input but `{source_node}` is flat")]
    NotSpatial { node: String, source_node: String },
    #[error("linear `{node}` needs a 1x1 input but `{source_node}` is {shape}")]
    NotFlat {
        node: String,
        source_node: String,
        shape: FeatureShape,
    },
    #[error("node `{node}`: {msg}")]
    InvalidLayer { node: String, msg: String },
    #[error("unknown architecture family `{0}`")]
    UnknownFamily(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{key}` has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        key: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input batch has per-sample shape {actual:?}, expected {expected:?}")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("graph description: {0}")]
    Parse(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Linear {
        out_features: usize,
        in_features: usize,
        #[serde(default)]
        bias: bool,
    },
    Relu,
    Gap,
    MaxPool {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Add,
    Concat,
}

fn one() -> usize {
    1
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Relu => "relu",
            LayerKind::Gap => "gap",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::BatchNorm { .. } | LayerKind::Linear { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Per-sample output shape of a node. Flat features (after GAP or linear)
/// carry `height = width = 1` and `spatial = false`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub spatial: bool,
}

impl FeatureShape {
    pub fn spatial(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            spatial: true,
        }
    }

    pub fn flat(channels: usize) -> Self {
        Self {
            channels,
            height: 1,
            width: 1,
            spatial: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Per-sample tensor dims: `[C, H, W]` when spatial, `[C]` otherwise.
    pub fn dims(&self) -> Vec<usize> {
        if self.spatial {
            vec![self.channels, self.height, self.width]
        } else {
            vec![self.channels]
        }
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.spatial {
            write!(f, "{}x{}x{}", self.channels, self.height, self.width)
        } else {
            write!(f, "{}", self.channels)
        }
    }
}

/// What the output node produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    Classifier,
    /// Features to be L2-normalized for retrieval.
    Embedding,
}

/// A validated, topologically ordered network architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    nodes: Vec<LayerNode>,
    preds: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
    shapes: Vec<FeatureShape>,
    output: usize,
    head: Head,
    bn: BatchNormConfig,
}

impl NetworkGraph {
    /// Orders the nodes topologically (stable w.r.t. the given order) and validates them.
    pub fn new(nodes: Vec<LayerNode>, output: &str, head: Head) -> Result<Self, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.name.clone(), i).is_some() {
                return Err(GraphError::DuplicateName(n.name.clone()));
            }
        }
        for n in &nodes {
            for inp in &n.inputs {
                if !index.contains_key(inp) {
                    return Err(GraphError::DanglingInput {
                        node: n.name.clone(),
                        input: inp.clone(),
                    });
                }
            }
        }
        let order = topo_order(&nodes, &index)?;
        let mut slots: Vec<Option<LayerNode>> = nodes.into_iter().map(Some).collect();
        let nodes: Vec<LayerNode> = order
            .iter()
            .map(|&i| slots[i].take().expect("each node once"))
            .collect();
        let index: HashMap<String, usize> = nodes.iter().enumerate().map(|(i, n)| (n.name.clone(), i)).collect();
        let preds = nodes
            .iter()
            .map(|n| n.inputs.iter().map(|s| index[s]).collect())
            .collect();
        let output = *index
            .get(output)
            .ok_or_else(|| GraphError::UnknownOutput(output.to_string()))?;
        let mut graph = Self {
            nodes,
            preds,
            index,
            shapes: Vec::new(),
            output,
            head,
            bn: BatchNormConfig::default(),
        };
        graph.shapes = graph.infer_shapes()?;
        Ok(graph)
    }

    pub fn with_batchnorm_config(mut self, bn: BatchNormConfig) -> Self {
        self.bn = bn;
        self
    }

    pub fn batchnorm_config(&self) -> BatchNormConfig {
        self.bn
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&LayerNode> {
        self.index.get(name).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn predecessors(&self, idx: usize) -> &[usize] {
        &self.preds[idx]
    }

    pub fn output_index(&self) -> usize {
        self.output
    }

    pub fn output_name(&self) -> &str {
        &self.nodes[self.output].name
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_index(&self) -> usize {
        self.nodes
            .iter()
            .position(|n| matches!(n.kind, LayerKind::Input { .. }))
            .expect("validated graph has an input")
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.shapes[self.input_index()]
    }

    /// Output shape of every node, in topological order.
    pub fn shapes(&self) -> &[FeatureShape] {
        &self.shapes
    }

    pub fn shape_of(&self, name: &str) -> Option<FeatureShape> {
        self.index.get(name).map(|&i| self.shapes[i])
    }

    /// Shape map keyed by node name.
    pub fn validate_and_shape(&self) -> BTreeMap<String, FeatureShape> {
        self.nodes
            .iter()
            .zip(&self.shapes)
            .map(|(n, s)| (n.name.clone(), *s))
            .collect()
    }

    /// Output width of the network (class count or embedding dimension).
    pub fn output_width(&self) -> usize {
        self.shapes[self.output].channels
    }

    fn infer_shapes(&self) -> Result<Vec<FeatureShape>, GraphError> {
        let inputs = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Input { .. }))
            .count();
        if inputs != 1 {
            return Err(GraphError::InputNodes(inputs));
        }
        let mut shapes: Vec<FeatureShape> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let preds = &self.preds[i];
            let arity = |expected: &'static str, ok: bool| {
                if ok {
                    Ok(())
                } else {
                    Err(GraphError::Arity {
                        node: node.name.clone(),
                        expected,
                        actual: preds.len(),
                    })
                }
            };
            let invalid = |msg: &str| GraphError::InvalidLayer {
                node: node.name.clone(),
                msg: msg.to_string(),
            };
            let src = |k: usize| (&self.nodes[preds[k]].name, shapes[preds[k]]);
            let shape = match &node.kind {
                LayerKind::Input {
                    channels,
                    height,
                    width,
                } => {
                    arity("0", preds.is_empty())?;
                    if *channels == 0 || *height == 0 || *width == 0 {
                        return Err(invalid("input dimensions must be positive"));
                    }
                    FeatureShape::spatial(*channels, *height, *width)
                }
                LayerKind::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    arity("1", preds.len() == 1)?;
                    let (sname, s) = src(0);
                    if !s.spatial {
                        return Err(GraphError::NotSpatial {
                            node: node.name.clone(),
                            source_node: sname.clone(),
                        });
                    }
                    self.check_channels(node, sname, *in_channels, s.channels)?;
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(invalid("channels, kernel and stride must be positive"));
                    }
                    let ho = conv_output_dim(s.height, *kernel, *stride, *padding)
                        .ok_or_else(|| invalid("kernel larger than padded input"))?;
                    let wo = conv_output_dim(s.width, *kernel, *stride, *padding)
                        .ok_or_else(|| invalid("kernel larger than padded input"))?;
                    FeatureShape::spatial(*out_channels, ho, wo)
                }
                LayerKind::BatchNorm { channels } => {
                    arity("1", preds.len() == 1)?;
                    let (sname, s) = src(0);
                    self.check_channels(node, sname, *channels, s.channels)?;
                    s
                }
                LayerKind::Linear {
                    out_features,
                    in_features,
                    ..
                } => {
                    arity("1", preds.len() == 1)?;
                    let (sname, s) = src(0);
                    if s.height != 1 || s.width != 1 {
                        return Err(GraphError::NotFlat {
                            node: node.name.clone(),
                            source_node: sname.clone(),
                            shape: s,
                        });
                    }
                    self.check_channels(node, sname, *in_features, s.channels)?;
                    if *out_features == 0 {
                        return Err(invalid("out_features must be positive"));
                    }
                    FeatureShape::flat(*out_features)
                }
                LayerKind::Relu => {
                    arity("1", preds.len() == 1)?;
                    src(0).1
                }
                LayerKind::Gap => {
                    arity("1", preds.len() == 1)?;
                    let (sname, s) = src(0);
                    if !s.spatial {
                        return Err(GraphError::NotSpatial {
                            node: node.name.clone(),
                            source_node: sname.clone(),
                        });
                    }
                    FeatureShape::flat(s.channels)
                }
                LayerKind::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => {
                    arity("1", preds.len() == 1)?;
                    let (sname, s) = src(0);
                    if !s.spatial {
                        return Err(GraphError::NotSpatial {
                            node: node.name.clone(),
                            source_node: sname.clone(),
                        });
                    }
                    if *kernel == 0 || *stride == 0 || 2 * padding > *kernel {
                        return Err(invalid("invalid pooling window"));
                    }
                    let ho = conv_output_dim(s.height, *kernel, *stride, *padding)
                        .ok_or_else(|| invalid("window larger than padded input"))?;
                    let wo = conv_output_dim(s.width, *kernel, *stride, *padding)
                        .ok_or_else(|| invalid("window larger than padded input"))?;
                    FeatureShape::spatial(s.channels, ho, wo)
                }
                LayerKind::Add => {
                    arity(">= 2", preds.len() >= 2)?;
                    let (first, s0) = src(0);
                    for k in 1..preds.len() {
                        let (other, sk) = src(k);
                        if sk != s0 {
                            return Err(GraphError::AddShapeMismatch {
                                node: node.name.clone(),
                                left: first.clone(),
                                right: other.clone(),
                                shapes: Box::new([s0, sk]),
                            });
                        }
                    }
                    s0
                }
                LayerKind::Concat => {
                    arity(">= 2", preds.len() >= 2)?;
                    let (_, s0) = src(0);
                    let mut channels = 0;
                    for k in 0..preds.len() {
                        let (other, sk) = src(k);
                        if (sk.height, sk.width, sk.spatial) != (s0.height, s0.width, s0.spatial) {
                            return Err(GraphError::ConcatMismatch {
                                node: node.name.clone(),
                                operand: other.clone(),
                                expected: format!("{}x{}", s0.height, s0.width),
                                actual: format!("{}x{}", sk.height, sk.width),
                            });
                        }
                        channels += sk.channels;
                    }
                    FeatureShape { channels, ..s0 }
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    fn check_channels(
        &self,
        node: &LayerNode,
        source: &str,
        declared: usize,
        inferred: usize,
    ) -> Result<(), GraphError> {
        if declared != inferred {
            return Err(GraphError::ChannelMismatch {
                node: node.name.clone(),
                source_node: source.to_string(),
                declared,
                inferred,
            });
        }
        Ok(())
    }
}

/// Kahn's algorithm, always releasing the lowest original position first.
fn topo_order(nodes: &[LayerNode], index: &HashMap<String, usize>) -> Result<Vec<usize>, GraphError> {
    let mut indegree: Vec<usize> = nodes.iter().map(|n| n.inputs.len()).collect();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for inp in &n.inputs {
            consumers[index[inp]].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len())
            .filter(|&i| indegree[i] > 0)
            .map(|i| nodes[i].name.clone())
            .collect();
        return Err(GraphError::Cycle(stuck));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(c: usize, h: usize, w: usize) -> LayerNode {
        LayerNode::new(
            "input",
            LayerKind::Input {
                channels: c,
                height: h,
                width: w,
            },
            &[],
        )
    }

    fn conv(name: &str, ci: usize, co: usize, from: &str) -> LayerNode {
        LayerNode::new(
            name,
            LayerKind::Conv {
                out_channels: co,
                in_channels: ci,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
            &[from],
        )
    }

    #[test]
    fn empty_graph_is_rejected() {
        assert_eq!(NetworkGraph::new(vec![], "x", Head::Classifier), Err(GraphError::Empty));
    }

    #[test]
    fn add_mismatch_names_both_operands() {
        let nodes = vec![
            input(3, 8, 8),
            conv("a", 3, 64, "input"),
            conv("b", 3, 128, "input"),
            LayerNode::new("sum", LayerKind::Add, &["a", "b"]),
        ];
        match NetworkGraph::new(nodes, "sum", Head::Classifier) {
            Err(GraphError::AddShapeMismatch { left, right, .. }) => {
                assert_eq!((left.as_str(), right.as_str()), ("a", "b"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cycle_and_dangling_inputs_are_named() {
        let nodes = vec![input(3, 4, 4), conv("a", 3, 3, "b"), conv("b", 3, 3, "a")];
        assert!(matches!(
            NetworkGraph::new(nodes, "b", Head::Classifier),
            Err(GraphError::Cycle(_))
        ));
        let nodes = vec![input(3, 4, 4), conv("a", 3, 3, "ghost")];
        assert_eq!(
            NetworkGraph::new(nodes, "a", Head::Classifier),
            Err(GraphError::DanglingInput {
                node: "a".into(),
                input: "ghost".into()
            })
        );
    }

    #[test]
    fn channel_mismatch_is_detected() {
        let nodes = vec![input(3, 4, 4), conv("a", 4, 8, "input")];
        assert!(matches!(
            NetworkGraph::new(nodes, "a", Head::Classifier),
            Err(GraphError::ChannelMismatch {
                declared: 4,
                inferred: 3,
                ..
            })
        ));
    }

    #[test]
    fn nodes_are_reordered_topologically() {
        let nodes = vec![conv("b", 4, 4, "a"), conv("a", 3, 4, "input"), input(3, 4, 4)];
        let g = NetworkGraph::new(nodes, "b", Head::Classifier).unwrap();
        let names: Vec<_> = g.nodes().iter().map(|n| n.name.as_str()).collect();
        assert_eq!(names, ["input", "a", "b"]);
        assert_eq!(g.shape_of("b"), Some(FeatureShape::spatial(4, 4, 4)));
    }
}
