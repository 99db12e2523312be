//! Inference-cost model.
//!
//! Counting convention (one "op" is one floating-point operation):
//!
//! | layer      | ops                                   | params          |
//! |------------|---------------------------------------|-----------------|
//! | conv       | `2*Co*Ci*k*k*Ho*Wo` (+`Co*Ho*Wo` bias)| `Co*k*k*Ci` (+`Co`) |
//! | linear     | `2*Co*Ci` (+`Co` bias)                | `Co*Ci` (+`Co`) |
//! | batch norm | `2*C*H*W` (inference scale + shift)   | `4*C` (scale, shift, running mean, running var) |
//! | relu, gap  | one per input element                 | 0               |
//! | add        | `(inputs - 1)` per output element     | 0               |
//! | max pool   | `k*k` per output element              | 0               |
//! | concat     | 0                                     | 0               |

use crate::graph::{GraphError, LayerKind, NetworkGraph};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerProfile {
    pub node: String,
    pub kind: &'static str,
    pub ops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProfileReport {
    pub layers: Vec<LayerProfile>,
    pub total_ops: u64,
    pub total_params: u64,
}

impl ProfileReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,kind,ops,params\n");
        for l in &self.layers {
            out.push_str(&format!("{},{},{},{}\n", l.node, l.kind, l.ops, l.params));
        }
        out.push_str(&format!("total,,{},{}\n", self.total_ops, self.total_params));
        out
    }
}

/// Profiles `graph` evaluated on a `[channels, height, width]` input. If the
/// shape differs from the graph's declared input, the graph is re-validated
/// at the new resolution.
pub fn profile_network(graph: &NetworkGraph, input: [usize; 3]) -> Result<ProfileReport, GraphError> {
    let declared = graph.input_shape();
    let rebuilt;
    let g = if [declared.channels, declared.height, declared.width] == input {
        graph
    } else {
        let mut nodes = graph.nodes().to_vec();
        nodes[graph.input_index()].kind = LayerKind::Input {
            channels: input[0],
            height: input[1],
            width: input[2],
        };
        rebuilt = NetworkGraph::new(nodes, graph.output_name(), graph.head())?;
        &rebuilt
    };
    let shapes = g.shapes();
    let mut layers = Vec::with_capacity(g.nodes().len());
    for (i, node) in g.nodes().iter().enumerate() {
        let out = shapes[i];
        let out_elems = out.numel() as u64;
        let in_elems = |k: usize| shapes[g.predecessors(i)[k]].numel() as u64;
        let (ops, params) = match &node.kind {
            LayerKind::Input { .. } | LayerKind::Concat => (0, 0),
            LayerKind::Conv {
                out_channels,
                in_channels,
                kernel,
                bias,
                ..
            } => {
                let (co, ci, k) = (*out_channels as u64, *in_channels as u64, *kernel as u64);
                let spatial = (out.height * out.width) as u64;
                let b = u64::from(*bias);
                (
                    2 * co * ci * k * k * spatial + b * co * spatial,
                    co * k * k * ci + b * co,
                )
            }
            LayerKind::Linear {
                out_features,
                in_features,
                bias,
            } => {
                let (co, ci) = (*out_features as u64, *in_features as u64);
                let b = u64::from(*bias);
                (2 * co * ci + b * co, co * ci + b * co)
            }
            LayerKind::BatchNorm { channels } => (2 * out_elems, 4 * *channels as u64),
            LayerKind::Relu | LayerKind::Gap => (in_elems(0), 0),
            LayerKind::Add => ((g.predecessors(i).len() as u64 - 1) * out_elems, 0),
            LayerKind::MaxPool { kernel, .. } => ((kernel * kernel) as u64 * out_elems, 0),
        };
        layers.push(LayerProfile {
            node: node.name.clone(),
            kind: node.kind.name(),
            ops,
            params,
        });
    }
    Ok(ProfileReport {
        total_ops: layers.iter().map(|l| l.ops).sum(),
        total_params: layers.iter().map(|l| l.params).sum(),
        layers,
    })
}
