//! Fit/reset hypothesis masks.
//!
//! Two techniques build a [`SplitMask`]:
//!
//! * **KELS** (kernel-level, convolution-aware): every conv keeps the first
//!   `ceil(s_r * Co)` filters and, inside them, exactly the kernels that read
//!   channels kept upstream. Kept channel sets are propagated through
//!   batch norm, pooling, add and concat, so the fit-hypothesis is itself a
//!   dimension-consistent slim network ([`extract_slim`]).
//! * **WELS** (weight-level): a uniform random bitset per weight tensor with
//!   `round(s_r * |W|)` ones. General, but not extractable.

mod bitset;
mod extract;
mod profile;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, LayerKind, NetworkGraph, ParamRole, ParamSpec};
use crate::tensor::SeededRng;

pub use bitset::Bitset;
pub use extract::{extract_slim, masked_dense, SlimNetwork};
pub use profile::{profile_network, LayerProfile, ProfileReport};

/// Version written into mask files; readers reject anything else.
pub const MASK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("split rate must lie in (0, 1), got {0}")]
    SplitRate(f64),
    #[error("add `{node}`: operands `{left}` and `{right}` keep different channel sets")]
    AddKeepMismatch { node: String, left: String, right: String },
    #[error("{0} masks cannot be extracted into a slim network")]
    UnsupportedTechnique(Technique),
    #[error("mask does not cover node `{0}`")]
    Uncovered(String),
    #[error("mask entry for `{node}` does not fit its layer: {msg}")]
    SpecMismatch { node: String, msg: String },
    #[error("mask file: {0}")]
    Format(String),
    #[error("mask file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Technique {
    Kels,
    Wels,
}

impl std::fmt::Display for Technique {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Technique::Kels => "KELS",
            Technique::Wels => "WELS",
        })
    }
}

/// Fit-hypothesis description for one node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// First `keep_out` filters; within them, the kernels at `keep_in`.
    Conv { keep_out: usize, keep_in: Vec<usize> },
    /// First `keep_out` rows; within them, the columns at `keep_in`.
    Linear { keep_out: usize, keep_in: Vec<usize> },
    /// Channels of a batch norm that belong to the slim network.
    BatchNorm { keep: Vec<usize> },
    /// Explicit per-weight membership; a missing bias bitset means the bias is entirely fit.
    Bitset { weight: Bitset, bias: Option<Bitset> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMask {
    pub technique: Technique,
    pub split_rate: f64,
    pub specs: BTreeMap<String, SplitSpec>,
}

fn check_rate(s_r: f64) -> Result<(), SplitError> {
    if !(s_r > 0.0 && s_r < 1.0) {
        return Err(SplitError::SplitRate(s_r));
    }
    Ok(())
}

/// `ceil(s_r * c)`, treating products within 1e-9 of an integer as exact.
pub fn kels_count(s_r: f64, c: usize) -> usize {
    let x = s_r * c as f64;
    let r = x.round();
    let n = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (n as usize).clamp(1, c)
}

/// `round(s_r * n)` with halves rounded up.
pub fn wels_count(s_r: f64, n: usize) -> usize {
    let x = s_r * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { (x + 0.5).floor() };
    (k as usize).min(n)
}

/// Builds the KELS mask; it depends only on the architecture and `s_r`.
pub fn kels_split(graph: &NetworkGraph, s_r: f64) -> Result<SplitMask, SplitError> {
    check_rate(s_r)?;
    kels_with(graph, s_r, |c| kels_count(s_r, c))
}

impl SplitMask {
    /// KELS-shaped mask that keeps everything. Extracting it yields the dense network.
    pub fn full(graph: &NetworkGraph) -> Self {
        kels_with(graph, 1.0, |c| c).expect("identity split always propagates")
    }
}

fn kels_with(graph: &NetworkGraph, s_r: f64, count: impl Fn(usize) -> usize) -> Result<SplitMask, SplitError> {
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(graph.nodes().len());
    let mut specs = BTreeMap::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        let preds = graph.predecessors(i);
        let upstream = |k: usize| kept[preds[k]].clone();
        let out = match &node.kind {
            LayerKind::Input { channels, .. } => (0..*channels).collect(),
            LayerKind::Conv { out_channels, .. } => {
                let keep_out = count(*out_channels);
                specs.insert(
                    node.name.clone(),
                    SplitSpec::Conv {
                        keep_out,
                        keep_in: upstream(0),
                    },
                );
                (0..keep_out).collect()
            }
            LayerKind::Linear { out_features, .. } => {
                // the classifier keeps every logit
                let keep_out = if i == graph.output_index() {
                    *out_features
                } else {
                    count(*out_features)
                };
                specs.insert(
                    node.name.clone(),
                    SplitSpec::Linear {
                        keep_out,
                        keep_in: upstream(0),
                    },
                );
                (0..keep_out).collect()
            }
            LayerKind::BatchNorm { .. } => {
                let keep = upstream(0);
                specs.insert(node.name.clone(), SplitSpec::BatchNorm { keep: keep.clone() });
                keep
            }
            LayerKind::Relu | LayerKind::Gap | LayerKind::MaxPool { .. } => upstream(0),
            LayerKind::Add => {
                let first = upstream(0);
                for k in 1..preds.len() {
                    if kept[preds[k]] != first {
                        return Err(SplitError::AddKeepMismatch {
                            node: node.name.clone(),
                            left: graph.nodes()[preds[0]].name.clone(),
                            right: graph.nodes()[preds[k]].name.clone(),
                        });
                    }
                }
                first
            }
            LayerKind::Concat => {
                let mut offset = 0;
                let mut all = Vec::new();
                for &p in preds {
                    all.extend(kept[p].iter().map(|c| c + offset));
                    offset += graph.shapes()[p].channels;
                }
                all
            }
        };
        kept.push(out);
    }
    Ok(SplitMask {
        technique: Technique::Kels,
        split_rate: s_r,
        specs,
    })
}

/// Builds a WELS mask: exactly `round(s_r * |W|)` uniformly chosen fit weights
/// per conv/linear tensor. The classifier bias stays entirely in the fit-hypothesis;
/// batch-norm tensors are not split.
pub fn wels_split(graph: &NetworkGraph, s_r: f64, rng: &mut SeededRng) -> Result<SplitMask, SplitError> {
    check_rate(s_r)?;
    let mut draw = |n: usize| {
        let k = wels_count(s_r, n);
        let mut b = Bitset::zeros(n);
        for i in index::sample(rng, n, k) {
            b.set(i, true);
        }
        b
    };
    let mut specs = BTreeMap::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        let (weight_len, bias_len) = match &node.kind {
            LayerKind::Conv {
                out_channels,
                in_channels,
                kernel,
                bias,
                ..
            } => (
                out_channels * kernel * kernel * in_channels,
                bias.then_some(*out_channels),
            ),
            LayerKind::Linear {
                out_features,
                in_features,
                bias,
            } => {
                let final_layer = i == graph.output_index();
                (
                    out_features * in_features,
                    bias.then_some(*out_features).filter(|_| !final_layer),
                )
            }
            _ => continue,
        };
        let weight = draw(weight_len);
        let bias = bias_len.map(&mut draw);
        specs.insert(node.name.clone(), SplitSpec::Bitset { weight, bias });
    }
    Ok(SplitMask {
        technique: Technique::Wels,
        split_rate: s_r,
        specs,
    })
}

/// Parameter counts of the split tensors (conv/linear weights and biases).
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSparsity {
    pub node: String,
    pub total: usize,
    pub fit: usize,
}

impl LayerSparsity {
    pub fn sparsity(&self) -> f64 {
        1.0 - self.fit as f64 / self.total as f64
    }
}

impl SparsityReport {
    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.total).sum()
    }

    pub fn fit(&self) -> usize {
        self.layers.iter().map(|l| l.fit).sum()
    }

    /// `1 - |fit| / |all|` over the split tensors.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.fit() as f64 / self.total() as f64
    }

    pub fn layer(&self, node: &str) -> Option<&LayerSparsity> {
        self.layers.iter().find(|l| l.node == node)
    }
}

/// Fraction of conv/linear parameters outside the fit-hypothesis, network-wide
/// and per layer. Batch-norm tensors are transferred whole and not counted.
pub fn compute_sparsity(mask: &SplitMask, graph: &NetworkGraph) -> Result<SparsityReport, SplitError> {
    let mut layers: Vec<LayerSparsity> = Vec::new();
    for spec in graph.param_specs() {
        let Some(fit) = mask.fit_indicator(graph, &spec)? else {
            continue;
        };
        let entry = match layers.last_mut() {
            Some(l) if l.node == spec.node => l,
            _ => {
                layers.push(LayerSparsity {
                    node: spec.node.clone(),
                    total: 0,
                    fit: 0,
                });
                layers.last_mut().expect("just pushed")
            }
        };
        entry.total += fit.len();
        entry.fit += fit.count_ones();
    }
    Ok(SparsityReport { layers })
}

impl SplitMask {
    pub fn spec(&self, node: &str) -> Option<&SplitSpec> {
        self.specs.get(node)
    }

    /// Fit membership of each element of a conv/linear weight or bias tensor.
    ///
    /// `None` for tensors that are never split (batch norm).
    pub fn fit_indicator(&self, graph: &NetworkGraph, spec: &ParamSpec) -> Result<Option<Bitset>, SplitError> {
        let node = graph
            .node(&spec.node)
            .ok_or_else(|| SplitError::Uncovered(spec.node.clone()))?;
        if !matches!(node.kind, LayerKind::Conv { .. } | LayerKind::Linear { .. }) {
            return Ok(None);
        }
        let entry = self
            .specs
            .get(&spec.node)
            .ok_or_else(|| SplitError::Uncovered(spec.node.clone()))?;
        let mismatch = |msg: String| SplitError::SpecMismatch {
            node: spec.node.clone(),
            msg,
        };
        let n = spec.numel();
        let bits = match (entry, spec.role) {
            (SplitSpec::Conv { keep_out, keep_in }, role) | (SplitSpec::Linear { keep_out, keep_in }, role) => {
                let (co, ci) = match node.kind {
                    LayerKind::Conv {
                        out_channels,
                        in_channels,
                        ..
                    } => (out_channels, in_channels),
                    LayerKind::Linear {
                        out_features,
                        in_features,
                        ..
                    } => (out_features, in_features),
                    _ => unreachable!("checked above"),
                };
                if *keep_out > co || keep_in.iter().any(|&c| c >= ci) {
                    return Err(mismatch(format!("keep sets exceed {co} outputs / {ci} inputs")));
                }
                match role {
                    ParamRole::Weight => {
                        let inner = n / co;
                        let mut in_set = vec![false; ci];
                        keep_in.iter().for_each(|&c| in_set[c] = true);
                        Bitset::from_fn(n, |i| i / inner < *keep_out && in_set[i % ci])
                    }
                    ParamRole::Bias => Bitset::from_fn(n, |o| o < *keep_out),
                    _ => return Ok(None),
                }
            }
            (SplitSpec::Bitset { weight, .. }, ParamRole::Weight) => {
                if weight.len() != n {
                    return Err(mismatch(format!(
                        "weight bitset has {} bits for {n} weights",
                        weight.len()
                    )));
                }
                weight.clone()
            }
            (SplitSpec::Bitset { bias, .. }, ParamRole::Bias) => match bias {
                Some(b) if b.len() != n => {
                    return Err(mismatch(format!("bias bitset has {} bits for {n} entries", b.len())));
                }
                Some(b) => b.clone(),
                None => Bitset::ones(n),
            },
            (other, role) => return Err(mismatch(format!("{other:?} cannot describe a {role:?} tensor"))),
        };
        Ok(Some(bits))
    }

    /// Fit membership of every split tensor, keyed by parameter key.
    pub fn param_masks(&self, graph: &NetworkGraph) -> Result<BTreeMap<String, Bitset>, SplitError> {
        let mut out = BTreeMap::new();
        for spec in graph.param_specs() {
            if let Some(b) = self.fit_indicator(graph, &spec)? {
                out.insert(spec.key, b);
            }
        }
        Ok(out)
    }

    /// All split tensors' membership concatenated in parameter order.
    pub fn flatten(&self, graph: &NetworkGraph) -> Result<Bitset, SplitError> {
        let mut all = Bitset::zeros(0);
        for spec in graph.param_specs() {
            if let Some(b) = self.fit_indicator(graph, &spec)? {
                all.extend_from(&b);
            }
        }
        Ok(all)
    }

    /// Checks that every parameterized node has an entry of the right kind.
    pub fn validate(&self, graph: &NetworkGraph) -> Result<(), SplitError> {
        let mut seen = BTreeSet::new();
        for node in graph.nodes().iter().filter(|n| n.kind.has_params()) {
            let is_bn = matches!(node.kind, LayerKind::BatchNorm { .. });
            match self.specs.get(&node.name) {
                None if is_bn && self.technique == Technique::Wels => {}
                None => return Err(SplitError::Uncovered(node.name.clone())),
                Some(_) => {
                    seen.insert(node.name.clone());
                }
            }
        }
        if let Some(extra) = self.specs.keys().find(|k| !seen.contains(*k)) {
            return Err(SplitError::SpecMismatch {
                node: extra.clone(),
                msg: "no such parameterized node".into(),
            });
        }
        for spec in graph.param_specs() {
            self.fit_indicator(graph, &spec)?;
        }
        Ok(())
    }

    /// Versioned JSON document.
    pub fn to_text(&self) -> String {
        let doc = MaskFile {
            format: MASK_FORMAT.into(),
            version: MASK_FORMAT_VERSION,
            mask: self.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("mask serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, SplitError> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| SplitError::Format(e.to_string()))?;
        if header.format != MASK_FORMAT {
            return Err(SplitError::Format(format!("unexpected format tag `{}`", header.format)));
        }
        if header.version != MASK_FORMAT_VERSION {
            return Err(SplitError::Version {
                found: header.version,
                expected: MASK_FORMAT_VERSION,
            });
        }
        let doc: MaskFile = serde_json::from_str(text).map_err(|e| SplitError::Format(e.to_string()))?;
        Ok(doc.mask)
    }
}

const MASK_FORMAT: &str = "kevo-split-mask";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    format: String,
    version: u32,
    mask: SplitMask,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_architecture, ConcatVariant, Family, Head, LayerNode};

    fn single_conv(ci: usize, co: usize) -> NetworkGraph {
        NetworkGraph::new(
            vec![
                LayerNode::new(
                    "input",
                    LayerKind::Input {
                        channels: ci,
                        height: 4,
                        width: 4,
                    },
                    &[],
                ),
                LayerNode::new(
                    "pre",
                    LayerKind::Conv {
                        out_channels: ci,
                        in_channels: ci,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        bias: false,
                    },
                    &["input"],
                ),
                LayerNode::new(
                    "conv",
                    LayerKind::Conv {
                        out_channels: co,
                        in_channels: ci,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                        bias: false,
                    },
                    &["pre"],
                ),
            ],
            "conv",
            Head::Classifier,
        )
        .unwrap()
    }

    #[test]
    fn four_by_four_conv_at_half() {
        let mask = kels_split(&single_conv(4, 4), 0.5).unwrap();
        assert_eq!(
            mask.spec("conv"),
            Some(&SplitSpec::Conv {
                keep_out: 2,
                keep_in: vec![0, 1]
            })
        );
    }

    #[test]
    fn interior_conv_sparsity() {
        let g = single_conv(10, 10);
        let report = compute_sparsity(&kels_split(&g, 0.8).unwrap(), &g).unwrap();
        assert!((report.layer("conv").unwrap().sparsity() - 0.36).abs() < 1e-12);
    }

    #[test]
    fn first_conv_keeps_all_input_channels() {
        let g = build_architecture(Family::ToyResnet, 5, [3, 8, 8]).unwrap();
        let mask = kels_split(&g, 0.5).unwrap();
        let report = compute_sparsity(&mask, &g).unwrap();
        assert!((report.layer("conv1").unwrap().sparsity() - 0.5).abs() < 1e-12);
        match mask.spec("fc").unwrap() {
            SplitSpec::Linear { keep_out, keep_in } => {
                assert_eq!(*keep_out, 5);
                assert_eq!(keep_in.len(), 8);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn concat_consumer_gets_per_segment_prefixes() {
        let g = build_architecture(Family::ConcatBlock(ConcatVariant::ConvFirst), 3, [3, 8, 8]).unwrap();
        let mask = kels_split(&g, 0.5).unwrap();
        assert_eq!(
            mask.spec("conv3"),
            Some(&SplitSpec::Conv {
                keep_out: 4,
                keep_in: vec![0, 1, 4, 5, 6]
            })
        );
    }

    #[test]
    fn ceiling_guards_against_float_noise() {
        assert_eq!(kels_count(0.3, 10), 3);
        assert_eq!(kels_count(0.7, 10), 7);
        assert_eq!(kels_count(0.8, 64), 52);
        assert_eq!(kels_count(0.5, 3), 2);
        assert_eq!(wels_count(0.3, 1000), 300);
        assert_eq!(wels_count(0.5, 3), 2);
    }

    #[test]
    fn rejects_out_of_range_rates() {
        let g = single_conv(4, 4);
        for s in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(matches!(kels_split(&g, s), Err(SplitError::SplitRate(_))));
            assert!(matches!(
                wels_split(&g, s, &mut SeededRng::new(0, "w")),
                Err(SplitError::SplitRate(_))
            ));
        }
    }

    #[test]
    fn wels_popcount_is_exact() {
        let g = build_architecture(Family::ToyResnet, 5, [3, 8, 8]).unwrap();
        let mask = wels_split(&g, 0.3, &mut SeededRng::new(9, "wels")).unwrap();
        for spec in g.param_specs() {
            if let Some(b) = mask.fit_indicator(&g, &spec).unwrap() {
                if spec.key == "fc.bias" {
                    assert_eq!(b.count_ones(), b.len());
                } else {
                    assert_eq!(b.count_ones(), wels_count(0.3, b.len()));
                }
            }
        }
    }

    #[test]
    fn mask_file_round_trip_and_version_check() {
        let g = build_architecture(Family::ToyResnet, 5, [3, 8, 8]).unwrap();
        for mask in [
            kels_split(&g, 0.5).unwrap(),
            wels_split(&g, 0.5, &mut SeededRng::new(1, "w")).unwrap(),
        ] {
            let text = mask.to_text();
            assert_eq!(SplitMask::from_text(&text).unwrap(), mask);
            let bumped = text.replacen("\"version\": 1", "\"version\": 2", 1);
            assert!(matches!(
                SplitMask::from_text(&bumped),
                Err(SplitError::Version { found: 2, .. })
            ));
        }
    }

    #[test]
    fn validate_detects_missing_entries() {
        let g = build_architecture(Family::ToyResnet, 5, [3, 8, 8]).unwrap();
        let mut mask = kels_split(&g, 0.5).unwrap();
        mask.validate(&g).unwrap();
        mask.specs.remove("block.conv2");
        assert_eq!(mask.validate(&g), Err(SplitError::Uncovered("block.conv2".into())));
    }
}
