use crate::graph::{LayerKind, LayerNode, NetworkGraph, ParamRole, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::{SplitError, SplitMask, SplitSpec, Technique};

/// Standalone network holding only the fit-hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct SlimNetwork<T: Scalar = f32> {
    pub graph: NetworkGraph,
    pub params: ParamStore<T>,
}

/// Kept output channels of every node, derived from the mask's conv/linear entries.
fn kept_channels(graph: &NetworkGraph, mask: &SplitMask) -> Result<Vec<Vec<usize>>, SplitError> {
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(graph.nodes().len());
    for (i, node) in graph.nodes().iter().enumerate() {
        let preds = graph.predecessors(i);
        let spec = || {
            mask.spec(&node.name)
                .ok_or_else(|| SplitError::Uncovered(node.name.clone()))
        };
        let mismatch = |msg: &str| SplitError::SpecMismatch {
            node: node.name.clone(),
            msg: msg.into(),
        };
        let out = match &node.kind {
            LayerKind::Input { channels, .. } => (0..*channels).collect(),
            LayerKind::Conv { .. } | LayerKind::Linear { .. } => match spec()? {
                SplitSpec::Conv { keep_out, keep_in } | SplitSpec::Linear { keep_out, keep_in } => {
                    if *keep_in != kept[preds[0]] {
                        return Err(mismatch("keep-in differs from the channels kept upstream"));
                    }
                    (0..*keep_out).collect()
                }
                _ => return Err(mismatch("expected a conv/linear split")),
            },
            LayerKind::BatchNorm { .. } => match spec()? {
                SplitSpec::BatchNorm { keep } if *keep == kept[preds[0]] => keep.clone(),
                _ => return Err(mismatch("batch-norm keep set differs from its producer")),
            },
            LayerKind::Relu | LayerKind::Gap | LayerKind::MaxPool { .. } => kept[preds[0]].clone(),
            LayerKind::Add => {
                let first = kept[preds[0]].clone();
                if let Some(&p) = preds.iter().find(|&&p| kept[p] != first) {
                    return Err(SplitError::AddKeepMismatch {
                        node: node.name.clone(),
                        left: graph.nodes()[preds[0]].name.clone(),
                        right: graph.nodes()[p].name.clone(),
                    });
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
    Ok(kept)
}

/// Gathers the fit-hypothesis of a KELS-split network into a smaller, dense network.
///
/// Batch-norm scale, shift and running statistics of kept channels are copied unchanged.
pub fn extract_slim<T: Scalar>(
    graph: &NetworkGraph,
    params: &ParamStore<T>,
    mask: &SplitMask,
) -> Result<SlimNetwork<T>, SplitError> {
    if mask.technique != Technique::Kels {
        return Err(SplitError::UnsupportedTechnique(mask.technique));
    }
    graph.check_params(params)?;
    let kept = kept_channels(graph, mask)?;
    let mut nodes = Vec::with_capacity(graph.nodes().len());
    let mut slim_params = ParamStore::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        let preds = graph.predecessors(i);
        let width = |idx: usize| kept[idx].len();
        let kind = match &node.kind {
            LayerKind::Input { .. } | LayerKind::Relu | LayerKind::Gap | LayerKind::MaxPool { .. } => node.kind.clone(),
            LayerKind::Add | LayerKind::Concat => node.kind.clone(),
            LayerKind::Conv {
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
                bias,
            } => {
                let keep_in = &kept[preds[0]];
                let keep_out = width(i);
                let inner = kernel * kernel;
                let w = params.require(&ParamRole::Weight.key(&node.name))?;
                let mut data = Vec::with_capacity(keep_out * inner * keep_in.len());
                for o in 0..keep_out {
                    for s in 0..inner {
                        let base = (o * inner + s) * in_channels;
                        data.extend(keep_in.iter().map(|&c| w.data()[base + c]));
                    }
                }
                debug_assert!(keep_out <= *out_channels);
                slim_params.insert(
                    ParamRole::Weight.key(&node.name),
                    Tensor::new(vec![keep_out, *kernel, *kernel, keep_in.len()], data)
                        .map_err(crate::graph::GraphError::from)?,
                );
                if *bias {
                    let key = ParamRole::Bias.key(&node.name);
                    slim_params.insert(key.clone(), gather(params.require(&key)?, &kept[i]));
                }
                LayerKind::Conv {
                    out_channels: keep_out,
                    in_channels: keep_in.len(),
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                    bias: *bias,
                }
            }
            LayerKind::Linear { in_features, bias, .. } => {
                let keep_in = &kept[preds[0]];
                let keep_out = width(i);
                let w = params.require(&ParamRole::Weight.key(&node.name))?;
                let mut data = Vec::with_capacity(keep_out * keep_in.len());
                for o in 0..keep_out {
                    data.extend(keep_in.iter().map(|&c| w.data()[o * in_features + c]));
                }
                slim_params.insert(
                    ParamRole::Weight.key(&node.name),
                    Tensor::new(vec![keep_out, keep_in.len()], data).map_err(crate::graph::GraphError::from)?,
                );
                if *bias {
                    let key = ParamRole::Bias.key(&node.name);
                    slim_params.insert(key.clone(), gather(params.require(&key)?, &kept[i]));
                }
                LayerKind::Linear {
                    out_features: keep_out,
                    in_features: keep_in.len(),
                    bias: *bias,
                }
            }
            LayerKind::BatchNorm { .. } => {
                for role in [
                    ParamRole::Scale,
                    ParamRole::Shift,
                    ParamRole::RunningMean,
                    ParamRole::RunningVar,
                ] {
                    let key = role.key(&node.name);
                    slim_params.insert(key.clone(), gather(params.require(&key)?, &kept[i]));
                }
                LayerKind::BatchNorm { channels: width(i) }
            }
        };
        nodes.push(LayerNode {
            name: node.name.clone(),
            kind,
            inputs: node.inputs.clone(),
        });
    }
    let slim =
        NetworkGraph::new(nodes, graph.output_name(), graph.head())?.with_batchnorm_config(graph.batchnorm_config());
    slim.check_params(&slim_params)?;
    Ok(SlimNetwork {
        graph: slim,
        params: slim_params,
    })
}

fn gather<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    Tensor::new(vec![idx.len()], idx.iter().map(|&i| t.data()[i]).collect()).expect("non-empty keep set")
}

/// Copy of `params` with every reset-hypothesis conv/linear entry set to zero.
pub fn masked_dense<T: Scalar>(
    graph: &NetworkGraph,
    params: &ParamStore<T>,
    mask: &SplitMask,
) -> Result<ParamStore<T>, SplitError> {
    let mut out = params.clone();
    for (key, fit) in mask.param_masks(graph)? {
        let t = out.require_mut(&key)?;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if !fit.get(i) {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_architecture, ConcatVariant, Family};
    use crate::split::{kels_split, wels_split};
    use crate::tensor::SeededRng;

    #[test]
    fn identity_mask_is_byte_identical() {
        let g = build_architecture(Family::ToyResnet, 4, [3, 8, 8]).unwrap();
        let p = g.init_params::<f32>(3);
        let slim = extract_slim(&g, &p, &SplitMask::full(&g)).unwrap();
        assert_eq!(slim.graph, g);
        assert_eq!(slim.params, p);
    }

    #[test]
    fn wels_masks_are_not_extractable() {
        let g = build_architecture(Family::ToyResnet, 4, [3, 8, 8]).unwrap();
        let p = g.init_params::<f32>(3);
        let mask = wels_split(&g, 0.5, &mut SeededRng::new(0, "w")).unwrap();
        assert_eq!(
            extract_slim(&g, &p, &mask).unwrap_err(),
            SplitError::UnsupportedTechnique(Technique::Wels)
        );
    }

    #[test]
    fn slim_matches_masked_dense() {
        for family in [
            Family::ToyResnet,
            Family::ConcatBlock(ConcatVariant::NormFirst),
            Family::SmallVggBn,
        ] {
            let g = build_architecture(family, 3, [3, 8, 8]).unwrap();
            let mut p = g.init_params::<f64>(11);
            // non-trivial running statistics
            for (k, t) in p.iter_mut() {
                if k.ends_with("running_mean") || k.ends_with("shift") {
                    t.data_mut()
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, v)| *v = 0.1 * (i as f64).sin());
                }
            }
            let mask = kels_split(&g, 0.5).unwrap();
            let slim = extract_slim(&g, &p, &mask).unwrap();
            let zeroed = masked_dense(&g, &p, &mask).unwrap();
            let x = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |i| ((i * 7919) % 97) as f64 / 50.0 - 1.0);
            let a = slim.graph.forward_eval(&slim.params, &x).unwrap();
            let b = g.forward_eval(&zeroed, &x).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-9, "{family:?}");
        }
    }
}
