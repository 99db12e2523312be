use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::graph::{fresh_tensor, Head, Mode, NetworkGraph, ParamStore};
use crate::metrics::{
    cross_entropy, l2_normalize, l2_normalize_backward, mine_semi_hard, nmi_score, recall_at_k, top1_accuracy,
    triplet_loss, KMeansOptions,
};
use crate::split::SplitMask;
use crate::tensor::{cosine_lr, EngineError, OptimizerState, SeededRng, Tensor};

use super::{Augment, LossKind, ResetMode, Task, TrainConfig, TrainError};

/// Replaces every reset-hypothesis entry of the split tensors:
/// `F <- M * F + (1 - M) * F_r`.
///
/// `F_r` is drawn from the stream of `generation` (random mode) or is zero.
/// Fit entries and batch-norm tensors are left untouched.
pub fn reinit_reset(
    graph: &NetworkGraph,
    params: &mut ParamStore<f32>,
    mask: &SplitMask,
    seed: u64,
    generation: usize,
    mode: ResetMode,
) -> Result<(), TrainError> {
    graph.check_params(params)?;
    for spec in graph.param_specs() {
        let Some(fit) = mask.fit_indicator(graph, &spec)? else {
            continue;
        };
        if fit.count_ones() == fit.len() {
            continue;
        }
        let fresh: Option<Tensor<f32>> = match mode {
            ResetMode::Random => Some(fresh_tensor(&spec, seed, generation)),
            ResetMode::Zeros => None,
        };
        let t = params.require_mut(&spec.key)?;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if !fit.get(i) {
                *v = fresh.as_ref().map_or(0.0, |f| f.data()[i]);
            }
        }
    }
    Ok(())
}

/// Class-balanced batches of up to `classes_per_batch` distinct classes with
/// exactly `k` samples each. Samples that do not fill a group of `k` are skipped.
pub fn pk_batches(labels: &[usize], classes_per_batch: usize, k: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<Vec<usize>>> = vec![Vec::new(); classes];
    let order = rng.permutation(labels.len());
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in order {
        by_class[labels[i]].push(i);
    }
    for (c, members) in by_class.into_iter().enumerate() {
        groups[c] = members.chunks_exact(k).map(<[usize]>::to_vec).collect();
    }
    let mut batches = Vec::new();
    loop {
        let available: Vec<usize> = (0..classes).filter(|&c| !groups[c].is_empty()).collect();
        if available.len() < 2 {
            break;
        }
        let pick = rng.permutation(available.len());
        let mut batch = Vec::with_capacity(classes_per_batch * k);
        for &p in pick.iter().take(classes_per_batch) {
            batch.extend(groups[available[p]].pop().expect("non-empty group"));
        }
        batches.push(batch);
    }
    batches
}

fn augment(batch: &mut Tensor<f32>, aug: Augment, rng: &mut SeededRng) {
    if !aug.flip && aug.crop_padding == 0 {
        return;
    }
    let [n, c, h, w] = [batch.dim(0), batch.dim(1), batch.dim(2), batch.dim(3)];
    let p = aug.crop_padding as i64;
    let data = batch.data_mut();
    let mut tmp = vec![0.0f32; c * h * w];
    for s in 0..n {
        let flip = aug.flip && rng.random::<bool>();
        let (dy, dx) = if p > 0 {
            (rng.random_range(-p..=p), rng.random_range(-p..=p))
        } else {
            (0, 0)
        };
        let img = &mut data[s * c * h * w..(s + 1) * c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as i64 + dy;
                    let sx0 = x as i64 + dx;
                    let sx = if flip { w as i64 - 1 - sx0 } else { sx0 };
                    tmp[(ch * h + y) * w + x] = if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                        img[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        img.copy_from_slice(&tmp);
    }
}

/// Trains for `cfg.epochs` epochs of mini-batch SGD with a cosine schedule
/// restarted at `cfg.lr`, returning the mean batch loss of every epoch.
///
/// Momentum buffers start from zero. Batch order comes from a stream derived
/// from `(seed, generation, epoch)`.
pub fn train_generation(
    graph: &NetworkGraph,
    params: &mut ParamStore<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    generation: usize,
) -> Result<Vec<f64>, TrainError> {
    cfg.validate()?;
    cfg.check_graph(graph, data.classes())?;
    graph.check_params(params)?;
    let trainable: Vec<String> = graph
        .param_specs()
        .into_iter()
        .filter(|s| s.role.trainable())
        .map(|s| s.key)
        .collect();
    let mut opt = OptimizerState::<f32>::new(cfg.momentum, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        let mut rng = SeededRng::new(cfg.seed, format!("batches/generation-{generation}/epoch-{epoch}"));
        let batches: Vec<Vec<usize>> = match cfg.loss {
            LossKind::Triplet { .. } => pk_batches(
                data.labels(),
                cfg.batch_size / cfg.samples_per_class,
                cfg.samples_per_class,
                &mut rng,
            ),
            _ => rng
                .permutation(data.len())
                .chunks(cfg.batch_size)
                .filter(|b| b.len() > 1)
                .map(<[usize]>::to_vec)
                .collect(),
        };
        if batches.is_empty() {
            return Err(TrainError::Config(format!(
                "the training set ({} samples) yields no batch of size {}",
                data.len(),
                cfg.batch_size
            )));
        }
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let mut x = data.batch(idx);
            augment(&mut x, cfg.augment, &mut rng);
            let labels = data.batch_labels(idx);
            let trace = graph.forward_trace(params, &x, Mode::Train)?;
            let (loss, grad_out) = match cfg.loss {
                LossKind::Ce {} => cross_entropy(trace.output(), &labels, 0.0)?,
                LossKind::SmoothCe { alpha } => cross_entropy(trace.output(), &labels, alpha)?,
                LossKind::Triplet { margin } => {
                    let y = l2_normalize(trace.output())?;
                    let set = mine_semi_hard(&y, &labels, margin)?;
                    let (loss, gy) = triplet_loss(&y, &set)?;
                    (loss, l2_normalize_backward(trace.output(), &gy)?)
                }
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    generation,
                    epoch,
                    batch: b,
                });
            }
            total += loss;
            let grads = graph.backward(params, &trace, &grad_out)?;
            for key in &trainable {
                let g = &grads.params[key];
                let p = params.require_mut(key)?;
                opt.step(key, p, g.data(), lr).map_err(|e| match e {
                    EngineError::NonFiniteGradient { layer } => TrainError::NonFiniteGradient {
                        generation,
                        epoch,
                        batch: b,
                        layer,
                    },
                    other => other.into(),
                })?;
            }
        }
        losses.push(total / batches.len() as f64);
    }
    Ok(losses)
}

/// Evaluation metrics; classification fills `top1`, retrieval the rest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub top1: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_4: Option<f64>,
    pub nmi: Option<f64>,
}

impl MetricRecord {
    /// Top-1 accuracy for classification, Recall@1 for retrieval.
    pub fn primary(&self) -> f64 {
        self.top1.or(self.recall_at_1).unwrap_or(f64::NAN)
    }
}

const EVAL_BATCH: usize = 256;

/// Runs the network in inference mode over `data`.
pub fn evaluate_model(
    graph: &NetworkGraph,
    params: &ParamStore<f32>,
    data: &Dataset,
    task: Task,
    nmi_clusters: Option<usize>,
) -> Result<MetricRecord, TrainError> {
    match (task, graph.head()) {
        (Task::Classification, Head::Classifier) | (Task::Retrieval, Head::Embedding) => {}
        (task, head) => {
            return Err(TrainError::Config(format!(
                "cannot evaluate {task:?} with a {head:?} head"
            )))
        }
    }
    let width = graph.output_width();
    let mut out = Vec::with_capacity(data.len() * width);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend_from_slice(graph.forward_eval(params, &data.batch(chunk))?.data());
    }
    let out = Tensor::new(vec![data.len(), width], out)?;
    Ok(match task {
        Task::Classification => MetricRecord {
            top1: Some(top1_accuracy(&out, data.labels())?),
            ..MetricRecord::default()
        },
        Task::Retrieval => {
            let emb = l2_normalize(&out)?;
            let k = nmi_clusters.unwrap_or(data.classes());
            MetricRecord {
                top1: None,
                recall_at_1: Some(recall_at_k(&emb, data.labels(), 1)?),
                recall_at_4: Some(recall_at_k(&emb, data.labels(), 4)?),
                nmi: Some(nmi_score(&emb, data.labels(), k, KMeansOptions::default())?),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobsConfig};
    use crate::graph::{build_architecture, build_architecture_with, ArchOptions, Family};
    use crate::split::kels_split;
    use crate::tensor::kaiming_bound;

    fn blobs(classes: usize, shape: [usize; 3]) -> (Dataset, Dataset) {
        synthetic_blobs(&BlobsConfig {
            classes,
            train_per_class: 20,
            eval_per_class: 10,
            shape,
            noise: 0.5,
            grid: 2,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn reinit_preserves_fit_and_respects_bounds() {
        let g = build_architecture(Family::ToyResnet, 3, [3, 8, 8]).unwrap();
        let mask = kels_split(&g, 0.5).unwrap();
        let before = g.init_params::<f32>(1);
        let mut after = before.clone();
        reinit_reset(&g, &mut after, &mask, 1, 2, ResetMode::Random).unwrap();
        for spec in g.param_specs() {
            let (a, b) = (before.get(&spec.key).unwrap(), after.get(&spec.key).unwrap());
            match mask.fit_indicator(&g, &spec).unwrap() {
                None => assert_eq!(a, b),
                Some(fit) => {
                    for i in 0..a.len() {
                        if fit.get(i) {
                            assert_eq!(a.data()[i].to_bits(), b.data()[i].to_bits());
                        } else {
                            assert_ne!(a.data()[i], b.data()[i]);
                            let bound = match spec.role {
                                crate::graph::ParamRole::Weight => kaiming_bound(spec.fan_in),
                                _ => 1.0 / (spec.fan_in as f64).sqrt(),
                            };
                            assert!((b.data()[i] as f64).abs() <= bound);
                        }
                    }
                }
            }
        }
        let mut zeroed = before.clone();
        reinit_reset(&g, &mut zeroed, &mask, 1, 2, ResetMode::Zeros).unwrap();
        assert_eq!(zeroed, crate::split::masked_dense(&g, &before, &mask).unwrap());
    }

    #[test]
    fn pk_batches_are_balanced() {
        let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let batches = pk_batches(&labels, 3, 4, &mut SeededRng::new(0, "pk"));
        assert!(!batches.is_empty());
        for b in &batches {
            let mut classes: Vec<usize> = b.iter().map(|&i| labels[i]).collect();
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(b.len(), classes.len() * 4);
        }
    }

    #[test]
    fn one_epoch_reduces_loss_on_separable_blobs() {
        let (train, _) = blobs(2, [2, 1, 1]);
        let g = build_architecture_with(
            Family::Mlp,
            2,
            [2, 1, 1],
            &ArchOptions {
                hidden: vec![8],
                ..ArchOptions::default()
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 0.05,
            loss: LossKind::Ce {},
            ..TrainConfig::default()
        };
        let mut params = g.init_params(0);
        let eval_loss = |p: &ParamStore<f32>| {
            let idx: Vec<usize> = (0..train.len()).collect();
            let logits = g.forward_eval(p, &train.batch(&idx)).unwrap();
            cross_entropy(&logits, train.labels(), 0.0).unwrap().0
        };
        let start = eval_loss(&params);
        train_generation(&g, &mut params, &train, &cfg, 1).unwrap();
        assert!(eval_loss(&params) < start);
    }

    #[test]
    fn zero_lr_only_moves_running_stats() {
        let (train, _) = blobs(3, [3, 8, 8]);
        let g = build_architecture(Family::ToyResnet, 3, [3, 8, 8]).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let before = g.init_params(0);
        let mut after = before.clone();
        train_generation(&g, &mut after, &train, &cfg, 1).unwrap();
        for (k, t) in before.iter() {
            let moved = t != after.get(k).unwrap();
            assert_eq!(moved, k.contains("running"), "{k}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (train, _) = blobs(3, [3, 8, 8]);
        let g = build_architecture(Family::ToyResnet, 3, [3, 8, 8]).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr: 0.05,
            augment: Augment {
                flip: true,
                crop_padding: 1,
            },
            ..TrainConfig::default()
        };
        let run = || {
            let mut p = g.init_params(4);
            let l = train_generation(&g, &mut p, &train, &cfg, 1).unwrap();
            (p, l)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn retrieval_needs_an_embedding_head() {
        let (_, eval) = blobs(3, [3, 8, 8]);
        let g = build_architecture(Family::ToyResnet, 3, [3, 8, 8]).unwrap();
        let p = g.init_params(0);
        assert!(matches!(
            evaluate_model(&g, &p, &eval, Task::Retrieval, None),
            Err(TrainError::Config(_))
        ));
        let r = evaluate_model(&g, &p, &eval, Task::Classification, None).unwrap();
        assert!(r.top1.is_some() && r.nmi.is_none());
    }
}
