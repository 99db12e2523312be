use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::graph::{NetworkGraph, ParamStore};
use crate::metrics::{h2d_metrics, hypothesis_mean_abs, HypothesisStat};
use crate::split::{compute_sparsity, extract_slim, kels_split, wels_split, Bitset, SplitMask, Technique};
use crate::tensor::SeededRng;

use super::generation::{evaluate_model, reinit_reset, train_generation, MetricRecord};
use super::{MaskPolicy, TrainConfig, TrainError};

/// One generation's record, written after training and before re-initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    pub epoch_losses: Vec<f64>,
    pub dense: MetricRecord,
    /// Present for KELS masks only.
    pub slim: Option<MetricRecord>,
    pub sparsity: f64,
    pub hypothesis: Vec<LayerHypothesis>,
    /// Present from the second generation of a resampled-mask run.
    pub s_h2d: Option<f64>,
    pub c_h2d: Option<f64>,
    pub wall_seconds: f64,
}

/// Serializable form of [`HypothesisStat`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHypothesis {
    pub node: String,
    pub mean_abs_fit: f64,
    pub mean_abs_reset: Option<f64>,
}

impl From<HypothesisStat> for LayerHypothesis {
    fn from(s: HypothesisStat) -> Self {
        Self {
            node: s.node,
            mean_abs_fit: s.fit,
            mean_abs_reset: s.reset,
        }
    }
}

impl GenerationLog {
    /// The same record with the wall-clock field cleared, for replay comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Mask in force during `generation`. KELS masks and fixed WELS masks do not
/// depend on the generation.
pub fn mask_for_generation(
    graph: &NetworkGraph,
    cfg: &TrainConfig,
    generation: usize,
) -> Result<SplitMask, TrainError> {
    Ok(match cfg.technique {
        Technique::Kels => kels_split(graph, cfg.split_rate)?,
        Technique::Wels => {
            let g = match cfg.mask_policy {
                MaskPolicy::Fixed => 1,
                MaskPolicy::Resample => generation,
            };
            wels_split(
                graph,
                cfg.split_rate,
                &mut SeededRng::new(cfg.seed, format!("wels-mask/generation-{g}")),
            )?
        }
    })
}

/// Resumable state: the parameters after training generation `completed`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeState {
    pub completed: usize,
    pub params: ParamStore<f32>,
    pub mask: SplitMask,
}

/// Parameters on both sides of a re-initialization.
pub struct ReinitEvent<'a> {
    /// Generation about to start.
    pub generation: usize,
    pub before: &'a ParamStore<f32>,
    pub after: &'a ParamStore<f32>,
    pub mask: &'a SplitMask,
}

/// Generation-by-generation driver.
pub struct KeRun<'a> {
    graph: &'a NetworkGraph,
    cfg: TrainConfig,
    train: &'a Dataset,
    eval: &'a Dataset,
    state: KeState,
    history: Vec<Bitset>,
}

impl<'a> KeRun<'a> {
    pub fn new(
        graph: &'a NetworkGraph,
        cfg: &TrainConfig,
        train: &'a Dataset,
        eval: &'a Dataset,
    ) -> Result<Self, TrainError> {
        let state = KeState {
            completed: 0,
            params: graph.init_params(cfg.seed),
            mask: mask_for_generation(graph, cfg, 1)?,
        };
        Self::resume(graph, cfg, train, eval, state)
    }

    /// Continues from a state produced by a run with the same configuration.
    pub fn resume(
        graph: &'a NetworkGraph,
        cfg: &TrainConfig,
        train: &'a Dataset,
        eval: &'a Dataset,
        state: KeState,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        cfg.check_graph(graph, train.classes())?;
        graph.check_params(&state.params)?;
        state.mask.validate(graph)?;
        if state.completed > cfg.generations {
            return Err(TrainError::Config(format!(
                "state has {} completed generations but the run has only {}",
                state.completed, cfg.generations
            )));
        }
        let mut history = Vec::new();
        if cfg.mask_policy == MaskPolicy::Resample {
            for g in 1..=state.completed.max(1) {
                history.push(mask_for_generation(graph, cfg, g)?.flatten(graph)?);
            }
        }
        Ok(Self {
            graph,
            cfg: cfg.clone(),
            train,
            eval,
            state,
            history,
        })
    }

    pub fn state(&self) -> &KeState {
        &self.state
    }

    pub fn into_state(self) -> KeState {
        self.state
    }

    pub fn finished(&self) -> bool {
        self.state.completed >= self.cfg.generations
    }

    pub fn next_generation(&mut self) -> Result<GenerationLog, TrainError> {
        self.next_generation_observed(|_| {})
    }

    /// Re-initializes (from the second generation on), trains, and evaluates one generation.
    pub fn next_generation_observed(
        &mut self,
        mut observe: impl FnMut(&ReinitEvent),
    ) -> Result<GenerationLog, TrainError> {
        if self.finished() {
            return Err(TrainError::Config(format!(
                "all {} generations are complete",
                self.cfg.generations
            )));
        }
        let started = Instant::now();
        let g = self.state.completed + 1;
        let (graph, cfg) = (self.graph, &self.cfg);
        if g > 1 {
            let mask = mask_for_generation(graph, cfg, g)?;
            if cfg.mask_policy == MaskPolicy::Resample {
                self.history.push(mask.flatten(graph)?);
            }
            let before = self.state.params.clone();
            reinit_reset(graph, &mut self.state.params, &mask, cfg.seed, g, cfg.reset_mode)?;
            observe(&ReinitEvent {
                generation: g,
                before: &before,
                after: &self.state.params,
                mask: &mask,
            });
            self.state.mask = mask;
        }
        let epoch_losses = train_generation(graph, &mut self.state.params, self.train, cfg, g)?;
        let task = cfg.loss.task();
        let dense = evaluate_model(graph, &self.state.params, self.eval, task, cfg.nmi_clusters)?;
        let slim = match self.state.mask.technique {
            Technique::Kels => {
                let net = extract_slim(graph, &self.state.params, &self.state.mask)?;
                Some(evaluate_model(
                    &net.graph,
                    &net.params,
                    self.eval,
                    task,
                    cfg.nmi_clusters,
                )?)
            }
            Technique::Wels => None,
        };
        let sparsity = compute_sparsity(&self.state.mask, graph)?.sparsity();
        let hypothesis = hypothesis_mean_abs(graph, &self.state.params, &self.state.mask)?
            .into_iter()
            .map(LayerHypothesis::from)
            .collect();
        let (s_h2d, c_h2d) = if self.history.len() >= 2 {
            let (s, c) = h2d_metrics(&self.history)?;
            (s.last().copied(), c.last().copied())
        } else {
            (None, None)
        };
        self.state.completed = g;
        Ok(GenerationLog {
            generation: g,
            epoch_losses,
            dense,
            slim,
            sparsity,
            hypothesis,
            s_h2d,
            c_h2d,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct KeOutcome {
    pub logs: Vec<GenerationLog>,
    pub state: KeState,
}

/// Runs every generation from random initialization.
pub fn run_knowledge_evolution(
    graph: &NetworkGraph,
    cfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
) -> Result<KeOutcome, TrainError> {
    let mut run = KeRun::new(graph, cfg, train, eval)?;
    let mut logs = Vec::with_capacity(cfg.generations);
    while !run.finished() {
        logs.push(run.next_generation()?);
    }
    Ok(KeOutcome {
        logs,
        state: run.into_state(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobsConfig};
    use crate::graph::{build_architecture, Family};
    use crate::train::{train_generation, ResetMode};

    fn setup() -> (NetworkGraph, Dataset, Dataset) {
        let (train, eval) = synthetic_blobs(&BlobsConfig {
            classes: 3,
            train_per_class: 12,
            eval_per_class: 6,
            shape: [3, 8, 8],
            noise: 0.5,
            grid: 2,
            seed: 1,
        })
        .unwrap();
        (
            build_architecture(Family::ToyResnet, 3, [3, 8, 8]).unwrap(),
            train,
            eval,
        )
    }

    fn cfg(generations: usize) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 12,
            lr: 0.05,
            generations,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_generation_is_plain_training() {
        let (g, train, eval) = setup();
        let out = run_knowledge_evolution(&g, &cfg(1), &train, &eval).unwrap();
        let mut p = g.init_params(0);
        let losses = train_generation(&g, &mut p, &train, &cfg(1), 1).unwrap();
        assert_eq!(out.logs.len(), 1);
        assert_eq!(out.logs[0].epoch_losses, losses);
        assert_eq!(out.state.params, p);
        assert!(out.logs[0].slim.is_some());
    }

    #[test]
    fn fixed_kels_mask_never_changes() {
        let (g, train, eval) = setup();
        let mut run = KeRun::new(&g, &cfg(3), &train, &eval).unwrap();
        let first = run.state().mask.to_text();
        let mut seen = Vec::new();
        while !run.finished() {
            run.next_generation_observed(|e| seen.push(e.mask.to_text())).unwrap();
        }
        assert_eq!(seen.len(), 2);
        assert!(seen.iter().all(|m| *m == first));
        assert_eq!(run.state().mask.to_text(), first);
    }

    #[test]
    fn wels_rand_reports_h2d() {
        let (g, train, eval) = setup();
        let c = TrainConfig {
            technique: Technique::Wels,
            mask_policy: MaskPolicy::Resample,
            reset_mode: ResetMode::Zeros,
            ..cfg(3)
        };
        let out = run_knowledge_evolution(&g, &c, &train, &eval).unwrap();
        assert_eq!(out.logs[0].s_h2d, None);
        assert!(out.logs[1].slim.is_none());
        let (s2, c2) = (out.logs[1].s_h2d.unwrap(), out.logs[1].c_h2d.unwrap());
        assert_eq!(s2, c2);
        // independent masks at s_r = 0.5 disagree on about half the weights
        assert!((s2 - 0.5).abs() < 0.05, "{s2}");
    }
}
