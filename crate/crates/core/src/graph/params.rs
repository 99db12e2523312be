use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GraphError, LayerKind, NetworkGraph};
use crate::tensor::{kaiming_uniform_init, uniform_init, Scalar, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Scale => "scale",
            ParamRole::Shift => "shift",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    /// Updated by the optimizer (running statistics are not).
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    pub fn key(self, node: &str) -> String {
        format!("{node}.{}", self.suffix())
    }
}

/// One parameter tensor a graph requires.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub key: String,
    pub node: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    /// Fan-in of the owning layer; zero for batch-norm tensors.
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named parameter tensors, keyed `"<node>.<role>"`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(key.into(), t)
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<T>> {
        self.tensors.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(key)
    }

    pub fn require(&self, key: &str) -> Result<&Tensor<T>, GraphError> {
        self.tensors
            .get(key)
            .ok_or_else(|| GraphError::MissingParam(key.to_string()))
    }

    pub fn require_mut(&mut self, key: &str) -> Result<&mut Tensor<T>, GraphError> {
        self.tensors
            .get_mut(key)
            .ok_or_else(|| GraphError::MissingParam(key.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Raw little-endian bytes of every tensor in key order.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, t) in &self.tensors {
            out.extend_from_slice(k.as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }
}

impl NetworkGraph {
    /// Every parameter tensor the graph needs, in topological node order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for node in self.nodes() {
            let mut push = |role: ParamRole, shape: Vec<usize>, fan_in: usize| {
                specs.push(ParamSpec {
                    key: role.key(&node.name),
                    node: node.name.clone(),
                    role,
                    shape,
                    fan_in,
                })
            };
            match &node.kind {
                LayerKind::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let fan_in = kernel * kernel * in_channels;
                    push(
                        ParamRole::Weight,
                        vec![*out_channels, *kernel, *kernel, *in_channels],
                        fan_in,
                    );
                    if *bias {
                        push(ParamRole::Bias, vec![*out_channels], fan_in);
                    }
                }
                LayerKind::Linear {
                    out_features,
                    in_features,
                    bias,
                } => {
                    push(ParamRole::Weight, vec![*out_features, *in_features], *in_features);
                    if *bias {
                        push(ParamRole::Bias, vec![*out_features], *in_features);
                    }
                }
                LayerKind::BatchNorm { channels } => {
                    for role in [
                        ParamRole::Scale,
                        ParamRole::Shift,
                        ParamRole::RunningMean,
                        ParamRole::RunningVar,
                    ] {
                        push(role, vec![*channels], 0);
                    }
                }
                _ => {}
            }
        }
        specs
    }

    pub fn param_spec(&self, key: &str) -> Option<ParamSpec> {
        self.param_specs().into_iter().find(|s| s.key == key)
    }

    /// Fresh parameters: kaiming-uniform weights, uniform `+-1/sqrt(fan_in)`
    /// biases, unit batch-norm scale and variance, zero shift and mean.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for spec in self.param_specs() {
            let t = fresh_tensor(&spec, seed, 1);
            store.insert(spec.key, t);
        }
        store
    }

    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<(), GraphError> {
        for spec in self.param_specs() {
            let t = params.require(&spec.key)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(GraphError::ParamShape {
                    key: spec.key,
                    expected: spec.shape,
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Random-stream id for a parameter at a given generation.
pub fn stream_id(key: &str, generation: usize) -> String {
    format!("{key}/generation-{generation}")
}

/// Draws the initial-distribution tensor for `spec` from its own stream.
pub(crate) fn fresh_tensor<T: Scalar>(spec: &ParamSpec, seed: u64, generation: usize) -> Tensor<T> {
    let mut rng = SeededRng::new(seed, stream_id(&spec.key, generation));
    match spec.role {
        ParamRole::Weight => kaiming_uniform_init(&spec.shape, spec.fan_in, &mut rng),
        ParamRole::Bias => uniform_init(&spec.shape, 1.0 / (spec.fan_in as f64).sqrt(), &mut rng),
        ParamRole::Scale | ParamRole::RunningVar => Tensor::full(&spec.shape, T::one()),
        ParamRole::Shift | ParamRole::RunningMean => Tensor::zeros(&spec.shape),
    }
}
