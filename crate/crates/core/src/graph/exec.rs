use std::collections::BTreeMap;

use super::params::ParamRole;
use super::{GraphError, LayerKind, NetworkGraph, ParamStore};
use crate::tensor::{
    add_backward, add_forward, batchnorm_backward, batchnorm_eval, batchnorm_train, concat_backward, concat_forward,
    conv2d_backward, conv2d_forward, gap_backward, gap_forward, linear_backward, linear_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, BatchNormCache, MaxPoolCache, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Cache<T: Scalar> {
    None,
    BatchNorm(BatchNormCache<T>),
    MaxPool(MaxPoolCache),
}

/// Every node's output plus whatever the backward pass needs.
#[derive(Clone, Debug)]
pub struct Trace<T: Scalar> {
    outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
    output: usize,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.outputs[self.output]
    }

    pub fn node_output(&self, idx: usize) -> &Tensor<T> {
        &self.outputs[idx]
    }
}

/// Parameter gradients keyed like [`ParamStore`], plus the input gradient.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub input: Option<Tensor<T>>,
}

type RunningUpdate<T> = (String, Tensor<T>, Tensor<T>);

impl NetworkGraph {
    fn check_input<T: Scalar>(&self, input: &Tensor<T>) -> Result<(), GraphError> {
        let expected = self.input_shape().dims();
        if input.rank() < 2 || input.shape()[1..] != expected[..] {
            return Err(GraphError::InputShape {
                expected,
                actual: input.shape().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        Ok(())
    }

    fn execute<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Trace<T>, Vec<RunningUpdate<T>>), GraphError> {
        self.check_input(input)?;
        let bn = self.batchnorm_config();
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes().len());
        let mut caches = Vec::with_capacity(self.nodes().len());
        let mut updates = Vec::new();
        for (i, node) in self.nodes().iter().enumerate() {
            let preds = self.predecessors(i);
            let arg = |k: usize| &outputs[preds[k]];
            let key = |role: ParamRole| role.key(&node.name);
            let (out, cache) = match &node.kind {
                LayerKind::Input { .. } => (input.clone(), Cache::None),
                LayerKind::Conv {
                    stride, padding, bias, ..
                } => {
                    let w = params.require(&key(ParamRole::Weight))?;
                    let b = if *bias {
                        Some(params.require(&key(ParamRole::Bias))?)
                    } else {
                        None
                    };
                    (conv2d_forward(arg(0), w, b, *stride, *padding)?, Cache::None)
                }
                LayerKind::BatchNorm { .. } => {
                    let scale = params.require(&key(ParamRole::Scale))?;
                    let shift = params.require(&key(ParamRole::Shift))?;
                    let rm = params.require(&key(ParamRole::RunningMean))?;
                    let rv = params.require(&key(ParamRole::RunningVar))?;
                    let (y, c) = match mode {
                        Mode::Train => {
                            let (mut rm, mut rv) = (rm.clone(), rv.clone());
                            let r = batchnorm_train(arg(0), scale, shift, Some((&mut rm, &mut rv)), bn)?;
                            updates.push((node.name.clone(), rm, rv));
                            r
                        }
                        Mode::Eval => batchnorm_eval(arg(0), scale, shift, rm, rv, bn.epsilon)?,
                    };
                    (y, Cache::BatchNorm(c))
                }
                LayerKind::Linear { bias, .. } => {
                    let w = params.require(&key(ParamRole::Weight))?;
                    let b = if *bias {
                        Some(params.require(&key(ParamRole::Bias))?)
                    } else {
                        None
                    };
                    (linear_forward(arg(0), w, b)?, Cache::None)
                }
                LayerKind::Relu => (relu_forward(arg(0)), Cache::None),
                LayerKind::Gap => (gap_forward(arg(0))?, Cache::None),
                LayerKind::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => {
                    let (y, c) = maxpool_forward(arg(0), *kernel, *stride, *padding)?;
                    (y, Cache::MaxPool(c))
                }
                LayerKind::Add => {
                    let ops: Vec<&Tensor<T>> = preds.iter().map(|&p| &outputs[p]).collect();
                    (add_forward(&ops)?, Cache::None)
                }
                LayerKind::Concat => {
                    let ops: Vec<&Tensor<T>> = preds.iter().map(|&p| &outputs[p]).collect();
                    (concat_forward(&ops)?, Cache::None)
                }
            };
            outputs.push(out);
            caches.push(cache);
        }
        Ok((
            Trace {
                outputs,
                caches,
                output: self.output_index(),
            },
            updates,
        ))
    }

    /// Forward pass; in [`Mode::Train`] batch-norm running statistics are updated in place.
    pub fn forward<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>, GraphError> {
        let trace = self.forward_trace(params, input, mode)?;
        Ok(trace.outputs.into_iter().nth(trace.output).expect("output node"))
    }

    /// Inference with running statistics; a pure function of `(params, input)`.
    pub fn forward_eval<T: Scalar>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
        let (trace, _) = self.execute(params, input, Mode::Eval)?;
        Ok(trace.outputs.into_iter().nth(trace.output).expect("output node"))
    }

    pub fn forward_trace<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<Trace<T>, GraphError> {
        let (trace, updates) = self.execute(params, input, mode)?;
        for (node, rm, rv) in updates {
            *params.require_mut(&ParamRole::RunningMean.key(&node))? = rm;
            *params.require_mut(&ParamRole::RunningVar.key(&node))? = rv;
        }
        Ok(trace)
    }

    /// Reverse pass over a trace given the gradient of the loss w.r.t. the output.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        trace: &Trace<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Gradients<T>, GraphError> {
        let n = self.nodes().len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[self.output_index()] = Some(grad_output.clone());
        let mut out = Gradients {
            params: BTreeMap::new(),
            input: None,
        };
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes()[i];
            let preds = self.predecessors(i);
            let arg = |k: usize| trace.node_output(preds[k]);
            let key = |role: ParamRole| role.key(&node.name);
            let mut upstream: Vec<Tensor<T>> = Vec::new();
            match &node.kind {
                LayerKind::Input { .. } => {
                    out.input = Some(g);
                    continue;
                }
                LayerKind::Conv {
                    stride, padding, bias, ..
                } => {
                    let w = params.require(&key(ParamRole::Weight))?;
                    let r = conv2d_backward(arg(0), w, *bias, *stride, *padding, &g)?;
                    out.params.insert(key(ParamRole::Weight), r.filter);
                    if let Some(b) = r.bias {
                        out.params.insert(key(ParamRole::Bias), b);
                    }
                    upstream.push(r.input);
                }
                LayerKind::BatchNorm { .. } => {
                    let Cache::BatchNorm(cache) = &trace.caches[i] else {
                        unreachable!("batch norm node without cache")
                    };
                    let scale = params.require(&key(ParamRole::Scale))?;
                    let r = batchnorm_backward(arg(0), scale, cache, &g)?;
                    out.params.insert(key(ParamRole::Scale), r.scale);
                    out.params.insert(key(ParamRole::Shift), r.shift);
                    upstream.push(r.input);
                }
                LayerKind::Linear { bias, .. } => {
                    let w = params.require(&key(ParamRole::Weight))?;
                    let r = linear_backward(arg(0), w, *bias, &g)?;
                    out.params.insert(key(ParamRole::Weight), r.weight);
                    if let Some(b) = r.bias {
                        out.params.insert(key(ParamRole::Bias), b);
                    }
                    upstream.push(r.input);
                }
                LayerKind::Relu => upstream.push(relu_backward(arg(0), &g)?),
                LayerKind::Gap => upstream.push(gap_backward(arg(0).shape(), &g)?),
                LayerKind::MaxPool { .. } => {
                    let Cache::MaxPool(cache) = &trace.caches[i] else {
                        unreachable!("max pool node without cache")
                    };
                    upstream.push(maxpool_backward(arg(0).shape(), cache, &g)?);
                }
                LayerKind::Add => upstream = add_backward(preds.len(), &g),
                LayerKind::Concat => {
                    let shapes: Vec<Vec<usize>> =
                        preds.iter().map(|&p| trace.node_output(p).shape().to_vec()).collect();
                    upstream = concat_backward(&shapes, &g)?;
                }
            }
            for (&p, gp) in preds.iter().zip(upstream) {
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gp.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(gp),
                }
            }
        }
        Ok(out)
    }
}
