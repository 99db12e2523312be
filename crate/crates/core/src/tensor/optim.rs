use std::collections::BTreeMap;

use super::{EngineError, Scalar, Tensor};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v <- mu * v + (g + wd * w)`, `w <- w - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&[T]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    pub fn reset(&mut self) {
        self.buffers.clear();
    }

    /// Updates one named parameter. Momentum buffers start at zero.
    pub fn step(&mut self, name: &str, param: &mut Tensor<T>, grad: &[T], lr: f64) -> Result<(), EngineError> {
        if grad.len() != param.len() {
            return Err(EngineError::dim("sgd", name.to_string(), param.len(), grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(EngineError::NonFiniteGradient {
                layer: name.to_string(),
            });
        }
        let buf = self
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); grad.len()]);
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for ((w, v), &g) in param.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad) {
            *v = mu * *v + (g + wd * *w);
            *w -= lr * *v;
        }
        Ok(())
    }
}

/// Half-cosine decay from `lr0` at epoch 0 towards zero at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = OptimizerState::<f64>::new(0.9, 0.0);
        let mut w = Tensor::from_fn(&[5], |i| i as f64);
        let before = w.clone();
        opt.step("w", &mut w, &[0.0; 5], 0.1).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn two_momentum_steps() {
        let mut opt = OptimizerState::<f64>::new(0.9, 0.0);
        let mut w = scalar(1.0);
        opt.step("w", &mut w, &[1.0], 0.1).unwrap();
        opt.step("w", &mut w, &[1.0], 0.1).unwrap();
        // 1 - 0.1 * 1 - 0.1 * 1.9
        assert!((w.data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_only() {
        let mut opt = OptimizerState::<f64>::new(0.9, 1e-4);
        let mut w = scalar(1.0);
        opt.step("w", &mut w, &[0.0], 1.0).unwrap();
        assert!((w.data()[0] - (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut opt = OptimizerState::<f32>::new(0.9, 0.0);
        let mut w = Tensor::<f32>::zeros(&[2]);
        let err = opt.step("fc.weight", &mut w, &[0.0, f32::NAN], 0.1).unwrap_err();
        assert_eq!(
            err,
            EngineError::NonFiniteGradient {
                layer: "fc.weight".into()
            }
        );
    }

    #[test]
    fn cosine_schedule_values() {
        assert_eq!(cosine_lr(0, 200, 0.256), 0.256);
        assert!((cosine_lr(100, 200, 0.256) - 0.128).abs() < 1e-12);
        assert!(cosine_lr(200, 200, 0.256).abs() < 1e-12);
        assert!(cosine_lr(199, 200, 0.256) > 0.0);
    }
}
