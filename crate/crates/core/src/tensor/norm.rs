use super::{EngineError, Scalar, Tensor};

const OP: &str = "batchnorm";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub epsilon: f64,
    /// Weight of the current batch in the running-statistics moving average.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel statistics the backward pass needs.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Scalar> {
    pub train: bool,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

/// (batch, channels, spatial) view of a rank-2 `N x C` or rank-4 `N x C x H x W` tensor.
fn layout<T: Scalar>(input: &Tensor<T>, channels: usize) -> Result<(usize, usize, usize), EngineError> {
    let (n, c, s) = match input.rank() {
        2 => (input.dim(0), input.dim(1), 1),
        4 => (input.dim(0), input.dim(1), input.dim(2) * input.dim(3)),
        r => return Err(EngineError::dim(OP, "rank", 4, r)),
    };
    if c != channels {
        return Err(EngineError::dim(OP, "channels", channels, c));
    }
    Ok((n, c, s))
}

fn check_param<T: Scalar>(t: &Tensor<T>, name: &'static str, c: usize) -> Result<(), EngineError> {
    if t.len() != c {
        return Err(EngineError::dim(OP, name, c, t.len()));
    }
    Ok(())
}

fn normalize<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    (n, c, s): (usize, usize, usize),
) -> Tensor<T> {
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], scale.data()[ch], shift.data()[ch]);
            for i in base..base + s {
                out[i] = (x[i] - m) * is * g + bt;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out).expect("same shape")
}

/// Normalizes with batch statistics and folds them into the running averages.
///
/// The running variance tracks the unbiased batch variance.
pub fn batchnorm_train<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
    cfg: BatchNormConfig,
) -> Result<(Tensor<T>, BatchNormCache<T>), EngineError> {
    let c = scale.len();
    let dims = layout(input, c)?;
    check_param(shift, "shift", c)?;
    let (n, _, s) = dims;
    let count = (n * s) as f64;
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * s..][..s] {
                acc += v;
            }
        }
        let m = acc / T::of(count);
        let mut sq = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * s..][..s] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = sq / T::of(count);
    }
    let eps = T::of(cfg.epsilon);
    let mut inv_std = Vec::with_capacity(c);
    for &v in &var {
        if v + eps <= T::zero() {
            return Err(EngineError::NonPositiveVariance { op: OP });
        }
        inv_std.push(T::one() / (v + eps).sqrt());
    }
    if let Some((rm, rv)) = running {
        check_param(rm, "running mean", c)?;
        check_param(rv, "running variance", c)?;
        let mom = T::of(cfg.momentum);
        let unbias = if count > 1.0 {
            T::of(count / (count - 1.0))
        } else {
            T::one()
        };
        for ch in 0..c {
            let m = &mut rm.data_mut()[ch];
            *m = (T::one() - mom) * *m + mom * mean[ch];
            let v = &mut rv.data_mut()[ch];
            *v = (T::one() - mom) * *v + mom * var[ch] * unbias;
        }
    }
    let out = normalize(input, scale, shift, &mean, &inv_std, dims);
    Ok((
        out,
        BatchNormCache {
            train: true,
            mean,
            inv_std,
        },
    ))
}

/// Normalizes with the running statistics; each sample is treated independently.
pub fn batchnorm_eval<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    epsilon: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>), EngineError> {
    let c = scale.len();
    let dims = layout(input, c)?;
    check_param(shift, "shift", c)?;
    check_param(running_mean, "running mean", c)?;
    check_param(running_var, "running variance", c)?;
    let eps = T::of(epsilon);
    let mut inv_std = Vec::with_capacity(c);
    for &v in running_var.data() {
        if v + eps <= T::zero() {
            return Err(EngineError::NonPositiveVariance { op: OP });
        }
        inv_std.push(T::one() / (v + eps).sqrt());
    }
    let mean = running_mean.data().to_vec();
    let out = normalize(input, scale, shift, &mean, &inv_std, dims);
    Ok((
        out,
        BatchNormCache {
            train: false,
            mean,
            inv_std,
        },
    ))
}

pub fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>, EngineError> {
    let c = scale.len();
    let (n, _, s) = layout(input, c)?;
    if grad_out.shape() != input.shape() {
        return Err(EngineError::dim(OP, "upstream gradient", input.len(), grad_out.len()));
    }
    let x = input.data();
    let gy = grad_out.data();
    let count = T::of((n * s) as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for ch in 0..c {
        let (m, is, g) = (cache.mean[ch], cache.inv_std[ch], scale.data()[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                sum_dy += gy[i];
                sum_dy_xhat += gy[i] * (x[i] - m) * is;
            }
        }
        gscale[ch] = sum_dy_xhat;
        gshift[ch] = sum_dy;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                gx[i] = if cache.train {
                    let xhat = (x[i] - m) * is;
                    g * is / count * (count * gy[i] - sum_dy - xhat * sum_dy_xhat)
                } else {
                    gy[i] * g * is
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        scale: Tensor::new(vec![c], gscale)?,
        shift: Tensor::new(vec![c], gshift)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64 - 7.0);
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let (y, _) = batchnorm_eval(&x, &ones, &zeros, &zeros, &ones, 0.0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn constant_input_maps_to_shift() {
        let x = Tensor::<f32>::full(&[4, 2, 3, 3], 5.0);
        let scale = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        let shift = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let (y, _) = batchnorm_train(&x, &scale, &shift, None, BatchNormConfig::default()).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let ch = (i / 9) % 2;
            assert_eq!(v, [0.5, -1.0][ch]);
        }
    }

    #[test]
    fn running_stats_follow_moving_average() {
        let x = Tensor::<f64>::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let ones = Tensor::full(&[1], 1.0);
        let zeros = Tensor::zeros(&[1]);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        batchnorm_train(&x, &ones, &zeros, Some((&mut rm, &mut rv)), BatchNormConfig::default()).unwrap();
        // mean 2, unbiased variance 2
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);
        assert!((rv.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        let p = Tensor::<f32>::zeros(&[3]);
        assert!(matches!(
            batchnorm_eval(&x, &p, &p, &p, &p, 1e-5),
            Err(EngineError::Dimension { .. })
        ));
    }
}
