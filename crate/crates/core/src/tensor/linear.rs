use super::{axpy, dot, EngineError, Scalar, Tensor};

const OP: &str = "linear";

/// Treats any input of rank >= 2 as `N x (product of the remaining axes)`.
fn rows<T: Scalar>(input: &Tensor<T>, ci: usize) -> Result<usize, EngineError> {
    if input.rank() < 2 {
        return Err(EngineError::dim(OP, "rank", 2, input.rank()));
    }
    let n = input.dim(0);
    let features = input.len() / n;
    if features != ci {
        return Err(EngineError::dim(OP, "input features", ci, features));
    }
    Ok(n)
}

/// `input . weight^T + bias` for a `Co x Ci` weight.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>, EngineError> {
    if weight.rank() != 2 {
        return Err(EngineError::dim(OP, "weight rank", 2, weight.rank()));
    }
    let (co, ci) = (weight.dim(0), weight.dim(1));
    let n = rows(input, ci)?;
    if let Some(b) = bias {
        if b.len() != co {
            return Err(EngineError::dim(OP, "bias", co, b.len()));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut out = vec![T::zero(); n * co];
    for r in 0..n {
        let xr = &x[r * ci..][..ci];
        for o in 0..co {
            out[r * co + o] = dot(xr, &w[o * ci..][..ci]) + bias.map_or(T::zero(), |b| b.data()[o]);
        }
    }
    Tensor::new(vec![n, co], out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>, EngineError> {
    let (co, ci) = (weight.dim(0), weight.dim(1));
    let n = rows(input, ci)?;
    if grad_out.shape() != [n, co] {
        return Err(EngineError::dim(OP, "upstream gradient", n * co, grad_out.len()));
    }
    let x = input.data();
    let w = weight.data();
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); n * ci];
    let mut gw = vec![T::zero(); co * ci];
    for r in 0..n {
        for o in 0..co {
            let d = gy[r * co + o];
            axpy(d, &w[o * ci..][..ci], &mut gx[r * ci..][..ci]);
        }
    }
    for o in 0..co {
        let row = &mut gw[o * ci..][..ci];
        for r in 0..n {
            axpy(gy[r * co + o], &x[r * ci..][..ci], row);
        }
    }
    let bias = has_bias.then(|| {
        let gb = (0..co).map(|o| (0..n).map(|r| gy[r * co + o]).sum()).collect();
        Tensor::new(vec![co], gb).expect("bias shape")
    });
    Ok(LinearGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weight: Tensor::new(vec![co, ci], gw)?,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_input() {
        let x = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64 * 0.25 - 1.0);
        let w = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[4]);
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weight_broadcasts_bias() {
        let x = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn accepts_unit_spatial_input() {
        let x = Tensor::<f32>::full(&[2, 3, 1, 1], 1.0);
        let w = Tensor::full(&[1, 3], 1.0);
        let y = linear_forward(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 3.0]);
    }

    #[test]
    fn feature_mismatch_errors() {
        let x = Tensor::<f32>::zeros(&[2, 5]);
        let w = Tensor::zeros(&[2, 4]);
        assert!(linear_forward(&x, &w, None).is_err());
    }
}
