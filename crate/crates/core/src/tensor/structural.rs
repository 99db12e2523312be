//! Parameter-free layers: relu, global average pooling, add, concat, max pooling.

use super::conv::conv_output_dim;
use super::{EngineError, Scalar, Tensor};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Routes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
    if input.shape() != grad_out.shape() {
        return Err(EngineError::dim(
            "relu",
            "upstream gradient",
            input.len(),
            grad_out.len(),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// `N x C x H x W -> N x C` spatial mean.
pub fn gap_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
    let [n, c, h, w] = input.nchw("gap")?;
    let s = h * w;
    let inv = T::of(1.0 / s as f64);
    let data = input
        .data()
        .chunks_exact(s)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn gap_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
    if input_shape.len() != 4 {
        return Err(EngineError::dim("gap", "rank", 4, input_shape.len()));
    }
    let (n, c, s) = (input_shape[0], input_shape[1], input_shape[2] * input_shape[3]);
    if grad_out.len() != n * c {
        return Err(EngineError::dim("gap", "upstream gradient", n * c, grad_out.len()));
    }
    let inv = T::of(1.0 / s as f64);
    let mut data = Vec::with_capacity(n * c * s);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, s));
    }
    Tensor::new(input_shape.to_vec(), data)
}

/// Elementwise sum of two or more same-shape tensors.
pub fn add_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>, EngineError> {
    if inputs.len() < 2 {
        return Err(EngineError::dim("add", "operand count", 2, inputs.len()));
    }
    let first = inputs[0];
    let mut data = first.data().to_vec();
    for (i, t) in inputs.iter().enumerate().skip(1) {
        if t.shape() != first.shape() {
            return Err(EngineError::dim(
                "add",
                format!("operand {i} length"),
                first.len(),
                t.len(),
            ));
        }
        for (d, &v) in data.iter_mut().zip(t.data()) {
            *d += v;
        }
    }
    Tensor::new(first.shape().to_vec(), data)
}

/// Every operand receives the upstream gradient unchanged.
pub fn add_backward<T: Scalar>(operands: usize, grad_out: &Tensor<T>) -> Vec<Tensor<T>> {
    vec![grad_out.clone(); operands]
}

fn concat_layout<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<(usize, usize), EngineError> {
    if inputs.len() < 2 {
        return Err(EngineError::dim("concat", "operand count", 2, inputs.len()));
    }
    let first = inputs[0];
    if first.rank() < 2 {
        return Err(EngineError::dim("concat", "rank", 2, first.rank()));
    }
    let n = first.dim(0);
    let inner: usize = first.shape()[2..].iter().product();
    for (i, t) in inputs.iter().enumerate().skip(1) {
        if t.rank() != first.rank() {
            return Err(EngineError::dim(
                "concat",
                format!("operand {i} rank"),
                first.rank(),
                t.rank(),
            ));
        }
        for axis in (0..t.rank()).filter(|&a| a != 1) {
            if t.dim(axis) != first.dim(axis) {
                return Err(EngineError::dim(
                    "concat",
                    format!("operand {i} axis {axis}"),
                    first.dim(axis),
                    t.dim(axis),
                ));
            }
        }
    }
    Ok((n, inner))
}

/// Stacks operands along the channel axis in argument order.
pub fn concat_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>, EngineError> {
    let (n, inner) = concat_layout(inputs)?;
    let total_c: usize = inputs.iter().map(|t| t.dim(1)).sum();
    let mut data = Vec::with_capacity(n * total_c * inner);
    for b in 0..n {
        for t in inputs {
            let block = t.dim(1) * inner;
            data.extend_from_slice(&t.data()[b * block..][..block]);
        }
    }
    let mut shape = inputs[0].shape().to_vec();
    shape[1] = total_c;
    Tensor::new(shape, data)
}

/// Slices the upstream gradient back into per-operand channel blocks.
pub fn concat_backward<T: Scalar>(
    input_shapes: &[Vec<usize>],
    grad_out: &Tensor<T>,
) -> Result<Vec<Tensor<T>>, EngineError> {
    let n = grad_out.dim(0);
    let inner: usize = grad_out.shape()[2..].iter().product();
    let total_c: usize = input_shapes.iter().map(|s| s[1]).sum();
    if total_c != grad_out.dim(1) {
        return Err(EngineError::dim("concat", "channels", total_c, grad_out.dim(1)));
    }
    let mut out: Vec<Vec<T>> = input_shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let g = grad_out.data();
    let mut pos = 0;
    for _ in 0..n {
        for (i, s) in input_shapes.iter().enumerate() {
            let block = s[1] * inner;
            out[i].extend_from_slice(&g[pos..pos + block]);
            pos += block;
        }
    }
    out.into_iter()
        .zip(input_shapes)
        .map(|(d, s)| Tensor::new(s.clone(), d))
        .collect()
}

/// Argmax positions (flat input index per output element) for the backward pass.
#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    pub argmax: Vec<usize>,
}

/// Square-window max pooling; padded positions never win. Ties keep the first
/// position in row-major window order.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, MaxPoolCache), EngineError> {
    let [n, c, h, w] = input.nchw("maxpool")?;
    if padding * 2 > kernel {
        return Err(EngineError::InvalidArgument {
            op: "maxpool",
            msg: "padding must not exceed half the window".into(),
        });
    }
    let ho =
        conv_output_dim(h, kernel, stride, padding).ok_or_else(|| EngineError::dim("maxpool", "height", kernel, h))?;
    let wo =
        conv_output_dim(w, kernel, stride, padding).ok_or_else(|| EngineError::dim("maxpool", "width", kernel, w))?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<(usize, T)> = None;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best.is_none_or(|(_, v)| x[idx] > v) {
                            best = Some((idx, x[idx]));
                        }
                    }
                }
                let (idx, v) = best.expect("window overlaps input");
                out.push(v);
                argmax.push(idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, MaxPoolCache { argmax }))
}

pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    cache: &MaxPoolCache,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, EngineError> {
    if grad_out.len() != cache.argmax.len() {
        return Err(EngineError::dim(
            "maxpool",
            "upstream gradient",
            cache.argmax.len(),
            grad_out.len(),
        ));
    }
    let mut gx = vec![T::zero(); input_shape.iter().product()];
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        gx[idx] += g;
    }
    Tensor::new(input_shape.to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gap_of_constant_channel() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 3, 3], |i| if i < 9 { 4.0 } else { -2.0 });
        let y = gap_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[4.0, -2.0]);
    }

    #[test]
    fn concat_stacks_channels_in_order() {
        let a = Tensor::<f32>::full(&[1, 2, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[1, 3, 2, 2], 2.0);
        let y = concat_forward(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 5, 2, 2]);
        assert!(y.data()[..8].iter().all(|&v| v == 1.0));
        assert!(y.data()[8..].iter().all(|&v| v == 2.0));
        let parts = concat_backward(&[a.shape().to_vec(), b.shape().to_vec()], &y).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 2]);
        let b = Tensor::<f32>::zeros(&[1, 3]);
        assert!(add_forward(&[&a, &b]).is_err());
        assert!(add_forward(&[&a]).is_err());
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 4, 4], |i| i as f32);
        let (y, cache) = maxpool_forward(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let g = maxpool_backward(x.shape(), &cache, &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(g.data()[5], 1.0);
        assert_eq!(g.data().iter().sum::<f32>(), 4.0);
    }

    #[test]
    fn maxpool_resnet_stem_geometry() {
        let x = Tensor::<f32>::zeros(&[1, 1, 112, 112]);
        let (y, _) = maxpool_forward(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 56, 56]);
    }
}
