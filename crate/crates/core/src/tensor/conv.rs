use rayon::prelude::*;

use super::{axpy, dot, pool, EngineError, Scalar, Tensor};

const OP: &str = "conv2d";

/// Output spatial extent: `floor((size + 2*pad - kernel) / stride) + 1`.
pub fn conv_output_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn patch(&self) -> usize {
        self.k * self.k * self.ci
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    filter: &Tensor<T>,
    bias_len: Option<usize>,
    stride: usize,
    pad: usize,
) -> Result<Geom, EngineError> {
    let [n, ci, h, w] = input.nchw(OP)?;
    if filter.rank() != 4 {
        return Err(EngineError::dim(OP, "filter rank", 4, filter.rank()));
    }
    let (co, k, kw, fci) = (filter.dim(0), filter.dim(1), filter.dim(2), filter.dim(3));
    if kw != k {
        return Err(EngineError::dim(OP, "kernel width", k, kw));
    }
    if fci != ci {
        return Err(EngineError::dim(OP, "input channels", fci, ci));
    }
    if let Some(b) = bias_len {
        if b != co {
            return Err(EngineError::dim(OP, "bias", co, b));
        }
    }
    if stride == 0 {
        return Err(EngineError::InvalidArgument {
            op: OP,
            msg: "stride must be positive".into(),
        });
    }
    let ho = conv_output_dim(h, k, stride, pad).ok_or_else(|| EngineError::dim(OP, "height", k, h + 2 * pad))?;
    let wo = conv_output_dim(w, k, stride, pad).ok_or_else(|| EngineError::dim(OP, "width", k, w + 2 * pad))?;
    Ok(Geom {
        n,
        ci,
        h,
        w,
        co,
        k,
        stride,
        pad,
        ho,
        wo,
    })
}

/// Lays out one sample as rows of `(ky, kx, c)` patches, matching the
/// `Co x k x k x Ci` filter layout so each output is a contiguous dot product.
fn im2col<T: Scalar>(g: &Geom, sample: &[T], cols: &mut [T]) {
    let patch = g.patch();
    let plane = g.h * g.w;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let dst = &mut row[(ky * g.k + kx) * g.ci..][..g.ci];
                    if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                    } else {
                        let off = iy as usize * g.w + ix as usize;
                        for (c, v) in dst.iter_mut().enumerate() {
                            *v = sample[c * plane + off];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geom, cols: &[T], sample: &mut [T]) {
    let patch = g.patch();
    let plane = g.h * g.w;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy as usize >= g.h {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix as usize >= g.w {
                        continue;
                    }
                    let off = iy as usize * g.w + ix as usize;
                    let src = &row[(ky * g.k + kx) * g.ci..][..g.ci];
                    for (c, &v) in src.iter().enumerate() {
                        sample[c * plane + off] += v;
                    }
                }
            }
        }
    }
}

/// 2-D convolution of an `N x Ci x H x W` input with a `Co x k x k x Ci` filter.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    filter: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, EngineError> {
    let g = geometry(input, filter, bias.map(|b| b.len()), stride, padding)?;
    let sample_in = g.ci * g.h * g.w;
    let sample_out = g.co * g.positions();
    let mut out = vec![T::zero(); g.n * sample_out];
    let patch = g.patch();
    let f = filter.data();
    let x = input.data();
    pool().install(|| {
        out.par_chunks_mut(sample_out).enumerate().for_each(|(n, dst)| {
            let mut cols = vec![T::zero(); g.positions() * patch];
            im2col(&g, &x[n * sample_in..][..sample_in], &mut cols);
            for o in 0..g.co {
                let frow = &f[o * patch..][..patch];
                let b = bias.map_or(T::zero(), |b| b.data()[o]);
                let orow = &mut dst[o * g.positions()..][..g.positions()];
                for (p, v) in orow.iter_mut().enumerate() {
                    *v = dot(frow, &cols[p * patch..][..patch]) + b;
                }
            }
        });
    });
    Tensor::new(vec![g.n, g.co, g.ho, g.wo], out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub filter: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv2d_forward`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    filter: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>, EngineError> {
    let g = geometry(input, filter, None, stride, padding)?;
    let expected = [g.n, g.co, g.ho, g.wo];
    if grad_out.shape() != expected {
        return Err(EngineError::dim(
            OP,
            "upstream gradient",
            expected.iter().product(),
            grad_out.len(),
        ));
    }
    let patch = g.patch();
    let positions = g.positions();
    let sample_in = g.ci * g.h * g.w;
    let sample_out = g.co * positions;
    let x = input.data();
    let gy = grad_out.data();
    let f = filter.data();

    let mut cols = vec![T::zero(); g.n * positions * patch];
    let mut grad_in = vec![T::zero(); g.n * sample_in];
    let mut grad_f = vec![T::zero(); f.len()];
    pool().install(|| {
        cols.par_chunks_mut(positions * patch)
            .enumerate()
            .for_each(|(n, c)| im2col(&g, &x[n * sample_in..][..sample_in], c));

        // filter gradient: one output row per thread, summed over (n, p) in order
        grad_f.par_chunks_mut(patch).enumerate().for_each(|(o, gf)| {
            for n in 0..g.n {
                let gy_row = &gy[n * sample_out + o * positions..][..positions];
                let c = &cols[n * positions * patch..][..positions * patch];
                for (p, &d) in gy_row.iter().enumerate() {
                    if d != T::zero() {
                        axpy(d, &c[p * patch..][..patch], gf);
                    }
                }
            }
        });

        grad_in.par_chunks_mut(sample_in).enumerate().for_each(|(n, gin)| {
            let mut gcols = vec![T::zero(); positions * patch];
            for o in 0..g.co {
                let gy_row = &gy[n * sample_out + o * positions..][..positions];
                let frow = &f[o * patch..][..patch];
                for (p, &d) in gy_row.iter().enumerate() {
                    if d != T::zero() {
                        axpy(d, frow, &mut gcols[p * patch..][..patch]);
                    }
                }
            }
            col2im(&g, &gcols, gin);
        });
    });

    let bias = has_bias.then(|| {
        let mut gb = vec![T::zero(); g.co];
        for n in 0..g.n {
            for (o, b) in gb.iter_mut().enumerate() {
                for &d in &gy[n * sample_out + o * positions..][..positions] {
                    *b += d;
                }
            }
        }
        Tensor::new(vec![g.co], gb).expect("bias shape")
    });

    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        filter: Tensor::new(filter.shape().to_vec(), grad_f)?,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let f = Tensor::<f32>::full(&[1, 3, 3, 1], 1.0);
        let y = conv2d_forward(&x, &f, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn zero_filter_gives_zero_output() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 5, 5], |i| i as f32 * 0.1 - 3.0);
        let f = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        let y = conv2d_forward(&x, &f, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_dims_follow_floor_rule() {
        assert_eq!(conv_output_dim(224, 7, 2, 3), Some(112));
        assert_eq!(conv_output_dim(56, 1, 2, 0), Some(28));
        assert_eq!(conv_output_dim(2, 5, 1, 0), None);
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let f = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        match conv2d_forward(&x, &f, None, 1, 0) {
            Err(EngineError::Dimension {
                axis, expected, actual, ..
            }) => {
                assert_eq!(axis, "input channels");
                assert_eq!((expected, actual), (3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let f = Tensor::<f64>::zeros(&[2, 1, 1, 1]);
        let b = Tensor::<f64>::new(vec![2], vec![1.5, -2.0]).unwrap();
        let y = conv2d_forward(&x, &f, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);
    }
}
