use crate::tensor::{Scalar, Tensor};

use super::{check_labels, rows, MetricsError};

/// Mean cross-entropy of `logits` (N x C) and its gradient w.r.t. the logits.
///
/// With `alpha > 0` the target is `(1 - alpha) * onehot + alpha / C`.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
) -> Result<(f64, Tensor<T>), MetricsError> {
    let (n, c) = rows(logits, "logits rank")?;
    check_labels(labels, n)?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(MetricsError::InvalidArgument(format!(
            "label smoothing {alpha} outside [0, 1)"
        )));
    }
    let x = logits.data();
    let mut grad = vec![T::zero(); n * c];
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(MetricsError::LabelOutOfRange { label, classes: c });
        }
        let row = &x[i * c..(i + 1) * c];
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + sum.ln();
        for j in 0..c {
            let log_p = row[j].as_f64() - log_z;
            let q = alpha / c as f64 + if j == label { 1.0 - alpha } else { 0.0 };
            if q > 0.0 {
                total -= q * log_p;
            }
            grad[i * c + j] = T::of((log_p.exp() - q) * inv_n);
        }
    }
    let grad = Tensor::new(vec![n, c], grad).expect("logit shape");
    Ok((total * inv_n, grad))
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn top1_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64, MetricsError> {
    let (n, c) = rows(logits, "logits rank")?;
    check_labels(labels, n)?;
    let correct = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count();
    Ok(correct as f64 / n as f64)
}

const NORM_FLOOR: f64 = 1e-12;

/// Scales each row to unit Euclidean norm.
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, MetricsError> {
    let (_, d) = rows(x, "embedding rank")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let norm = row
            .iter()
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
            .max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v = T::of(v.as_f64() / norm));
    }
    Ok(Tensor::new(x.shape().to_vec(), out).expect("same shape"))
}

/// Gradient of [`l2_normalize`] w.r.t. its input: `(g - y (y . g)) / |x|`.
pub fn l2_normalize_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, MetricsError> {
    let (_, d) = rows(x, "embedding rank")?;
    if grad_out.shape() != x.shape() {
        return Err(MetricsError::Dimension {
            what: "normalize gradient length",
            expected: x.len(),
            actual: grad_out.len(),
        });
    }
    let mut out = Vec::with_capacity(x.len());
    for (row, g) in x.data().chunks(d).zip(grad_out.data().chunks(d)) {
        let norm = row
            .iter()
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
            .max(NORM_FLOOR);
        let y: Vec<f64> = row.iter().map(|v| v.as_f64() / norm).collect();
        let yg: f64 = y.iter().zip(g).map(|(a, b)| a * b.as_f64()).sum();
        out.extend(y.iter().zip(g).map(|(yi, gi)| T::of((gi.as_f64() - yi * yg) / norm)));
    }
    Ok(Tensor::new(x.shape().to_vec(), out).expect("same shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check, FdOptions};

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let (loss, _) = cross_entropy(&logits, &[0, 1, 3], 0.0).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smoothed_two_class_by_hand() {
        let logits = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0], 0.1).unwrap();
        let p0 = 1f64.exp() / (1f64.exp() + 1.0);
        let expected = -(0.95 * p0.ln() + 0.05 * (1.0 - p0).ln());
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let logits = Tensor::<f64>::from_f64(&[1, 3], &[60.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&logits, &[0], 0.0).unwrap().0 < 1e-20);
        assert!(cross_entropy(&logits, &[0], 0.1).unwrap().0 > 0.0);
    }

    #[test]
    fn bad_labels_are_rejected() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert_eq!(
            cross_entropy(&logits, &[3], 0.0).unwrap_err(),
            MetricsError::LabelOutOfRange { label: 3, classes: 3 }
        );
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let labels = [2, 0, 1];
        let x: Vec<f64> = (0..12).map(|i| ((i * 37) % 11) as f64 / 4.0 - 1.2).collect();
        let logits = Tensor::<f64>::from_f64(&[3, 4], &x).unwrap();
        for alpha in [0.0, 0.1] {
            let (_, g) = cross_entropy(&logits, &labels, alpha).unwrap();
            let f = |p: &[f64]| {
                cross_entropy(&Tensor::<f64>::from_f64(&[3, 4], p).unwrap(), &labels, alpha)
                    .unwrap()
                    .0
            };
            let err = finite_diff_check(f, &x, g.data(), FdOptions::default());
            assert!(err < 1e-6, "alpha {alpha}: {err}");
        }
    }

    #[test]
    fn top1_ties_go_to_lowest_index() {
        let logits = Tensor::<f32>::from_f64(&[2, 2], &[1.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(top1_accuracy(&logits, &[0, 1]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&logits, &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn normalize_gradient_matches_finite_differences() {
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin() + 0.1).collect();
        let xt = Tensor::<f64>::from_f64(&[2, 4], &x).unwrap();
        let w: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let y = l2_normalize(&xt).unwrap();
        for row in y.data().chunks(4) {
            assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let g = l2_normalize_backward(&xt, &Tensor::from_f64(&[2, 4], &w).unwrap()).unwrap();
        let f = |p: &[f64]| {
            let y = l2_normalize(&Tensor::from_f64(&[2, 4], p).unwrap()).unwrap();
            y.data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        assert!(finite_diff_check(f, &x, g.data(), FdOptions::default()) < 1e-6);
    }
}
