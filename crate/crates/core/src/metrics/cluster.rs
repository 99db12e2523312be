use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::{Scalar, SeededRng, Tensor};

use super::{check_labels, rows, MetricsError};

#[derive(Clone, Copy, Debug)]
pub struct KMeansOptions {
    pub max_iterations: usize,
    /// Stop once total squared center movement falls below this fraction of total squared center norm.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Returns one cluster id per row.
///
/// Ties in assignment go to the lowest cluster index; an emptied cluster is
/// re-seeded at the point farthest from its current center.
pub fn kmeans<T: Scalar>(points: &Tensor<T>, k: usize, opts: KMeansOptions) -> Result<Vec<usize>, MetricsError> {
    let (n, d) = rows(points, "point rank")?;
    if k == 0 {
        return Err(MetricsError::InvalidArgument(
            "k-means needs at least one cluster".into(),
        ));
    }
    let x: Vec<f64> = points.data().iter().map(|v| v.as_f64()).collect();
    let pt = |i: usize| &x[i * d..(i + 1) * d];
    let k = k.min(n);
    let mut rng = SeededRng::new(opts.seed, "kmeans++");

    let mut centers: Vec<f64> = Vec::with_capacity(k * d);
    centers.extend_from_slice(pt(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(pt(i), &centers[..d])).collect();
    while centers.len() < k * d {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(pt(pick));
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(sq_dist(pt(i), &centers[start..start + d]));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..opts.max_iterations {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let dist = sq_dist(pt(i), &centers[c * d..(c + 1) * d]);
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            *a = best.0;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            sums[a * d..(a + 1) * d]
                .iter_mut()
                .zip(pt(i))
                .for_each(|(s, v)| *s += v);
        }
        let mut next = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    next[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .map(|i| (i, sq_dist(pt(i), &centers[assign[i] * d..(assign[i] + 1) * d])))
                    .fold((0, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc })
                    .0;
                next[c * d..(c + 1) * d].copy_from_slice(pt(far));
            }
        }
        let shift = sq_dist(&next, &centers);
        let scale = next.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
        centers = next;
        if shift / scale < opts.tolerance {
            break;
        }
    }
    for (i, a) in assign.iter_mut().enumerate() {
        let mut best = (0, f64::INFINITY);
        for c in 0..k {
            let dist = sq_dist(pt(i), &centers[c * d..(c + 1) * d]);
            if dist < best.1 {
                best = (c, dist);
            }
        }
        *a = best.0;
    }
    Ok(assign)
}

/// `I(A; B) / sqrt(H(A) H(B))` in nats.
///
/// If either entropy is zero the score is 0, except when both clusterings are
/// the same single block, which scores 1.
pub fn nmi_from_assignments(a: &[usize], b: &[usize]) -> Result<f64, MetricsError> {
    check_labels(b, a.len())?;
    if a.is_empty() {
        return Err(MetricsError::InvalidArgument("NMI of an empty clustering".into()));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let entropy = |m: &BTreeMap<usize, usize>| -> f64 {
        m.values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (entropy(&ca), entropy(&cb));
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ca.len() == 1 && cb.len() == 1 { 1.0 } else { 0.0 });
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// NMI between the ground-truth labels and a seeded k-means clustering of the embeddings.
pub fn nmi_score<T: Scalar>(
    emb: &Tensor<T>,
    labels: &[usize],
    k: usize,
    opts: KMeansOptions,
) -> Result<f64, MetricsError> {
    let (n, _) = rows(emb, "embedding rank")?;
    check_labels(labels, n)?;
    let clusters = kmeans(emb, k, opts)?;
    nmi_from_assignments(labels, &clusters)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_rules() {
        assert_eq!(nmi_from_assignments(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap(), 1.0);
        assert_eq!(nmi_from_assignments(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(nmi_from_assignments(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn nmi_is_symmetric() {
        let a = [0, 0, 1, 1, 2, 2, 0, 1];
        let b = [1, 0, 1, 1, 0, 2, 2, 1];
        let ab = nmi_from_assignments(&a, &b).unwrap();
        assert!((ab - nmi_from_assignments(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ab > 0.0 && ab < 1.0);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for i in 0..5 {
                data.push(c as f64 * 10.0 + i as f64 * 0.01);
                data.push(-(c as f64) * 10.0);
                labels.push(c);
            }
        }
        let emb = Tensor::<f64>::from_f64(&[15, 2], &data).unwrap();
        assert!((nmi_score(&emb, &labels, 3, KMeansOptions::default()).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi_score(&emb, &labels, 1, KMeansOptions::default()).unwrap(), 0.0);
    }
}
