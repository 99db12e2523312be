use crate::tensor::{Scalar, Tensor};

use super::{check_labels, rows, MetricsError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    pub margin: f64,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Euclidean (not squared) distance, accumulated in `f64`.
pub fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn distance_matrix<T: Scalar>(emb: &Tensor<T>) -> Result<(usize, Vec<f64>), MetricsError> {
    let (n, d) = rows(emb, "embedding rank")?;
    let x = emb.data();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = euclidean(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    Ok((n, dist))
}

/// Every `(a, p, n)` with `label[a] == label[p]`, `a != p`, `label[n] != label[a]`
/// and `D(a,p) < D(a,n) < D(a,p) + margin`, in lexicographic order.
pub fn mine_semi_hard<T: Scalar>(emb: &Tensor<T>, labels: &[usize], margin: f64) -> Result<TripletSet, MetricsError> {
    let (n, dist) = distance_matrix(emb)?;
    check_labels(labels, n)?;
    let mut triplets = Vec::new();
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            let dap = dist[a * n + p];
            for neg in (0..n).filter(|&k| labels[k] != labels[a]) {
                let dan = dist[a * n + neg];
                if dap < dan && dan < dap + margin {
                    triplets.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative: neg,
                    });
                }
            }
        }
    }
    Ok(TripletSet { triplets, margin })
}

/// Mean hinge `[D(a,p) - D(a,n) + m]+` over the set, with its embedding gradient.
/// An empty set yields zero loss and a zero gradient.
pub fn triplet_loss<T: Scalar>(emb: &Tensor<T>, set: &TripletSet) -> Result<(f64, Tensor<T>), MetricsError> {
    let (n, d) = rows(emb, "embedding rank")?;
    let x = emb.data();
    let mut grad = vec![0.0f64; n * d];
    if set.is_empty() {
        return Ok((0.0, Tensor::zeros(emb.shape())));
    }
    let scale = 1.0 / set.len() as f64;
    let mut total = 0.0;
    let row = |i: usize| &x[i * d..(i + 1) * d];
    // d|u - v| / du = (u - v) / |u - v|, taken as zero at coincident points
    let push = |grad: &mut [f64], i: usize, j: usize, dist: f64, sign: f64| {
        if dist == 0.0 {
            return;
        }
        for k in 0..d {
            let g = sign * scale * (row(i)[k].as_f64() - row(j)[k].as_f64()) / dist;
            grad[i * d + k] += g;
            grad[j * d + k] -= g;
        }
    };
    for t in &set.triplets {
        for idx in [t.anchor, t.positive, t.negative] {
            if idx >= n {
                return Err(MetricsError::Dimension {
                    what: "triplet index bound",
                    expected: n,
                    actual: idx,
                });
            }
        }
        let dap = euclidean(row(t.anchor), row(t.positive));
        let dan = euclidean(row(t.anchor), row(t.negative));
        let h = dap - dan + set.margin;
        if h > 0.0 {
            total += h;
            push(&mut grad, t.anchor, t.positive, dap, 1.0);
            push(&mut grad, t.anchor, t.negative, dan, -1.0);
        }
    }
    let grad = Tensor::new(emb.shape().to_vec(), grad.into_iter().map(T::of).collect()).expect("same shape");
    Ok((total * scale, grad))
}

/// Fraction of queries whose `k` nearest other points include a same-class point.
/// Neighbors are ordered by distance, then by index.
pub fn recall_at_k<T: Scalar>(emb: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64, MetricsError> {
    let (n, dist) = distance_matrix(emb)?;
    check_labels(labels, n)?;
    if n < 2 || k == 0 {
        return Err(MetricsError::InvalidArgument(format!(
            "recall@{k} needs k >= 1 and at least 2 points, got {n}"
        )));
    }
    let mut hits = 0;
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for q in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != q));
        let dq = &dist[q * n..(q + 1) * n];
        order.sort_by(|&a, &b| dq[a].total_cmp(&dq[b]).then(a.cmp(&b)));
        if order.iter().take(k).any(|&j| labels[j] == labels[q]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check, FdOptions};

    fn emb(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::from_f64(&[rows.len(), 2], &rows.concat()).unwrap()
    }

    #[test]
    fn identical_points_mine_nothing() {
        let e = emb(&[[1.0, 0.0]; 4]);
        assert!(mine_semi_hard(&e, &[0, 0, 1, 1], 0.2).unwrap().is_empty());
    }

    #[test]
    fn hand_built_semi_hard_negative() {
        // anchor 0, positive 1 at distance 0.5; negative 2 at 0.6 (inside the band), 3 at 2.0
        let e = emb(&[[0.0, 0.0], [0.5, 0.0], [0.0, 0.6], [0.0, 2.0]]);
        let set = mine_semi_hard(&e, &[0, 0, 1, 1], 0.2).unwrap();
        let from_anchor0: Vec<_> = set.triplets.iter().filter(|t| t.anchor == 0).collect();
        assert_eq!(
            from_anchor0,
            vec![&Triplet {
                anchor: 0,
                positive: 1,
                negative: 2
            }]
        );
    }

    #[test]
    fn hinge_values() {
        let e = emb(&[[0.0, 0.0], [0.5, 0.0], [0.9, 0.0]]);
        let t = |margin| TripletSet {
            triplets: vec![Triplet {
                anchor: 0,
                positive: 1,
                negative: 2,
            }],
            margin,
        };
        assert_eq!(triplet_loss(&e, &t(0.2)).unwrap().0, 0.0);
        let same = emb(&[[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]]);
        assert!((triplet_loss(&same, &t(0.2)).unwrap().0 - 0.2).abs() < 1e-12);
        let empty = TripletSet {
            triplets: vec![],
            margin: 0.2,
        };
        let (l, g) = triplet_loss(&e, &empty).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let x: Vec<f64> = (0..16).map(|i| ((i * 13) % 7) as f64 / 5.0 - 0.6).collect();
        let e = Tensor::<f64>::from_f64(&[8, 2], &x).unwrap();
        let labels = [0, 0, 1, 1, 2, 2, 0, 1];
        let set = mine_semi_hard(&e, &labels, 0.5).unwrap();
        assert!(!set.is_empty());
        let (_, g) = triplet_loss(&e, &set).unwrap();
        let f = |p: &[f64]| {
            triplet_loss(&Tensor::<f64>::from_f64(&[8, 2], p).unwrap(), &set)
                .unwrap()
                .0
        };
        assert!(finite_diff_check(f, &x, g.data(), FdOptions::default()) < 1e-6);
    }

    #[test]
    fn recall_degenerate_cases() {
        let pairs = emb(&[[0.0, 0.0], [0.01, 0.0], [5.0, 5.0], [5.0, 5.01]]);
        assert_eq!(recall_at_k(&pairs, &[0, 0, 1, 1], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&pairs, &[0, 1, 2, 3], 3).unwrap(), 0.0);
        // constant embeddings: nearest neighbor is the lowest other index
        let flat = emb(&[[1.0, 1.0]; 4]);
        assert_eq!(recall_at_k(&flat, &[0, 0, 1, 1], 1).unwrap(), 0.5);
    }
}
