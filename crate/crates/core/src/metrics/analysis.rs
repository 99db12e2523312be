use crate::graph::{NetworkGraph, ParamRole, ParamStore};
use crate::split::{Bitset, SplitError, SplitMask};
use crate::tensor::Scalar;

use super::MetricsError;

/// Mean absolute weight inside the fit- and reset-hypothesis of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisStat {
    pub node: String,
    pub fit: f64,
    /// `None` when the whole layer belongs to the fit-hypothesis.
    pub reset: Option<f64>,
}

/// Per conv/linear layer, mean `|w|` over fit and over reset weight entries.
pub fn hypothesis_mean_abs<T: Scalar>(
    graph: &NetworkGraph,
    params: &ParamStore<T>,
    mask: &SplitMask,
) -> Result<Vec<HypothesisStat>, SplitError> {
    let mut out = Vec::new();
    for spec in graph.param_specs().into_iter().filter(|s| s.role == ParamRole::Weight) {
        let Some(fit) = mask.fit_indicator(graph, &spec)? else {
            continue;
        };
        let w = params.require(&spec.key)?;
        let (mut sf, mut nf, mut sr, mut nr) = (0.0, 0usize, 0.0, 0usize);
        for (i, v) in w.data().iter().enumerate() {
            if fit.get(i) {
                sf += v.as_f64().abs();
                nf += 1;
            } else {
                sr += v.as_f64().abs();
                nr += 1;
            }
        }
        out.push(HypothesisStat {
            node: spec.node,
            fit: if nf > 0 { sf / nf as f64 } else { 0.0 },
            reset: (nr > 0).then(|| sr / nr as f64),
        });
    }
    Ok(out)
}

/// Step-wise and cumulative normalized Hamming distances of a mask series.
///
/// Element `g - 2` of each list holds the value for generation `g >= 2`:
/// `S(g) = |h[g-1] xor h[g]| / d`, `C(g) = |h[1] xor h[g]| / d`.
pub fn h2d_metrics(series: &[Bitset]) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if series.len() < 2 {
        return Err(MetricsError::InvalidArgument(format!(
            "H2D needs at least two masks, got {}",
            series.len()
        )));
    }
    let d = series[0].len();
    if d == 0 {
        return Err(MetricsError::InvalidArgument("H2D over zero-length masks".into()));
    }
    if let Some(bad) = series.iter().find(|b| b.len() != d) {
        return Err(MetricsError::Dimension {
            what: "mask length",
            expected: d,
            actual: bad.len(),
        });
    }
    let step = series
        .windows(2)
        .map(|w| w[0].hamming(&w[1]) as f64 / d as f64)
        .collect();
    let cumulative = series[1..]
        .iter()
        .map(|b| series[0].hamming(b) as f64 / d as f64)
        .collect();
    Ok((step, cumulative))
}
