use crate::error::{Error, Result};
use crate::metrics::argmax;

const FLOOR: f64 = 1e-12;

/// Combines per-round posteriors assumed conditionally independent given `a`:
/// `score(a) = sum_i ln P_i(a) - (|R| - 1) ln prior(a)`. Returns the argmax
/// (ties to the lowest index) and the log-score vector.
pub fn multi_round_aggregate(round_posteriors: &[Vec<f64>], prior: &[f64]) -> Result<(usize, Vec<f64>)> {
    let first = round_posteriors
        .first()
        .ok_or_else(|| Error::InvalidArgument("no rounds to aggregate".into()))?;
    let m = prior.len();
    if let Some(bad) = round_posteriors.iter().find(|p| p.len() != m) {
        return Err(Error::DimensionMismatch { expected: m, got: bad.len() });
    }
    debug_assert_eq!(first.len(), m);
    let extra = (round_posteriors.len() - 1) as f64;
    let scores: Vec<f64> = (0..m)
        .map(|a| {
            round_posteriors.iter().map(|p| p[a].max(FLOOR).ln()).sum::<f64>() - extra * prior[a].max(FLOOR).ln()
        })
        .collect();
    Ok((argmax(&scores), scores))
}

/// Softmax of log-scores, i.e. the aggregated posterior.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    crate::nn::softmax(scores)
}
