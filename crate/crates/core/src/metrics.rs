//! Attack scoring: success rate, ROC statistics, advantage and exact binomial
//! intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub asr: f64,
    pub auroc: f64,
    pub advantage: f64,
    pub tpr_at_1pct_fpr: f64,
    pub trials: usize,
    /// Success rate of the majority-class guesser.
    pub baseline: f64,
}

impl MetricsReport {
    /// Scores a set of posteriors against true labels. `prior` fixes the
    /// majority-class baseline.
    pub fn from_posteriors(posteriors: &[Vec<f64>], truths: &[usize], prior: &[f64]) -> Result<Self> {
        if posteriors.len() != truths.len() {
            return Err(Error::DimensionMismatch {
                expected: truths.len(),
                got: posteriors.len(),
            });
        }
        let predictions: Vec<usize> = posteriors.iter().map(|p| argmax(p)).collect();
        let asr = asr(&predictions, truths)?;
        let baseline = prior.iter().copied().fold(0.0, f64::max);
        let m = prior.len();
        Ok(Self {
            asr,
            auroc: auroc_multiclass(posteriors, truths, m)?,
            advantage: advantage(asr, baseline)?,
            tpr_at_1pct_fpr: tpr_at_fpr_multiclass(posteriors, truths, m, 0.01)?,
            trials: truths.len(),
            baseline,
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn asr(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: predictions.len(),
        });
    }
    if truths.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Rank-based (Mann-Whitney) AUROC. Tied positive/negative pairs count one
/// half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tie groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Binary AUROC on the class-1 posterior when `m == 2`; otherwise the
/// unweighted mean of one-vs-rest AUROCs over classes that have both
/// positives and negatives.
pub fn auroc_multiclass(posteriors: &[Vec<f64>], truths: &[usize], m: usize) -> Result<f64> {
    one_vs_rest(posteriors, truths, m, auroc)
}

pub fn tpr_at_fpr_multiclass(
    posteriors: &[Vec<f64>],
    truths: &[usize],
    m: usize,
    fpr_target: f64,
) -> Result<f64> {
    one_vs_rest(posteriors, truths, m, |s, l| tpr_at_fpr(s, l, fpr_target))
}

fn one_vs_rest(
    posteriors: &[Vec<f64>],
    truths: &[usize],
    m: usize,
    metric: impl Fn(&[f64], &[bool]) -> Result<f64>,
) -> Result<f64> {
    if m == 2 {
        let scores: Vec<f64> = posteriors.iter().map(|p| p[1]).collect();
        let labels: Vec<bool> = truths.iter().map(|&t| t == 1).collect();
        return metric(&scores, &labels);
    }
    let mut total = 0.0;
    let mut used = 0;
    for class in 0..m {
        let scores: Vec<f64> = posteriors.iter().map(|p| p[class]).collect();
        let labels: Vec<bool> = truths.iter().map(|&t| t == class).collect();
        match metric(&scores, &labels) {
            Ok(v) => {
                total += v;
                used += 1;
            }
            Err(Error::SingleClass) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::SingleClass);
    }
    Ok(total / used as f64)
}

/// `max(p - p*, 0) / (1 - p*)`.
pub fn advantage(p: f64, p_star: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&p_star) {
        return Err(Error::InvalidArgument(format!(
            "success rates must lie in [0, 1]: p = {p}, p* = {p_star}"
        )));
    }
    if p_star >= 1.0 {
        return Err(Error::Undefined("advantage with baseline success rate 1".into()));
    }
    Ok((p - p_star).max(0.0) / (1.0 - p_star))
}

/// TPR of the rule `score >= c` at the lowest threshold whose FPR stays at or
/// below `fpr_target`.
pub fn tpr_at_fpr(scores: &[f64], labels: &[bool], fpr_target: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if fp as f64 / n_neg as f64 <= fpr_target {
            best = tp as f64 / n_pos as f64;
        } else {
            break;
        }
    }
    Ok(best)
}

/// Exact two-sided binomial interval by Beta-quantile inversion.
pub fn clopper_pearson(successes: u64, n: u64, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 || successes > n {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= successes <= n and n >= 1, got {successes} of {n}"
        )));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidArgument("confidence must lie in (0, 1)".into()));
    }
    let alpha = 1.0 - confidence;
    let (x, n) = (successes as f64, n as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(x, n - x + 1.0)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .inverse_cdf(alpha / 2.0)
    };
    let hi = if successes as f64 == n {
        1.0
    } else {
        Beta::new(x + 1.0, n - x)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    Ok((lo, hi))
}
