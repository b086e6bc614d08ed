//! Information-theoretic bounds on inference from released gradients.
//! Everything is in nats.

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::argmax;

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn binary_entropy(e: f64) -> f64 {
    entropy(&[e, 1.0 - e])
}

/// Finite-alphabet channel `X -> Y` with prior `P(X)` and row-stochastic
/// `P(Y | X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteChannel {
    pub prior: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

impl DiscreteChannel {
    pub fn new(prior: Vec<f64>, transition: Vec<Vec<f64>>) -> Result<Self> {
        let ok_dist = |p: &[f64]| p.iter().all(|v| *v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if prior.is_empty() || prior.len() != transition.len() || !ok_dist(&prior) {
            return Err(Error::InvalidArgument("channel prior must be a distribution with one row per input".into()));
        }
        let out = transition[0].len();
        if out == 0 || transition.iter().any(|r| r.len() != out || !ok_dist(r)) {
            return Err(Error::InvalidArgument("channel rows must be distributions of equal length".into()));
        }
        Ok(Self { prior, transition })
    }

    pub fn output_size(&self) -> usize {
        self.transition[0].len()
    }

    fn joint(&self, x: usize, y: usize) -> f64 {
        self.prior[x] * self.transition[x][y]
    }

    pub fn output_marginal(&self) -> Vec<f64> {
        (0..self.output_size())
            .map(|y| (0..self.prior.len()).map(|x| self.joint(x, y)).sum())
            .collect()
    }

    /// Error of the MAP estimator `x_hat(y) = argmax_x P(x, y)`.
    pub fn bayes_error(&self) -> f64 {
        let correct: f64 = (0..self.output_size())
            .map(|y| {
                let col: Vec<f64> = (0..self.prior.len()).map(|x| self.joint(x, y)).collect();
                col[argmax(&col)]
            })
            .sum();
        1.0 - correct
    }

    /// Posterior `P(X | Y = y)`, or the prior when `P(y) = 0`.
    pub fn posterior(&self, y: usize) -> Vec<f64> {
        let col: Vec<f64> = (0..self.prior.len()).map(|x| self.joint(x, y)).collect();
        let s: f64 = col.iter().sum();
        if s > 0.0 {
            col.iter().map(|v| v / s).collect()
        } else {
            self.prior.clone()
        }
    }
}

/// `I(X; Y)` by enumeration of the joint.
pub fn mutual_information_exact(ch: &DiscreteChannel) -> f64 {
    let py = ch.output_marginal();
    let mut mi = 0.0;
    for x in 0..ch.prior.len() {
        for (y, &q) in py.iter().enumerate() {
            let j = ch.joint(x, y);
            if j > 0.0 {
                mi += j * (ch.transition[x][y] / q).ln();
            }
        }
    }
    mi.max(0.0)
}

/// `max(0, (H(X) - I - ln 2) / ln(m - 1))` for `m > 2`.
pub fn fano_error_lower_bound(h_x: f64, mi: f64, m: usize) -> Result<f64> {
    if m <= 2 {
        return Err(Error::InvalidArgument(
            "the ln 2 relaxation is vacuous for binary alphabets; use fano_binary_numeric".into(),
        ));
    }
    Ok(((h_x - mi - LN_2) / ((m - 1) as f64).ln()).max(0.0))
}

/// Smallest `e` in `[0, 1/2]` with `H2(e) >= H(X | Y)`, by bisection.
pub fn fano_binary_numeric(h_x_given_y: f64) -> f64 {
    let target = h_x_given_y.clamp(0.0, LN_2);
    if target <= 0.0 {
        return 0.0;
    }
    if target >= LN_2 {
        return 0.5;
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if binary_entropy(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// `1 - (H(a) - I - ln 2) / ((1 - p*) ln(m - 1))`, clamped to `[0, 1]`.
pub fn advantage_upper_bound(h_a: f64, mi: f64, m: usize, p_star: f64) -> Result<f64> {
    if m <= 2 {
        return Err(Error::InvalidArgument("advantage bound needs m > 2".into()));
    }
    if !(p_star < 1.0) {
        return Err(Error::InvalidArgument("baseline success rate must be < 1".into()));
    }
    let raw = 1.0 - (h_a - mi - LN_2) / ((1.0 - p_star) * ((m - 1) as f64).ln());
    Ok(raw.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CapacityVariant {
    /// `1/2 ln(1 + P / sigma)` as printed alongside the bound.
    #[default]
    Literal,
    /// Classical AWGN capacity `1/2 ln(1 + P / sigma^2)`.
    Classical,
}

/// Per-dimension capacity of the Gaussian channel created by adding noise to
/// gradients with average power `power`.
pub fn gaussian_capacity_bound(power: f64, sigma: f64, variant: CapacityVariant) -> Result<f64> {
    if !(power >= 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidArgument("need power >= 0 and sigma > 0".into()));
    }
    let snr = match variant {
        CapacityVariant::Literal => power / sigma,
        CapacityVariant::Classical => power / (sigma * sigma),
    };
    Ok(0.5 * (1.0 + snr).ln())
}

/// `H(prior) - mean cross-entropy` of predicted posteriors against true
/// labels, clamped at 0. An estimate of `I(a; g)`, not a certified bound.
pub fn mi_proxy_from_posteriors(posteriors: &[Vec<f64>], truths: &[usize], prior: &[f64]) -> Result<f64> {
    if posteriors.is_empty() || posteriors.len() != truths.len() {
        return Err(Error::InvalidArgument("need matching nonempty posteriors and labels".into()));
    }
    let ce: f64 = posteriors
        .iter()
        .zip(truths)
        .map(|(p, &t)| -p[t].max(1e-12).ln())
        .sum::<f64>()
        / truths.len() as f64;
    Ok((entropy(prior) - ce).max(0.0))
}

/// Channel with a random full-support prior and skewed random rows, for
/// brute-force checks.
pub fn random_channel<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> DiscreteChannel {
    let norm = |v: Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let prior = norm((0..inputs).map(|_| rng.random::<f64>() + 1e-3).collect());
    let rows = (0..inputs)
        .map(|_| norm((0..outputs).map(|_| rng.random::<f64>().powi(3) + 1e-6).collect()))
        .collect();
    DiscreteChannel { prior, transition: rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanoCheck {
    pub instances: usize,
    pub violations: usize,
    /// Smallest `bayes_error - bound` seen.
    pub min_slack: f64,
}

/// Compares exact Bayes error against the Fano bound on random channels
/// with 3 to `max_inputs` inputs and 2 to `max_outputs` outputs.
pub fn fano_brute_force(instances: usize, max_inputs: usize, max_outputs: usize, seed: u64) -> Result<FanoCheck> {
    if max_inputs < 3 || max_outputs < 2 {
        return Err(Error::InvalidArgument("need max_inputs >= 3 and max_outputs >= 2".into()));
    }
    let mut rng = crate::rng::SeedTree::new(seed).child("channels").rng();
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for _ in 0..instances {
        let nx = rng.random_range(3..=max_inputs);
        let ny = rng.random_range(2..=max_outputs);
        let ch = random_channel(nx, ny, &mut rng);
        let bound = fano_error_lower_bound(entropy(&ch.prior), mutual_information_exact(&ch), nx)?;
        let slack = ch.bayes_error() - bound;
        min_slack = min_slack.min(slack);
        if slack < 0.0 {
            violations += 1;
        }
    }
    Ok(FanoCheck {
        instances,
        violations,
        min_slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn random_channel<R: Rng>(rng: &mut R) -> DiscreteChannel {
        let nx = rng.random_range(3..=4);
        let ny = rng.random_range(2..=8);
        super::random_channel(nx, ny, rng)
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[0.5, 0.5]) - LN_2).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        assert!((entropy(&[0.9, 0.1]) - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn mutual_information_cases() {
        let id = DiscreteChannel::new(vec![0.25; 4], (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect()).unwrap();
        assert!((mutual_information_exact(&id) - 4f64.ln()).abs() < 1e-12);
        let indep = DiscreteChannel::new(vec![0.3, 0.7], vec![vec![0.2, 0.8], vec![0.2, 0.8]]).unwrap();
        assert!(mutual_information_exact(&indep).abs() < 1e-15);
        let bsc = DiscreteChannel::new(vec![0.5, 0.5], vec![vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let want = LN_2 - binary_entropy(0.1);
        assert!((mutual_information_exact(&bsc) - want).abs() < 1e-12);
        assert!((want - 0.3680).abs() < 1e-4);
    }

    #[test]
    fn fano_cases() {
        let b = fano_error_lower_bound(4f64.ln(), 0.0, 4).unwrap();
        assert!((b - LN_2 / 3f64.ln()).abs() < 1e-12);
        assert!((b - 0.6309).abs() < 1e-4);
        assert_eq!(fano_error_lower_bound(0.5, 0.5, 4).unwrap(), 0.0);
        assert!(fano_error_lower_bound(0.5, 0.1, 2).is_err());
    }

    #[test]
    fn fano_bound_below_bayes_error_on_random_channels() {
        let mut rng = SeedTree::new(5).rng();
        for _ in 0..1000 {
            let ch = random_channel(&mut rng);
            let bound = fano_error_lower_bound(entropy(&ch.prior), mutual_information_exact(&ch), ch.prior.len()).unwrap();
            assert!(ch.bayes_error() >= bound - 1e-12);
        }
    }

    #[test]
    fn binary_fano_inverts_entropy() {
        assert_eq!(fano_binary_numeric(0.0), 0.0);
        assert!((fano_binary_numeric(LN_2) - 0.5).abs() < 1e-10);
        assert!((fano_binary_numeric(binary_entropy(0.1)) - 0.1).abs() < 1e-8);
        for i in 1..500 {
            let e = i as f64 / 1000.0;
            assert!((fano_binary_numeric(binary_entropy(e)) - e).abs() < 1e-8);
        }
    }

    #[test]
    fn advantage_bound_cases() {
        let b = advantage_upper_bound(4f64.ln(), 0.0, 4, 0.25).unwrap();
        assert!((b - (1.0 - (4f64.ln() - LN_2) / (0.75 * 3f64.ln()))).abs() < 1e-12);
        assert!((b - 0.1587).abs() < 1e-3);
        assert_eq!(advantage_upper_bound(1.0, 1.5, 4, 0.25).unwrap(), 1.0);
        assert!(advantage_upper_bound(1.0, 0.0, 2, 0.5).is_err());
    }

    #[test]
    fn measured_advantage_respects_bound_on_channels() {
        let mut rng = SeedTree::new(6).rng();
        for _ in 0..300 {
            let ch = random_channel(&mut rng);
            let m = ch.prior.len();
            let p_star = ch.prior.iter().copied().fold(0.0, f64::max);
            let p = 1.0 - ch.bayes_error();
            let adv = crate::metrics::advantage(p.min(1.0), p_star).unwrap();
            let bound = advantage_upper_bound(entropy(&ch.prior), mutual_information_exact(&ch), m, p_star).unwrap();
            assert!(adv <= bound + 1e-12);
        }
    }

    #[test]
    fn bounds_are_monotone_in_mi() {
        let h = 4f64.ln();
        let mut prev_err = f64::INFINITY;
        let mut prev_adv = -1.0;
        for i in 0..=20 {
            let mi = h * i as f64 / 20.0;
            let e = fano_error_lower_bound(h, mi, 4).unwrap();
            let a = advantage_upper_bound(h, mi, 4, 0.25).unwrap();
            assert!(e <= prev_err && a >= prev_adv);
            prev_err = e;
            prev_adv = a;
        }
    }

    #[test]
    fn capacity_cases() {
        assert_eq!(gaussian_capacity_bound(0.0, 0.5, CapacityVariant::Literal).unwrap(), 0.0);
        assert!((gaussian_capacity_bound(0.3, 0.3, CapacityVariant::Literal).unwrap() - 0.5 * LN_2).abs() < 1e-15);
        assert!((gaussian_capacity_bound(0.09, 0.3, CapacityVariant::Classical).unwrap() - 0.5 * LN_2).abs() < 1e-15);
        let mut prev = 0.0;
        for p in 0..50 {
            let c = gaussian_capacity_bound(p as f64 * 0.1, 0.2, CapacityVariant::Literal).unwrap();
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn mi_proxy_cases() {
        let prior = [0.5, 0.5];
        let post = vec![vec![0.5, 0.5]; 4];
        assert_eq!(mi_proxy_from_posteriors(&post, &[0, 1, 0, 1], &prior).unwrap(), 0.0);
        let perfect = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((mi_proxy_from_posteriors(&perfect, &[0, 1], &prior).unwrap() - LN_2).abs() < 1e-9);
    }

    #[test]
    fn mi_proxy_does_not_exceed_exact_on_enumerable_channel() {
        // Sample (x, y) pairs from a channel; the Bayes posterior P(x | y) is
        // the best possible model, so its cross-entropy proxy should sit at
        // or below the true I(X; Y) up to sampling error.
        let ch = DiscreteChannel::new(
            vec![0.4, 0.35, 0.25],
            vec![vec![0.7, 0.2, 0.1, 0.0], vec![0.1, 0.6, 0.2, 0.1], vec![0.1, 0.1, 0.3, 0.5]],
        )
        .unwrap();
        let mut rng = SeedTree::new(8).rng();
        let mut post = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..20_000 {
            let x = crate::data::sample_sensitive(&ch.prior, &mut rng).unwrap();
            let y = crate::data::sample_sensitive(&ch.transition[x], &mut rng).unwrap();
            post.push(ch.posterior(y));
            truth.push(x);
        }
        let proxy = mi_proxy_from_posteriors(&post, &truth, &ch.prior).unwrap();
        assert!(proxy <= mutual_information_exact(&ch) + 0.05);
    }
}
