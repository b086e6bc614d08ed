//! Per-attribute privacy audit: a distinguishing game between a record and
//! the same record with one attribute changed, observed through a clipped,
//! noised single-record gradient.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::defenses::{clip_l2, theoretical_epsilon};
use crate::error::{Error, Result};
use crate::metrics::clopper_pearson;
use crate::nn::{Batch, GradientVector, ModelParameters};
use crate::optim::Adam;
use crate::par::try_map;
use crate::rng::SeedTree;

const CONFIDENCE: f64 = 0.95;

/// How the audited attribute is laid out in the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttributeSlots {
    /// `m` consecutive indicator slots starting at `start`.
    OneHot { start: usize, m: usize },
    /// One slot holding `values[a]`.
    Scalar { index: usize, values: Vec<f64> },
}

impl AttributeSlots {
    pub fn m(&self) -> usize {
        match self {
            Self::OneHot { m, .. } => *m,
            Self::Scalar { values, .. } => values.len(),
        }
    }

    pub fn slots(&self) -> Range<usize> {
        match self {
            Self::OneHot { start, m } => *start..start + m,
            Self::Scalar { index, .. } => *index..index + 1,
        }
    }

    pub fn set(&self, x: &mut [f64], a: usize) {
        match self {
            Self::OneHot { start, m } => {
                for j in 0..*m {
                    x[start + j] = if j == a { 1.0 } else { 0.0 };
                }
            }
            Self::Scalar { index, values } => x[*index] = values[a],
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.m() < 2 {
            return Err(Error::InvalidArgument("audited attribute needs at least two values".into()));
        }
        if self.slots().end > dim {
            return Err(Error::DimensionMismatch {
                expected: self.slots().end,
                got: dim,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub clip: f64,
    pub sigma: f64,
    pub delta: f64,
    /// Trials run under each hypothesis.
    pub trials: usize,
    pub attribute: AttributeSlots,
    pub seed: u64,
    /// Multiplier on the clip bound used as per-attribute sensitivity in the
    /// analytic epsilon.
    #[serde(default = "one")]
    pub sensitivity_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl AuditConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.clip > 0.0) {
            out.push("clip must be positive".to_owned());
        }
        if !(self.sigma >= 0.0) {
            out.push("sigma must be >= 0".to_owned());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            out.push("delta must lie in (0, 1)".to_owned());
        }
        if self.trials < 100 {
            out.push("trials must be >= 100".to_owned());
        }
        if self.attribute.m() < 2 {
            out.push("audited attribute needs at least two values".to_owned());
        }
        if !(self.sensitivity_factor > 0.0) {
            out.push("sensitivity_factor must be positive".to_owned());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Mse,
    Cosine,
}

impl Distance {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Self::Mse => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64,
            Self::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftingMeta {
    pub distance: Distance,
    pub iters: usize,
    pub step: f64,
    /// Objective before each step and after the last one.
    pub objective: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryRecord {
    pub x: Vec<f64>,
    pub y: usize,
    /// Attribute value under the null hypothesis.
    pub a: usize,
    #[serde(default)]
    pub crafting: Option<CraftingMeta>,
}

/// Test statistics `|g~ - g_H0|` split by the hidden bit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditSamples {
    pub h0: Vec<f64>,
    pub h1: Vec<f64>,
    pub dim: usize,
}

fn clipped_gradient(theta: &ModelParameters, x: &[f64], y: usize, clip: f64) -> Result<GradientVector> {
    let (_, g) = theta.loss_and_gradient(&Batch::single(x.to_vec(), y), None)?;
    Ok(clip_l2(&g, clip))
}

/// Runs `trials` games per hypothesis. Under H1 the attribute is replaced by
/// a uniform draw from the other values.
pub fn run_audit_game(record: &CanaryRecord, theta: &ModelParameters, config: &AuditConfig) -> Result<AuditSamples> {
    config.validate()?;
    config.attribute.validate(record.x.len())?;
    let m = config.attribute.m();
    if record.a >= m {
        return Err(Error::LabelOutOfRange { label: record.a, classes: m });
    }
    let mut x0 = record.x.clone();
    config.attribute.set(&mut x0, record.a);
    let g0 = clipped_gradient(theta, &x0, record.y, config.clip)?;
    let alternatives: Vec<GradientVector> = (0..m)
        .filter(|&v| v != record.a)
        .map(|v| {
            let mut x1 = record.x.clone();
            config.attribute.set(&mut x1, v);
            clipped_gradient(theta, &x1, record.y, config.clip)
        })
        .collect::<Result<_>>()?;
    if config.sigma == 0.0 && alternatives.iter().all(|g| g.0 == g0.0) {
        return Err(Error::Undefined(
            "noise-free audit with identical hypothesis gradients".into(),
        ));
    }
    let noise = Normal::new(0.0, config.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let root = SeedTree::new(config.seed).child("audit");
    let stat = |b: usize, t: usize| -> Result<f64> {
        let mut rng = root.index(b as u64).index(t as u64).rng();
        let g = if b == 0 {
            &g0
        } else {
            &alternatives[rng.random_range(0..alternatives.len())]
        };
        let s: f64 = g
            .iter()
            .zip(g0.iter())
            .map(|(gi, hi)| {
                let d = gi - hi + noise.sample(&mut rng);
                d * d
            })
            .sum();
        Ok(s.sqrt())
    };
    Ok(AuditSamples {
        h0: try_map(config.trials, |t| stat(0, t))?,
        h1: try_map(config.trials, |t| stat(1, t))?,
        dim: g0.len(),
    })
}

/// Mean of the norm of `N(0, sigma^2 I_n)`.
pub fn chi_mean(sigma: f64, n: usize) -> f64 {
    let n = n as f64;
    sigma * std::f64::consts::SQRT_2 * (ln_gamma((n + 1.0) / 2.0) - ln_gamma(n / 2.0)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    pub eps_hat: f64,
    pub lo: f64,
    /// May be infinite when an error rate's lower bound is zero.
    pub hi: f64,
    pub threshold: f64,
    /// True when the test rejects H0 for statistics above the threshold.
    pub upper_tail: bool,
    pub fpr: f64,
    pub fnr: f64,
}

fn eps_terms(fpr: f64, fnr: f64, delta: f64) -> f64 {
    let term = |num: f64, den: f64| {
        if num <= 0.0 {
            0.0
        } else if den <= 0.0 {
            f64::INFINITY
        } else {
            (num / den).ln()
        }
    };
    term(1.0 - delta - fpr, fnr).max(term(1.0 - delta - fnr, fpr)).max(0.0)
}

/// Best `epsilon` lower estimate over all thresholds between pooled
/// statistics, both tail directions. Zero error rates are floored at their
/// Clopper-Pearson upper bound. The interval is deliberately conservative:
/// the low end uses the upper bounds of both error rates and the high end
/// the lower bounds.
pub fn empirical_epsilon(h0: &[f64], h1: &[f64], delta: f64) -> Result<EpsilonEstimate> {
    if h0.is_empty() || h1.is_empty() {
        return Err(Error::Insufficient("audit needs samples under both hypotheses".into()));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument("delta must lie in [0, 1)".into()));
    }
    if h0.iter().chain(h1).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("audit statistic".into()));
    }
    let (n0, n1) = (h0.len() as u64, h1.len() as u64);
    let floor0 = clopper_pearson(0, n0, CONFIDENCE)?.1;
    let floor1 = clopper_pearson(0, n1, CONFIDENCE)?.1;
    let mut pooled: Vec<(f64, bool)> = h0.iter().map(|&v| (v, false)).chain(h1.iter().map(|&v| (v, true))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Walk thresholds upward; below[i] counts each class at or below c.
    let mut best: Option<(f64, f64, bool, u64, u64)> = None;
    let (mut h0_below, mut h1_below) = (0u64, 0u64);
    let mut consider = |c: f64, h0_below: u64, h1_below: u64| {
        for upper_tail in [true, false] {
            // Rejecting H0 above c: false positives are H0 samples above c.
            let (fp, fneg) = if upper_tail {
                (n0 - h0_below, h1_below)
            } else {
                (h0_below, n1 - h1_below)
            };
            let fpr = if fp == 0 { floor0 } else { fp as f64 / n0 as f64 };
            let fnr = if fneg == 0 { floor1 } else { fneg as f64 / n1 as f64 };
            let e = eps_terms(fpr, fnr, delta);
            if best.is_none_or(|b| e > b.0) {
                best = Some((e, c, upper_tail, fp, fneg));
            }
        }
    };
    consider(pooled[0].0 - 1.0, 0, 0);
    for i in 0..pooled.len() {
        if pooled[i].1 {
            h1_below += 1;
        } else {
            h0_below += 1;
        }
        if i + 1 < pooled.len() && pooled[i + 1].0 > pooled[i].0 {
            consider(0.5 * (pooled[i].0 + pooled[i + 1].0), h0_below, h1_below);
        }
    }
    let (eps_hat, threshold, upper_tail, fp, fneg) = best.expect("at least one threshold");
    let (fpr_lo, fpr_hi) = clopper_pearson(fp, n0, CONFIDENCE)?;
    let (fnr_lo, fnr_hi) = clopper_pearson(fneg, n1, CONFIDENCE)?;
    let fpr = if fp == 0 { floor0 } else { fp as f64 / n0 as f64 };
    let fnr = if fneg == 0 { floor1 } else { fneg as f64 / n1 as f64 };
    Ok(EpsilonEstimate {
        eps_hat,
        lo: eps_terms(fpr_hi, fnr_hi, delta).min(eps_hat),
        hi: eps_terms(fpr_lo, fnr_lo, delta).max(eps_hat),
        threshold,
        upper_tail,
        fpr,
        fnr,
    })
}

/// Searches for features that make the two hypothesis gradients far apart,
/// starting from a standard normal draw. The attribute slots stay fixed, the
/// objective's gradient is taken by central differences, and Adam steps that
/// would lower the objective are backtracked.
pub fn craft_canary(
    theta: &ModelParameters,
    attribute: &AttributeSlots,
    a: usize,
    y: usize,
    clip: f64,
    distance: Distance,
    iters: usize,
    step: f64,
    seed: u64,
) -> Result<CanaryRecord> {
    let dim = theta.spec().input_dim();
    attribute.validate(dim)?;
    if a >= attribute.m() {
        return Err(Error::LabelOutOfRange { label: a, classes: attribute.m() });
    }
    let mut rng = SeedTree::new(seed).child("canary").rng();
    let mut x: Vec<f64> = (0..dim)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    attribute.set(&mut x, a);
    let fixed = attribute.slots();
    let free: Vec<usize> = (0..dim).filter(|j| !fixed.contains(j)).collect();
    let alternatives: Vec<usize> = (0..attribute.m()).filter(|&v| v != a).collect();

    let objective = |x: &[f64]| -> Result<f64> {
        let g0 = clipped_gradient(theta, x, y, clip)?;
        let mut total = 0.0;
        for &v in &alternatives {
            let mut x1 = x.to_vec();
            attribute.set(&mut x1, v);
            total += distance.eval(&g0, &clipped_gradient(theta, &x1, y, clip)?);
        }
        let f = total / alternatives.len() as f64;
        if !f.is_finite() {
            return Err(Error::NonFinite("canary objective".into()));
        }
        Ok(f)
    };

    let h = 1e-5;
    let mut params: Vec<f64> = free.iter().map(|&j| x[j]).collect();
    let mut opt = Adam::new(params.len(), step);
    let mut trace = Vec::with_capacity(iters + 1);
    let mut current = objective(&x)?;
    for _ in 0..iters {
        trace.push(current);
        let mut grad = vec![0.0; free.len()];
        for (gi, &j) in grad.iter_mut().zip(&free) {
            let orig = x[j];
            x[j] = orig + h;
            let up = objective(&x)?;
            x[j] = orig - h;
            let dn = objective(&x)?;
            x[j] = orig;
            // Ascent: hand the optimizer the negated gradient.
            *gi = -(up - dn) / (2.0 * h);
        }
        let before = params.clone();
        opt.step(&mut params, &grad);
        // Backtrack toward the previous point until the objective does not
        // drop; keep the old point if no fraction of the step helps.
        let mut accepted = false;
        for _ in 0..6 {
            for (p, &j) in params.iter().zip(&free) {
                x[j] = *p;
            }
            let f = objective(&x)?;
            if f >= current {
                current = f;
                accepted = true;
                break;
            }
            params.iter_mut().zip(&before).for_each(|(p, b)| *p = 0.5 * (*p + b));
        }
        if !accepted {
            params.copy_from_slice(&before);
            for (p, &j) in params.iter().zip(&free) {
                x[j] = *p;
            }
        }
    }
    trace.push(current);
    Ok(CanaryRecord {
        x,
        y,
        a,
        crafting: Some(CraftingMeta {
            distance,
            iters,
            step,
            objective: trace,
        }),
    })
}

/// One comparison row. `ratio` is `epsilon / (eps_hat * N)`, absent when the
/// hypotheses were indistinguishable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub clip: f64,
    pub sigma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub eps_hat: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_attributes: usize,
    pub ratio: Option<f64>,
}

pub fn audit_report(estimate: &EpsilonEstimate, config: &AuditConfig, n_attributes: usize) -> Result<AuditRow> {
    let epsilon = theoretical_epsilon(config.sensitivity_factor * config.clip, config.sigma, config.delta)?;
    let ratio = (estimate.eps_hat > 0.0).then(|| epsilon / (estimate.eps_hat * n_attributes.max(1) as f64));
    Ok(AuditRow {
        clip: config.clip,
        sigma: config.sigma,
        delta: config.delta,
        epsilon,
        eps_hat: estimate.eps_hat,
        lo: estimate.lo,
        hi: estimate.hi,
        n_attributes,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_network, NetworkSpec};

    fn theta() -> ModelParameters {
        init_network(&NetworkSpec::new(vec![6, 8, 2], 4)).unwrap()
    }

    fn config(sigma: f64, trials: usize) -> AuditConfig {
        AuditConfig {
            clip: 2.0,
            sigma,
            delta: 1e-5,
            trials,
            attribute: AttributeSlots::OneHot { start: 4, m: 2 },
            seed: 9,
            sensitivity_factor: 1.0,
        }
    }

    fn record() -> CanaryRecord {
        CanaryRecord {
            x: vec![0.5, -1.0, 0.2, 1.5, 1.0, 0.0],
            y: 1,
            a: 0,
            crafting: None,
        }
    }

    #[test]
    fn hand_rates_give_ln_18() {
        // 100 per side: 5 H0 samples above the cut, 10 H1 samples below it.
        let h0: Vec<f64> = (0..100).map(|i| if i < 95 { 0.0 } else { 10.0 }).collect();
        let h1: Vec<f64> = (0..100).map(|i| if i < 10 { 0.0 } else { 10.0 }).collect();
        let e = empirical_epsilon(&h0, &h1, 0.0).unwrap();
        assert!((e.eps_hat - 18f64.ln()).abs() < 1e-3, "{e:?}");
        assert!((e.fpr - 0.05).abs() < 1e-12 && (e.fnr - 0.1).abs() < 1e-12);
        assert!(e.lo <= e.eps_hat && e.eps_hat <= e.hi);
    }

    #[test]
    fn identical_samples_are_indistinguishable() {
        let s: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
        let e = empirical_epsilon(&s, &s, 1e-5).unwrap();
        assert!(e.eps_hat < 0.02, "{e:?}");
        assert_eq!(e.lo, 0.0);
    }

    #[test]
    fn numerator_at_zero_is_clamped() {
        assert_eq!(eps_terms(0.5, 0.5, 0.0), 0.0);
        assert_eq!(eps_terms(0.6, 0.6, 0.0), 0.0);
    }

    #[test]
    fn hypothesis_swap_is_symmetric() {
        let mut rng = SeedTree::new(3).rng();
        let h0: Vec<f64> = (0..300).map(|_| rng.random::<f64>()).collect();
        let h1: Vec<f64> = (0..300).map(|_| rng.random::<f64>() + 0.3).collect();
        let a = empirical_epsilon(&h0, &h1, 1e-5).unwrap().eps_hat;
        let b = empirical_epsilon(&h1, &h0, 1e-5).unwrap().eps_hat;
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let c = empirical_epsilon(&neg(&h0), &neg(&h1), 1e-5).unwrap().eps_hat;
        assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
    }

    #[test]
    fn null_statistic_matches_chi_mean() {
        let s = run_audit_game(&record(), &theta(), &config(0.1, 2000)).unwrap();
        let mean = s.h0.iter().sum::<f64>() / s.h0.len() as f64;
        let expect = chi_mean(0.1, s.dim);
        assert!((mean / expect - 1.0).abs() < 0.05);
        // Large n: close to sigma * sqrt(n).
        assert!((chi_mean(1.0, 10_000) / 100.0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn audit_game_is_deterministic_and_validated() {
        let a = run_audit_game(&record(), &theta(), &config(0.1, 200)).unwrap();
        let b = run_audit_game(&record(), &theta(), &config(0.1, 200)).unwrap();
        assert_eq!(a, b);
        let mut bad = config(0.1, 50);
        bad.delta = 2.0;
        let Err(Error::Config(list)) = run_audit_game(&record(), &theta(), &bad) else { panic!() };
        assert_eq!(list.len(), 2);
    }

    #[test]
    fn crafting_keeps_slots_and_climbs() {
        let t = theta();
        let attr = AttributeSlots::OneHot { start: 4, m: 2 };
        let c0 = craft_canary(&t, &attr, 0, 1, 2.0, Distance::Mse, 0, 5e-2, 1).unwrap();
        let c = craft_canary(&t, &attr, 0, 1, 2.0, Distance::Mse, 200, 5e-2, 1).unwrap();
        assert_eq!(&c.x[4..], &[1.0, 0.0]);
        let trace = &c.crafting.as_ref().unwrap().objective;
        // Zero iterations return the normal draw itself.
        assert_eq!(c0.crafting.as_ref().unwrap().objective.len(), 1);
        assert_ne!(c0.x[..4], c.x[..4]);
        assert!(trace.last().unwrap() > &trace[0]);
        let up = trace.windows(2).filter(|w| w[1] >= w[0] - 1e-12).count();
        assert!(up as f64 >= 0.95 * (trace.len() - 1) as f64, "{up} of {}", trace.len() - 1);
    }

    #[test]
    fn report_ratio_and_guard() {
        let est = EpsilonEstimate {
            eps_hat: 2.0,
            lo: 1.0,
            hi: 3.0,
            threshold: 0.0,
            upper_tail: true,
            fpr: 0.1,
            fnr: 0.1,
        };
        let row = audit_report(&est, &config(0.1, 100), 2).unwrap();
        assert!((row.epsilon - 96.90).abs() < 0.01);
        assert!((row.ratio.unwrap() - row.epsilon / 4.0).abs() < 1e-12);
        let zero = EpsilonEstimate { eps_hat: 0.0, ..est };
        assert_eq!(audit_report(&zero, &config(0.1, 100), 2).unwrap().ratio, None);
    }
}
