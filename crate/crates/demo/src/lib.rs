//! Browser bindings. Every export takes plain numbers and returns a JSON
//! string, so the page needs no generated type glue beyond `wasm-bindgen`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use gradlab::analysis::{advantage_upper_bound, fano_binary_numeric, fano_error_lower_bound, gaussian_capacity_bound, CapacityVariant};
use gradlab::audit::{empirical_epsilon, run_audit_game, AttributeSlots, AuditConfig, CanaryRecord};
use gradlab::defenses::theoretical_epsilon;
use gradlab::nn::{init_network, NetworkSpec};
use gradlab::Result;

#[derive(Debug, Serialize, PartialEq)]
pub struct BoundPoint {
    pub mi: f64,
    pub error_lower: f64,
    /// Absent for binary secrets, where the advantage bound is undefined.
    pub advantage_upper: Option<f64>,
}

/// Lower bound on attack error and upper bound on advantage as functions of
/// the leaked information, for a uniform secret over `m` values.
pub fn bound_curve(m: usize, points: usize) -> Result<Vec<BoundPoint>> {
    if m < 2 || points < 2 {
        return Err(gradlab::Error::InvalidArgument("need m >= 2 and points >= 2".into()));
    }
    let h = (m as f64).ln();
    (0..points)
        .map(|i| {
            let mi = h * i as f64 / (points - 1) as f64;
            if m == 2 {
                Ok(BoundPoint {
                    mi,
                    error_lower: fano_binary_numeric((h - mi).max(0.0)),
                    advantage_upper: None,
                })
            } else {
                Ok(BoundPoint {
                    mi,
                    error_lower: fano_error_lower_bound(h, mi, m)?,
                    advantage_upper: Some(advantage_upper_bound(h, mi, m, 1.0 / m as f64)?),
                })
            }
        })
        .collect()
}

#[derive(Debug, Serialize, PartialEq)]
pub struct NoisePoint {
    pub sigma: f64,
    pub epsilon: f64,
    /// Per-coordinate AWGN capacity `1/2 ln(1 + P / sigma^2)` in nats, with
    /// the clipped norm spread evenly over `dim` coordinates.
    pub capacity: f64,
}

/// Analytic epsilon and channel capacity over a log-spaced range of noise
/// multipliers.
pub fn noise_tradeoff(clip: f64, delta: f64, dim: usize, sigma_min: f64, sigma_max: f64, points: usize) -> Result<Vec<NoisePoint>> {
    if !(sigma_min > 0.0 && sigma_max >= sigma_min) || points < 2 || dim == 0 {
        return Err(gradlab::Error::InvalidArgument("need 0 < sigma_min <= sigma_max, points >= 2, dim >= 1".into()));
    }
    let power = clip * clip / dim as f64;
    let ratio = (sigma_max / sigma_min).ln();
    (0..points)
        .map(|i| {
            let sigma = sigma_min * (ratio * i as f64 / (points - 1) as f64).exp();
            Ok(NoisePoint {
                sigma,
                epsilon: theoretical_epsilon(clip, sigma, delta)?,
                capacity: gaussian_capacity_bound(power, sigma, CapacityVariant::Classical)?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, PartialEq)]
pub struct AuditSummary {
    pub epsilon: f64,
    pub eps_hat: f64,
    pub lo: f64,
    pub hi: f64,
    pub bin_edges: Vec<f64>,
    pub h0_counts: Vec<usize>,
    pub h1_counts: Vec<usize>,
}

fn histogram(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let mut counts = vec![0; bins];
    for v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor().max(0.0) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    counts
}

/// Audits one clipped, noised gradient step of a small fixed network on a
/// record whose last two features hold a binary attribute.
pub fn small_audit(clip: f64, sigma: f64, trials: usize, seed: u64) -> Result<AuditSummary> {
    let theta = init_network(&NetworkSpec::new(vec![6, 8, 2], seed))?;
    let record = CanaryRecord {
        x: vec![0.8, -0.4, 1.2, 0.3, 1.0, 0.0],
        y: 1,
        a: 0,
        crafting: None,
    };
    let config = AuditConfig {
        clip,
        sigma,
        delta: 1e-5,
        trials,
        attribute: AttributeSlots::OneHot { start: 4, m: 2 },
        seed,
        sensitivity_factor: 1.0,
    };
    config.validate()?;
    let samples = run_audit_game(&record, &theta, &config)?;
    let est = empirical_epsilon(&samples.h0, &samples.h1, config.delta)?;
    let all = samples.h0.iter().chain(&samples.h1);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-12);
    let bins = 30;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    Ok(AuditSummary {
        epsilon: theoretical_epsilon(clip, sigma, config.delta)?,
        eps_hat: est.eps_hat,
        lo: est.lo,
        hi: est.hi,
        h0_counts: histogram(&samples.h0, &bin_edges),
        h1_counts: histogram(&samples.h1, &bin_edges),
        bin_edges,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = boundCurve)]
pub fn bound_curve_js(m: usize, points: usize) -> std::result::Result<String, JsError> {
    to_js(bound_curve(m, points))
}

#[wasm_bindgen(js_name = noiseTradeoff)]
pub fn noise_tradeoff_js(
    clip: f64,
    delta: f64,
    dim: usize,
    sigma_min: f64,
    sigma_max: f64,
    points: usize,
) -> std::result::Result<String, JsError> {
    to_js(noise_tradeoff(clip, delta, dim, sigma_min, sigma_max, points))
}

#[wasm_bindgen(js_name = smallAudit)]
pub fn small_audit_js(clip: f64, sigma: f64, trials: usize, seed: u64) -> std::result::Result<String, JsError> {
    to_js(small_audit(clip, sigma, trials, seed))
}
