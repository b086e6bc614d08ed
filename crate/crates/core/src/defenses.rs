//! Gradient-release mechanisms applied between gradient computation and
//! what the adversary observes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, GradientVector, LatentNoise, ModelParameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseMechanism {
    Identity,
    Prune {
        rate: f64,
    },
    Sign,
    AdvPerturb {
        gamma: f64,
        step: f64,
        iters: usize,
        /// Targeted descent toward a decoy label (identity inference)
        /// instead of ascent on the true label.
        #[serde(default)]
        targeted: bool,
    },
    /// Training-time defense: switches the network to a VIB architecture and
    /// releases its raw gradients.
    Vib {
        beta: f64,
        #[serde(default = "default_latent")]
        latent_dim: usize,
    },
    DpSgd {
        clip: f64,
        sigma: f64,
    },
}

fn default_latent() -> usize {
    8
}

impl DefenseMechanism {
    pub const DEFAULT_PRUNE: Self = Self::Prune { rate: 0.99 };
    pub const DEFAULT_ADV: Self = Self::AdvPerturb {
        gamma: 0.005,
        step: 0.002,
        iters: 5,
        targeted: false,
    };
    pub const DEFAULT_VIB: Self = Self::Vib {
        beta: 0.01,
        latent_dim: 8,
    };
    pub const DEFAULT_DPSGD: Self = Self::DpSgd { clip: 2.0, sigma: 0.1 };

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_owned()));
        match *self {
            Self::Identity | Self::Sign => Ok(()),
            Self::Prune { rate } if !(0.0..=1.0).contains(&rate) => bad("prune rate must lie in [0, 1]"),
            Self::AdvPerturb { gamma, step, iters, .. } if !(gamma > 0.0 && step > 0.0 && iters >= 1) => {
                bad("adversarial perturbation needs gamma > 0, step > 0, iters >= 1")
            }
            Self::Vib { beta, latent_dim } if !(beta >= 0.0 && latent_dim >= 1) => {
                bad("vib needs beta >= 0 and latent_dim >= 1")
            }
            Self::DpSgd { clip, sigma } if !(clip > 0.0 && sigma >= 0.0) => bad("dp-sgd needs clip > 0 and sigma >= 0"),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Prune { .. } => "prune",
            Self::Sign => "sign",
            Self::AdvPerturb { .. } => "adv_perturb",
            Self::Vib { .. } => "vib",
            Self::DpSgd { .. } => "dpsgd",
        }
    }

    /// Compact parameter string for reports.
    pub fn params_label(&self) -> String {
        match *self {
            Self::Identity | Self::Sign => String::new(),
            Self::Prune { rate } => format!("rate={rate}"),
            Self::AdvPerturb { gamma, step, iters, .. } => format!("gamma={gamma};step={step};iters={iters}"),
            Self::Vib { beta, latent_dim } => format!("beta={beta};latent={latent_dim}"),
            Self::DpSgd { clip, sigma } => format!("clip={clip};sigma={sigma}"),
        }
    }
}

/// Three parameter sets per defense for the privacy-utility sweep.
pub fn privacy_utility_profiles() -> Vec<DefenseMechanism> {
    use DefenseMechanism::*;
    let mut out = vec![Identity, Sign];
    out.extend([0.90, 0.95, 0.99].map(|rate| Prune { rate }));
    out.extend([(5e-4, 2e-4), (1e-3, 3e-4), (5e-3, 2e-3)].map(|(gamma, step)| AdvPerturb {
        gamma,
        step,
        iters: 5,
        targeted: false,
    }));
    out.extend([1e-1, 1e-2, 1e-3].map(|beta| Vib { beta, latent_dim: 8 }));
    out.extend([1e-1, 2e-2, 1e-2].map(|sigma| DpSgd { clip: 2.0, sigma }));
    out
}

pub fn apply_identity(g: &GradientVector) -> GradientVector {
    g.clone()
}

/// Zeroes the `ceil(rate * n)` smallest-magnitude entries; among equal
/// magnitudes the lower index is zeroed first.
pub fn prune(g: &GradientVector, rate: f64) -> Result<GradientVector> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("prune rate {rate} outside [0, 1]")));
    }
    let n = g.len();
    let drop = ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| g[i].abs().total_cmp(&g[j].abs()).then(i.cmp(&j)));
    let mut out = g.0.clone();
    for &i in &order[..drop.min(n)] {
        out[i] = 0.0;
    }
    Ok(GradientVector(out))
}

/// Element-wise sign with `sign(0) = 0`.
pub fn sign(g: &GradientVector) -> GradientVector {
    GradientVector(
        g.iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

/// A classifier over gradient vectors that exposes the gradient of its
/// cross-entropy loss with respect to the input.
pub trait GradientClassifier {
    fn input_gradient(&self, g: &[f64], label: usize) -> Vec<f64>;
}

/// `iters` steps of l-infinity PGD inside the ball of radius `gamma` around
/// `g`: ascent on the loss of `label`, or descent toward `label` when
/// `targeted`.
pub fn adv_perturb(
    g: &GradientVector,
    label: usize,
    classifier: &dyn GradientClassifier,
    gamma: f64,
    step: f64,
    iters: usize,
    targeted: bool,
) -> GradientVector {
    let dir = if targeted { -1.0 } else { 1.0 };
    let mut cur = g.0.clone();
    for _ in 0..iters {
        let grad = classifier.input_gradient(&cur, label);
        for ((c, d), g0) in cur.iter_mut().zip(&grad).zip(g.iter()) {
            let s = if *d > 0.0 {
                1.0
            } else if *d < 0.0 {
                -1.0
            } else {
                0.0
            };
            *c = (*c + dir * step * s).clamp(g0 - gamma, g0 + gamma);
        }
    }
    GradientVector(cur)
}

/// Scales `g` by `1 / max(1, |g| / clip)`.
pub fn clip_l2(g: &GradientVector, clip: f64) -> GradientVector {
    let factor = 1.0 / (g.norm() / clip).max(1.0);
    GradientVector(g.iter().map(|v| v * factor).collect())
}

/// `(1/k) * sum_i (clip(g_i) + N(0, sigma^2 I))` with fresh noise for every
/// sample. Equivalent in distribution to one `N(0, sigma^2 / k I)` draw on the
/// clipped mean.
pub fn dpsgd<R: Rng + ?Sized>(
    per_sample: &[GradientVector],
    clip: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<GradientVector> {
    let first = per_sample.first().ok_or(Error::EmptyBatch)?;
    if !(clip > 0.0) || !(sigma >= 0.0) {
        return Err(Error::InvalidArgument("dp-sgd needs clip > 0 and sigma >= 0".into()));
    }
    let n = first.len();
    let k = per_sample.len() as f64;
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = vec![0.0; n];
    for g in per_sample {
        if g.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: g.len() });
        }
        let c = clip_l2(g, clip);
        for (o, v) in out.iter_mut().zip(c.iter()) {
            let z = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            *o += v + z;
        }
    }
    out.iter_mut().for_each(|o| *o /= k);
    Ok(GradientVector(out))
}

/// Computes the batch gradient at `params` and applies `mechanism` to it.
///
/// `adv` carries the defender's classifier and the label the perturbation
/// works against; it is required for adversarial perturbation and ignored
/// otherwise. VIB networks draw fresh latent noise from `rng`.
pub fn release<R: Rng + ?Sized>(
    params: &ModelParameters,
    batch: &Batch,
    mechanism: &DefenseMechanism,
    adv: Option<(&dyn GradientClassifier, usize)>,
    rng: &mut R,
) -> Result<GradientVector> {
    let noise = params
        .spec()
        .vib
        .map(|_| LatentNoise::draw(params.spec(), batch.len(), rng));
    let raw = |noise: Option<&LatentNoise>| params.loss_and_gradient(batch, noise).map(|(_, g)| g);
    match *mechanism {
        DefenseMechanism::Identity | DefenseMechanism::Vib { .. } => raw(noise.as_ref()),
        DefenseMechanism::Prune { rate } => prune(&raw(noise.as_ref())?, rate),
        DefenseMechanism::Sign => Ok(sign(&raw(noise.as_ref())?)),
        DefenseMechanism::AdvPerturb {
            gamma,
            step,
            iters,
            targeted,
        } => {
            let (classifier, label) = adv.ok_or_else(|| {
                Error::InvalidArgument("adversarial perturbation needs a defender classifier".into())
            })?;
            Ok(adv_perturb(&raw(noise.as_ref())?, label, classifier, gamma, step, iters, targeted))
        }
        DefenseMechanism::DpSgd { clip, sigma } => {
            let per_sample = params.per_sample_gradients(batch, noise.as_ref())?;
            dpsgd(&per_sample, clip, sigma, rng)
        }
    }
}

/// Per-step Gaussian-mechanism epsilon `clip * sqrt(2 ln(1.25 / delta)) / sigma`.
pub fn theoretical_epsilon(clip: f64, sigma: f64, delta: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Undefined("epsilon with sigma = 0".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument("delta must lie in (0, 1)".into()));
    }
    Ok(clip * (2.0 * (1.25 / delta).ln()).sqrt() / sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use proptest::prelude::*;
    use std::cell::Cell;

    fn gv(v: &[f64]) -> GradientVector {
        GradientVector(v.to_vec())
    }

    #[test]
    fn identity_is_bitwise() {
        let g = gv(&[0.1, -0.0, f64::MIN_POSITIVE, 3.0]);
        let out = apply_identity(&g);
        assert!(out.iter().zip(g.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn prune_cases() {
        let g = gv(&[0.1, -5.0, 0.01, 2.0]);
        assert_eq!(prune(&g, 0.0).unwrap(), g);
        assert_eq!(prune(&g, 0.5).unwrap().0, vec![0.0, -5.0, 0.0, 2.0]);
        assert_eq!(prune(&g, 1.0).unwrap().0, vec![0.0; 4]);
        // Ties: lower index first.
        assert_eq!(prune(&gv(&[1.0, -1.0, 1.0]), 0.34).unwrap().0, vec![0.0, 0.0, 1.0]);
        assert!(prune(&g, 1.5).is_err());
    }

    #[test]
    fn sign_cases() {
        assert_eq!(sign(&gv(&[0.3, -0.2])).0, vec![1.0, -1.0]);
        assert_eq!(sign(&gv(&[0.0, 0.0])).0, vec![0.0, 0.0]);
        let g = gv(&[1.5, -2.0, 0.0]);
        assert_eq!(sign(&sign(&g)), sign(&g));
    }

    #[test]
    fn dpsgd_cases() {
        let mut rng = SeedTree::new(0).rng();
        let out = dpsgd(&[gv(&[3.0, 4.0])], 2.0, 0.0, &mut rng).unwrap();
        assert!((out[0] - 1.2).abs() < 1e-15 && (out[1] - 1.6).abs() < 1e-15);
        let small = gv(&[0.3, -0.4]);
        assert_eq!(dpsgd(std::slice::from_ref(&small), 2.0, 0.0, &mut rng).unwrap(), small);
        assert!(dpsgd(&[], 2.0, 0.1, &mut rng).is_err());
    }

    #[test]
    fn dpsgd_noise_variance() {
        let mut rng = SeedTree::new(11).rng();
        let per = vec![gv(&[0.5, -0.5, 0.0]); 4];
        let (sigma, k, reps) = (0.3, 4.0, 10_000);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..reps {
            let o = dpsgd(&per, 2.0, sigma, &mut rng).unwrap();
            for j in 0..3 {
                sum[j] += o[j];
                sq[j] += o[j] * o[j];
            }
        }
        for j in 0..3 {
            let mean = sum[j] / reps as f64;
            let var = sq[j] / reps as f64 - mean * mean;
            let want = sigma * sigma / k;
            assert!((var / want - 1.0).abs() < 0.1, "coord {j}: {var} vs {want}");
        }
    }

    #[test]
    fn theoretical_epsilon_values() {
        assert!((theoretical_epsilon(2.0, 0.1, 1e-5).unwrap() - 96.90).abs() < 0.01);
        assert!((theoretical_epsilon(2.0, 1.5, 1e-5).unwrap() - 6.46).abs() < 0.01);
        let base = theoretical_epsilon(1.0, 1.0, 1e-5).unwrap();
        assert!((theoretical_epsilon(3.0, 1.0, 1e-5).unwrap() - 3.0 * base).abs() < 1e-12);
        assert!((theoretical_epsilon(1.0, 4.0, 1e-5).unwrap() - base / 4.0).abs() < 1e-12);
        assert!(matches!(theoretical_epsilon(2.0, 0.0, 1e-5), Err(Error::Undefined(_))));
    }

    struct Linear {
        w: Vec<f64>,
        queries: Cell<usize>,
    }

    impl GradientClassifier for Linear {
        fn input_gradient(&self, _g: &[f64], label: usize) -> Vec<f64> {
            self.queries.set(self.queries.get() + 1);
            let s = if label == 1 { -1.0 } else { 1.0 };
            self.w.iter().map(|w| s * w).collect()
        }
    }

    #[test]
    fn adv_perturb_respects_ball_and_query_count() {
        let clf = Linear {
            w: vec![1.0, -2.0, 0.0],
            queries: Cell::new(0),
        };
        let g = gv(&[0.1, 0.2, 0.3]);
        assert_eq!(adv_perturb(&g, 0, &clf, 0.005, 0.002, 0, false), g);
        let out = adv_perturb(&g, 0, &clf, 0.005, 0.002, 5, false);
        assert_eq!(clf.queries.get(), 5);
        assert!((out[0] - 0.105).abs() < 1e-15);
        assert!((out[1] - 0.195).abs() < 1e-15);
        assert_eq!(out[2], 0.3);
        let t = adv_perturb(&g, 0, &clf, 0.005, 0.002, 1, true);
        assert!((t[0] - 0.098).abs() < 1e-15);
    }

    #[test]
    fn profiles_cover_every_defense() {
        let p = privacy_utility_profiles();
        assert_eq!(p.len(), 2 + 4 * 3);
        assert!(p.iter().all(|d| d.validate().is_ok()));
        assert!(p.contains(&DefenseMechanism::DpSgd { clip: 2.0, sigma: 0.02 }));
    }

    proptest! {
        #[test]
        fn prune_zero_count_exact(v in prop::collection::vec(0.001f64..10.0, 1..200), rate in 0.0f64..=1.0) {
            let mut v = v;
            for (i, x) in v.iter_mut().enumerate() { *x += i as f64 * 1e-9; if i % 2 == 1 { *x = -*x; } }
            let g = GradientVector(v);
            let out = prune(&g, rate).unwrap();
            let zeros = out.iter().filter(|&&x| x == 0.0).count();
            prop_assert_eq!(zeros, ((rate * g.len() as f64) - 1e-9).ceil().max(0.0) as usize);
        }

        #[test]
        fn sign_is_scale_invariant(v in prop::collection::vec(-5.0f64..5.0, 1..50), c in 0.01f64..100.0) {
            let g = GradientVector(v.clone());
            let scaled = GradientVector(v.iter().map(|x| x * c).collect());
            prop_assert_eq!(sign(&g), sign(&scaled));
        }

        #[test]
        fn dpsgd_without_noise_is_bounded(
            gs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..8),
            clip in 0.1f64..5.0,
        ) {
            let per: Vec<GradientVector> = gs.into_iter().map(GradientVector).collect();
            let out = dpsgd(&per, clip, 0.0, &mut SeedTree::new(0).rng()).unwrap();
            prop_assert!(out.norm() <= clip * (1.0 + 1e-12));
        }
    }
}
