//! Synthetic joint distribution over `(x, y, a)`.
//!
//! `a ~ prior`, `y ~ Bernoulli(q(a))` with
//! `q(a) = clamp(0.5 + rho * (a - E[a]) * scale, 0.05, 0.95)` and
//! `scale = 0.5 / max_a |a - E[a]|`, and
//! `x = s_a * u_a + s_y * v_y + noise * N(0, I)` for fixed mutually
//! orthonormal directions `{u_a}` and `{v_y}` drawn once from the seed.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{sample_sensitive, validate_prior, Dataset, Record, Schema};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

const N_LABELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    pub m: usize,
    pub prior: Vec<f64>,
    pub sensitive_shift: f64,
    pub label_shift: f64,
    pub rho: f64,
    #[serde(default = "unit")]
    pub noise: f64,
    pub seed: u64,
}

fn unit() -> f64 {
    1.0
}

impl SyntheticSpec {
    /// The reference configuration used by the acceptance suite: d = 20,
    /// m = 2, uniform prior, s_a = 2, s_y = 1, rho = -0.2.
    pub fn frozen() -> Self {
        Self {
            feature_dim: 20,
            m: 2,
            prior: vec![0.5, 0.5],
            sensitive_shift: 2.0,
            label_shift: 1.0,
            rho: -0.2,
            noise: 1.0,
            seed: 20_240_917,
        }
    }

    /// Three sensitive classes, the last one carrying almost no signal in x.
    /// Not calibrated against any real dataset.
    pub fn three_class_preset(seed: u64) -> Self {
        Self {
            feature_dim: 20,
            m: 3,
            prior: vec![0.45, 0.45, 0.1],
            sensitive_shift: 2.0,
            label_shift: 1.0,
            rho: -0.2,
            noise: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::InvalidArgument("synthetic feature_dim must be >= 2".into()));
        }
        if self.m < 1 || self.prior.len() != self.m {
            return Err(Error::InvalidArgument("prior length must equal m".into()));
        }
        validate_prior(&self.prior)?;
        if self.feature_dim < self.m + N_LABELS {
            return Err(Error::InvalidArgument(format!(
                "feature_dim {} cannot host {} orthogonal directions",
                self.feature_dim,
                self.m + N_LABELS
            )));
        }
        if !(self.sensitive_shift >= 0.0 && self.label_shift >= 0.0 && self.noise >= 0.0) {
            return Err(Error::InvalidArgument("shift and noise scales must be >= 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument("rho must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn label_probability(&self, a: usize) -> f64 {
        let mean: f64 = self.prior.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
        let spread = (0..self.m)
            .map(|i| (i as f64 - mean).abs())
            .fold(0.0, f64::max);
        let scale = if spread > 0.0 { 0.5 / spread } else { 0.0 };
        (0.5 + self.rho * (a as f64 - mean) * scale).clamp(0.05, 0.95)
    }

    /// `m` sensitive directions followed by the label directions.
    pub fn directions(&self) -> Vec<Vec<f64>> {
        orthonormal_directions(
            self.feature_dim,
            self.m + N_LABELS,
            &mut SeedTree::new(self.seed).child("directions").rng(),
        )
    }

    fn schema(&self) -> Schema {
        Schema {
            feature_names: (0..self.feature_dim).map(|i| format!("x{i}")).collect(),
            label_name: "y".into(),
            n_labels: N_LABELS,
            sensitive_name: "a".into(),
            m: self.m,
            sensitive_slots: None,
        }
    }

    fn draw_record<R: Rng + ?Sized>(
        &self,
        dirs: &[Vec<f64>],
        offset: Option<&[f64]>,
        a: usize,
        rng: &mut R,
    ) -> Record {
        let y = usize::from(rng.random::<f64>() < self.label_probability(a));
        let u = &dirs[a];
        let v = &dirs[self.m + y];
        let x = (0..self.feature_dim)
            .map(|j| {
                let n: f64 = StandardNormal.sample(rng);
                self.sensitive_shift * u[j]
                    + self.label_shift * v[j]
                    + self.noise * n
                    + offset.map_or(0.0, |o| o[j])
            })
            .collect();
        Record { x, y, a, user: None }
    }
}

/// Gram-Schmidt on Gaussian draws.
fn orthonormal_directions<R: Rng + ?Sized>(d: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            out.push(v);
        }
    }
    out
}

pub fn synth_generate(spec: &SyntheticSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let dirs = spec.directions();
    let mut rng = SeedTree::new(spec.seed).child("records").rng();
    let records = (0..n)
        .map(|_| {
            let a = sample_sensitive(&spec.prior, &mut rng).expect("validated prior");
            spec.draw_record(&dirs, None, a, &mut rng)
        })
        .collect();
    Dataset::new(records, spec.schema())
}

/// Users for identity inference: each user has one sensitive value and a
/// personal mean offset of norm about `user_shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    pub n_users: usize,
    pub records_per_user: usize,
    pub user_shift: f64,
}

pub fn synth_users(spec: &SyntheticSpec, users: &UserSpec) -> Result<Dataset> {
    spec.validate()?;
    if users.n_users == 0 || users.records_per_user == 0 {
        return Err(Error::InvalidArgument("need at least one user with one record".into()));
    }
    let dirs = spec.directions();
    let tree = SeedTree::new(spec.seed).child("users");
    let mut records = Vec::with_capacity(users.n_users * users.records_per_user);
    let scale = users.user_shift / (spec.feature_dim as f64).sqrt();
    for u in 0..users.n_users {
        let mut rng = tree.index(u as u64).rng();
        let a = sample_sensitive(&spec.prior, &mut rng).expect("validated prior");
        let offset: Vec<f64> = (0..spec.feature_dim)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        for _ in 0..users.records_per_user {
            let mut r = spec.draw_record(&dirs, Some(&offset), a, &mut rng);
            r.user = Some(u);
            records.push(r);
        }
    }
    Dataset::new(records, spec.schema())
}
