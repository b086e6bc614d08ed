//! Shadow gradients labelled with the sensitive variable that produced them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AttackKind;
use crate::data::{sample_conditional_batch, sample_ratio_batch, Dataset, RatioBinSpec, UserData};
use crate::defenses::{release, DefenseMechanism, GradientClassifier};
use crate::error::{Error, Result};
use crate::nn::{Batch, ModelParameters};

/// How the adversary builds its training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackTraining {
    pub kind: AttackKind,
    pub batch_size: usize,
    pub n_pairs: usize,
    /// Mechanism applied to shadow gradients; `None` for a static adversary.
    #[serde(default)]
    pub defense: Option<DefenseMechanism>,
}

/// The adaptive adversary trains on gradients passed through the same
/// mechanism the defender uses.
pub fn adaptive_wrap(training: AttackTraining, defense: DefenseMechanism) -> AttackTraining {
    AttackTraining {
        defense: Some(defense),
        ..training
    }
}

fn shadow_gradient<R: Rng + ?Sized>(
    theta: &ModelParameters,
    batch: &Batch,
    label: usize,
    defense: Option<&DefenseMechanism>,
    defender: Option<&dyn GradientClassifier>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let g = match defense {
        None => theta.loss_and_gradient(batch, None)?.1,
        Some(m) => release(theta, batch, m, defender.map(|d| (d, label)), rng)?,
    };
    Ok(g.into_inner())
}

/// `n_pairs` gradients at `theta`, label `i % classes` for pair `i`.
/// `defender` is the classifier adversarial perturbation works against.
pub fn gen_attack_training_set<R: Rng + ?Sized>(
    theta: &ModelParameters,
    shadow: &Dataset,
    training: &AttackTraining,
    defender: Option<&dyn GradientClassifier>,
    rng: &mut R,
) -> Result<Vec<(Vec<f64>, usize)>> {
    let k = training.batch_size;
    let defense = training.defense.as_ref();
    let mut out = Vec::with_capacity(training.n_pairs);
    for i in 0..training.n_pairs {
        let (label, batch) = match training.kind {
            AttackKind::Aia | AttackKind::Pia => {
                let a = i % shadow.schema().m;
                (a, sample_conditional_batch(shadow, a, k, rng)?)
            }
            AttackKind::Dia { bins, property_value } => {
                let spec = RatioBinSpec::new(bins)?;
                let b = i % bins;
                let alpha = spec.sample_ratio(b, rng);
                (b, sample_ratio_batch(shadow, property_value, alpha, k, rng)?)
            }
            AttackKind::Uia { .. } => {
                return Err(Error::InvalidArgument(
                    "identity inference pairs come from gen_uia_training_set".into(),
                ))
            }
        };
        out.push((shadow_gradient(theta, &batch, label, defense, defender, rng)?, label));
    }
    Ok(out)
}

/// Pairs for the identity encoder: label is the shadow user's position.
pub fn gen_uia_training_set<R: Rng + ?Sized>(
    theta: &ModelParameters,
    users: &[UserData],
    training: &AttackTraining,
    defender: Option<&dyn GradientClassifier>,
    rng: &mut R,
) -> Result<Vec<(Vec<f64>, usize)>> {
    if users.len() < 2 {
        return Err(Error::Insufficient("identity inference needs at least two shadow users".into()));
    }
    let defense = training.defense.as_ref();
    (0..training.n_pairs)
        .map(|i| {
            let u = i % users.len();
            let batch = users[u].sample_batch(training.batch_size, rng);
            Ok((shadow_gradient(theta, &batch, u, defense, defender, rng)?, u))
        })
        .collect()
}
