//! Inference attacks on shared gradients: posterior models, their training
//! data, ordinal and identity variants, and multi-round aggregation.

mod aggregate;
mod ordinal;
mod pairs;
mod posterior;
mod reduce;
mod uia;

use serde::{Deserialize, Serialize};

pub use aggregate::{multi_round_aggregate, normalize_scores};
pub use ordinal::{ordinal_from_scores, train_ordinal, OrdinalModel};
pub use pairs::{adaptive_wrap, gen_attack_training_set, gen_uia_training_set, AttackTraining};
pub use posterior::{train_posterior, EstimatorKind, PosteriorModel, Standardizer, TrainingMeta};
pub use reduce::{FeatureReducer, PcaBasis, ReducerConfig};
pub use uia::{prototype_posterior, train_uia_encoder, uia_posterior, UiaEncoderConfig, UserEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    /// Attribute inside the features; batch drawn conditional on it.
    Aia,
    /// Property outside the features; batch drawn conditional on it.
    Pia,
    /// Bin of the fraction of batch records holding `property_value`.
    Dia {
        #[serde(default = "default_bins")]
        bins: usize,
        #[serde(default = "default_property")]
        property_value: usize,
    },
    /// Which of `candidates` users produced the batch.
    Uia {
        #[serde(default = "default_candidates")]
        candidates: usize,
    },
}

fn default_bins() -> usize {
    6
}

fn default_property() -> usize {
    1
}

fn default_candidates() -> usize {
    5
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Aia => "aia",
            Self::Pia => "pia",
            Self::Dia { .. } => "dia",
            Self::Uia { .. } => "uia",
        }
    }

    /// Size of the inferred variable's alphabet given the dataset's `m`.
    pub fn classes(&self, dataset_m: usize) -> usize {
        match *self {
            Self::Aia | Self::Pia => dataset_m,
            Self::Dia { bins, .. } => bins,
            Self::Uia { candidates } => candidates,
        }
    }
}
