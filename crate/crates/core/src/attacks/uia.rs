//! User-identity inference with a prototypical embedding: an encoder is
//! trained as a classifier over shadow users, its head is dropped, and
//! candidates are ranked by embedding distance to the observed gradient.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::posterior::Standardizer;
use super::reduce::{FeatureReducer, ReducerConfig};
use crate::error::{Error, Result};
use crate::nn::{init_network, softmax, Batch, ModelParameters, NetworkSpec};
use crate::optim::Adam;
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UiaEncoderConfig {
    #[serde(default = "defaults::embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default)]
    pub reducer: ReducerConfig,
}

mod defaults {
    pub fn embedding_dim() -> usize {
        50
    }
    pub fn hidden() -> usize {
        128
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn lr() -> f64 {
        1e-3
    }
}

impl Default for UiaEncoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: defaults::embedding_dim(),
            hidden: defaults::hidden(),
            epochs: defaults::epochs(),
            lr: defaults::lr(),
            reducer: ReducerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserEncoder {
    reducer: FeatureReducer,
    scaler: Standardizer,
    /// Layers `[features, hidden, embedding, users]`; the last layer is the
    /// training head and is never used for inference.
    net: ModelParameters,
}

/// Trains the encoder end to end with cross-entropy over shadow-user labels.
pub fn train_uia_encoder(
    user_pairs: &[(Vec<f64>, usize)],
    config: &UiaEncoderConfig,
    seed: SeedTree,
) -> Result<UserEncoder> {
    let n_users = user_pairs.iter().map(|(_, u)| u + 1).max().unwrap_or(0);
    let distinct = {
        let mut seen = vec![false; n_users];
        user_pairs.iter().for_each(|(_, u)| seen[*u] = true);
        seen.iter().filter(|s| **s).count()
    };
    if distinct < 2 {
        return Err(Error::Insufficient("identity encoder needs at least two users".into()));
    }
    let mut reducer = FeatureReducer::from_config(config.reducer)?;
    let raw: Vec<&[f64]> = user_pairs.iter().map(|(g, _)| g.as_slice()).collect();
    reducer.fit(&raw)?;
    let reduced = raw.iter().map(|g| reducer.reduce(g)).collect::<Result<Vec<_>>>()?;
    let scaler = Standardizer::fit(&reduced);
    let rows: Vec<Vec<f64>> = reduced.iter().map(|r| scaler.apply(r)).collect();

    let spec = NetworkSpec::new(
        vec![rows[0].len(), config.hidden, config.embedding_dim, n_users],
        seed.child("init").seed(),
    );
    let mut net = init_network(&spec)?;
    let mut flat = net.to_flat();
    let mut opt = Adam::new(flat.len(), config.lr);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = seed.child("shuffle").rng();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(64) {
            let batch = Batch::new(chunk.iter().map(|&i| (rows[i].clone(), user_pairs[i].1)).collect());
            let (_, g) = net.loss_and_gradient(&batch, None)?;
            opt.step(&mut flat, &g);
            net = net.with_flat(&flat)?;
        }
    }
    Ok(UserEncoder { reducer, scaler, net })
}

impl UserEncoder {
    pub fn embedding_dim(&self) -> usize {
        self.net.spec().layer_widths[2]
    }

    pub fn embed(&self, g: &[f64]) -> Result<Vec<f64>> {
        let z = self.scaler.apply(&self.reducer.reduce(g)?);
        let mut acts = self.net.activations(&z)?;
        Ok(acts.swap_remove(1))
    }

    /// Accuracy of the (discarded) head on labelled pairs; a training
    /// diagnostic only.
    pub fn head_accuracy(&self, pairs: &[(Vec<f64>, usize)]) -> Result<f64> {
        let mut hits = 0;
        for (g, u) in pairs {
            let z = self.scaler.apply(&self.reducer.reduce(g)?);
            hits += usize::from(crate::metrics::argmax(&self.net.forward(&z, None)?) == *u);
        }
        Ok(hits as f64 / pairs.len().max(1) as f64)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Softmax over candidates of the negative distance to the observed embedding.
pub fn prototype_posterior(observed: &[f64], candidates: &[Vec<f64>]) -> Vec<f64> {
    let scores: Vec<f64> = candidates.iter().map(|c| -distance(observed, c)).collect();
    softmax(&scores)
}

/// Probability that each candidate's gradient came from the same user as the
/// observed one. Candidate gradients are computed by the caller at the same
/// parameters as the observation.
pub fn uia_posterior(encoder: &UserEncoder, observed: &[f64], candidate_gradients: &[Vec<f64>]) -> Result<Vec<f64>> {
    if candidate_gradients.len() < 2 {
        return Err(Error::InvalidArgument("identity inference needs at least two candidates".into()));
    }
    let obs = encoder.embed(observed)?;
    let cands = candidate_gradients
        .iter()
        .map(|g| encoder.embed(g))
        .collect::<Result<Vec<_>>>()?;
    Ok(prototype_posterior(&obs, &cands))
}
