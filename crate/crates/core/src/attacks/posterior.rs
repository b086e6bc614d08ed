//! Posterior models `P(a | g)` over reduced, standardized gradient features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::reduce::{FeatureReducer, ReducerConfig};
use crate::defenses::GradientClassifier;
use crate::error::{Error, Result};
use crate::nn::{init_network, softmax, Batch, ModelParameters, NetworkSpec};
use crate::optim::Adam;
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Multinomial logistic regression, full-batch Adam with L2 penalty.
    Logistic {
        #[serde(default = "defaults::l2")]
        l2: f64,
        #[serde(default = "defaults::iters")]
        iters: usize,
        #[serde(default = "defaults::lr")]
        lr: f64,
    },
    /// One ReLU hidden layer, minibatch Adam.
    Mlp {
        #[serde(default = "defaults::hidden")]
        hidden: usize,
        #[serde(default = "defaults::epochs")]
        epochs: usize,
        #[serde(default = "defaults::mlp_lr")]
        lr: f64,
    },
}

mod defaults {
    pub fn l2() -> f64 {
        1e-2
    }
    pub fn iters() -> usize {
        200
    }
    pub fn lr() -> f64 {
        0.05
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn mlp_lr() -> f64 {
        1e-3
    }
}

impl EstimatorKind {
    pub fn logistic() -> Self {
        Self::Logistic {
            l2: defaults::l2(),
            iters: defaults::iters(),
            lr: defaults::lr(),
        }
    }

    pub fn mlp() -> Self {
        Self::Mlp {
            hidden: defaults::hidden(),
            epochs: defaults::epochs(),
            lr: defaults::mlp_lr(),
        }
    }
}

impl Default for EstimatorKind {
    fn default() -> Self {
        Self::logistic()
    }
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let n = rows.len() as f64;
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
        }
        let scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// Chain rule through the standardization.
    pub fn pullback(&self, d: &[f64]) -> Vec<f64> {
        d.iter().zip(&self.scale).map(|(v, s)| v / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Estimator {
    Logistic { classes: usize, weights: Vec<f64>, bias: Vec<f64> },
    Mlp(ModelParameters),
}

impl Estimator {
    fn logits(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Self::Logistic { weights, bias, .. } => weights
                .chunks_exact(z.len())
                .zip(bias)
                .map(|(row, b)| row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect(),
            Self::Mlp(net) => net.forward(z, None).expect("feature width fixed at training"),
        }
    }

    fn input_gradient(&self, z: &[f64], label: usize) -> Vec<f64> {
        match self {
            Self::Logistic { weights, .. } => {
                let mut p = softmax(&self.logits(z));
                p[label] -= 1.0;
                let mut out = vec![0.0; z.len()];
                for (row, d) in weights.chunks_exact(z.len()).zip(&p) {
                    out.iter_mut().zip(row).for_each(|(o, w)| *o += d * w);
                }
                out
            }
            Self::Mlp(net) => net.input_gradient(z, label, None).expect("label in range"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub round: usize,
    pub defended: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorModel {
    reducer: FeatureReducer,
    scaler: Standardizer,
    estimator: Estimator,
    classes: usize,
    pub meta: TrainingMeta,
}

fn fit_logistic(rows: &[Vec<f64>], labels: &[usize], classes: usize, l2: f64, iters: usize, lr: f64) -> Estimator {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut params = vec![0.0; classes * d + classes];
    let mut opt = Adam::new(params.len(), lr);
    let mut grad = vec![0.0; params.len()];
    for _ in 0..iters {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (w, b) = params.split_at(classes * d);
        for (x, &y) in rows.iter().zip(labels) {
            let logits: Vec<f64> = w
                .chunks_exact(d)
                .zip(b)
                .map(|(row, bb)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bb)
                .collect();
            let mut p = softmax(&logits);
            p[y] -= 1.0;
            let (gw, gb) = grad.split_at_mut(classes * d);
            for (c, dc) in p.iter().enumerate() {
                let s = dc / n;
                gw[c * d..(c + 1) * d].iter_mut().zip(x).for_each(|(g, v)| *g += s * v);
                gb[c] += s;
            }
        }
        for (g, p) in grad[..classes * d].iter_mut().zip(&params[..classes * d]) {
            *g += l2 * p;
        }
        opt.step(&mut params, &grad);
    }
    let bias = params.split_off(classes * d);
    Estimator::Logistic {
        classes,
        weights: params,
        bias,
    }
}

fn fit_mlp(
    rows: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    hidden: usize,
    epochs: usize,
    lr: f64,
    seed: SeedTree,
) -> Result<Estimator> {
    let spec = NetworkSpec::new(vec![rows[0].len(), hidden, classes], seed.child("init").seed());
    let mut net = init_network(&spec)?;
    let mut flat = net.to_flat();
    let mut opt = Adam::new(flat.len(), lr);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = seed.child("shuffle").rng();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(64) {
            let batch = Batch::new(chunk.iter().map(|&i| (rows[i].clone(), labels[i])).collect());
            let (_, g) = net.loss_and_gradient(&batch, None)?;
            opt.step(&mut flat, &g);
            net = net.with_flat(&flat)?;
        }
    }
    Ok(Estimator::Mlp(net))
}

/// Trains a posterior model on `(gradient, label)` pairs with labels in
/// `[0, classes)`.
pub fn train_posterior(
    pairs: &[(Vec<f64>, usize)],
    reducer: ReducerConfig,
    kind: EstimatorKind,
    classes: usize,
    seed: SeedTree,
) -> Result<PosteriorModel> {
    if pairs.is_empty() {
        return Err(Error::Insufficient("no training pairs".into()));
    }
    if let Some(&(_, bad)) = pairs.iter().find(|(_, y)| *y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let first = pairs[0].1;
    if pairs.iter().all(|(_, y)| *y == first) {
        return Err(Error::SingleClass);
    }
    let mut reducer = FeatureReducer::from_config(reducer)?;
    let raw: Vec<&[f64]> = pairs.iter().map(|(g, _)| g.as_slice()).collect();
    reducer.fit(&raw)?;
    let reduced = raw.iter().map(|g| reducer.reduce(g)).collect::<Result<Vec<_>>>()?;
    let scaler = Standardizer::fit(&reduced);
    let rows: Vec<Vec<f64>> = reduced.iter().map(|r| scaler.apply(r)).collect();
    let labels: Vec<usize> = pairs.iter().map(|(_, y)| *y).collect();
    let estimator = match kind {
        EstimatorKind::Logistic { l2, iters, lr } => fit_logistic(&rows, &labels, classes, l2, iters, lr),
        EstimatorKind::Mlp { hidden, epochs, lr } => fit_mlp(&rows, &labels, classes, hidden, epochs, lr, seed)?,
    };
    Ok(PosteriorModel {
        reducer,
        scaler,
        estimator,
        classes,
        meta: TrainingMeta::default(),
    })
}

impl PosteriorModel {
    pub fn classes(&self) -> usize {
        self.classes
    }

    fn features(&self, g: &[f64]) -> Result<Vec<f64>> {
        Ok(self.scaler.apply(&self.reducer.reduce(g)?))
    }

    /// Probability vector over the `classes` labels.
    pub fn predict(&self, g: &[f64]) -> Result<Vec<f64>> {
        let z = self.features(g)?;
        Ok(softmax(&self.estimator.logits(&z)))
    }
}

impl GradientClassifier for PosteriorModel {
    fn input_gradient(&self, g: &[f64], label: usize) -> Vec<f64> {
        let z = self.features(g).expect("fitted model");
        let dz = self.estimator.input_gradient(&z, label);
        self.reducer
            .pullback(g, &self.scaler.pullback(&dz))
            .expect("fitted reducer")
    }
}
