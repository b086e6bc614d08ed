//! Fully-connected ReLU network with exact per-sample gradients.
//!
//! Parameters are flattened in a fixed canonical order used everywhere a
//! [`GradientVector`] is indexed: for each layer in order, the weight matrix
//! row-major with shape `(out, in)`, followed by that layer's bias vector.
//!
//! With a [`VibConfig`] the last hidden layer feeds a linear head producing
//! the mean and log-variance of a diagonal Gaussian latent; a latent sample
//! `h = mu + exp(logvar / 2) * xi` is decoded by a linear output layer, and the
//! loss gains `beta * KL(N(mu, diag(exp(logvar))) || N(0, I))`.

use std::ops::Deref;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VibConfig {
    pub latent_dim: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub vib: Option<VibConfig>,
    #[serde(default)]
    pub init_seed: u64,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, init_seed: u64) -> Self {
        Self {
            layer_widths,
            vib: None,
            init_seed,
        }
    }

    pub fn with_vib(mut self, vib: VibConfig) -> Self {
        self.vib = Some(vib);
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidSpec("need at least input and output widths".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidSpec("layer widths must be >= 1".into()));
        }
        if let Some(vib) = &self.vib {
            if vib.latent_dim == 0 {
                return Err(Error::InvalidSpec("vib latent_dim must be >= 1".into()));
            }
            if !(vib.beta >= 0.0) || !vib.beta.is_finite() {
                return Err(Error::InvalidSpec("vib beta must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    /// `(in, out)` shape of every dense layer, in flattening order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let w = &self.layer_widths;
        match self.vib {
            None => w.windows(2).map(|p| (p[0], p[1])).collect(),
            Some(vib) => {
                let hidden_end = w.len() - 1;
                let mut shapes: Vec<(usize, usize)> =
                    w[..hidden_end].windows(2).map(|p| (p[0], p[1])).collect();
                shapes.push((w[hidden_end - 1], 2 * vib.latent_dim));
                shapes.push((vib.latent_dim, w[hidden_end]));
                shapes
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.in_dim).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
        }));
    }

    fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    spec: NetworkSpec,
    layers: Vec<Dense>,
}

/// Flat gradient in the canonical parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for GradientVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for GradientVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub samples: Vec<(Vec<f64>, usize)>,
}

impl Batch {
    pub fn new(samples: Vec<(Vec<f64>, usize)>) -> Self {
        Self { samples }
    }

    pub fn single(x: Vec<f64>, y: usize) -> Self {
        Self {
            samples: vec![(x, y)],
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Standard-normal latent draws, one vector per batch sample. Empty for
/// networks without a VIB layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentNoise(pub Vec<Vec<f64>>);

impl LatentNoise {
    pub fn draw<R: Rng + ?Sized>(spec: &NetworkSpec, k: usize, rng: &mut R) -> Self {
        match spec.vib {
            None => Self::default(),
            Some(vib) => Self(
                (0..k)
                    .map(|_| {
                        (0..vib.latent_dim)
                            .map(|_| StandardNormal.sample(rng))
                            .collect()
                    })
                    .collect(),
            ),
        }
    }

    fn get(&self, i: usize) -> Option<&[f64]> {
        self.0.get(i).map(Vec::as_slice)
    }
}

pub fn init_network(spec: &NetworkSpec) -> Result<ModelParameters> {
    spec.validate()?;
    let mut rng = SeedTree::new(spec.init_seed).child("init").rng();
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(in_dim, out_dim)| {
            let scale = 1.0 / (in_dim as f64).sqrt();
            let weights = (0..in_dim * out_dim)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            Dense {
                in_dim,
                out_dim,
                weights,
                bias: vec![0.0; out_dim],
            }
        })
        .collect();
    Ok(ModelParameters {
        spec: spec.clone(),
        layers,
    })
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Forward-pass record for one sample, consumed by backprop.
struct Trace {
    /// Input to each dense layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each dense layer.
    pre: Vec<Vec<f64>>,
    /// VIB: (mu, logvar, xi).
    latent: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    logits: Vec<f64>,
}

impl ModelParameters {
    pub fn from_layers(spec: NetworkSpec, layers: Vec<Dense>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len()
            || shapes.iter().zip(&layers).any(|(&(i, o), l)| {
                l.in_dim != i || l.out_dim != o || l.weights.len() != i * o || l.bias.len() != o
            })
        {
            return Err(Error::InvalidSpec("layer shapes do not match spec".into()));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let n = self.param_count();
        if flat.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: flat.len(),
            });
        }
        let mut next = self.clone();
        let mut off = 0;
        for l in &mut next.layers {
            let wl = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + wl]);
            off += wl;
            let bl = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
        Ok(next)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let d = self.spec.input_dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64], xi: Option<&[f64]>) -> Trace {
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut latent = None;
        let mut cur = x.to_vec();
        let relu_layers = match self.spec.vib {
            None => n_layers - 1,
            Some(_) => n_layers - 2,
        };
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.apply(&cur, &mut z);
            inputs.push(std::mem::take(&mut cur));
            cur = if li < relu_layers {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            if let (Some(v), true) = (self.spec.vib, li + 2 == n_layers) {
                let mu = cur[..v.latent_dim].to_vec();
                let logvar = cur[v.latent_dim..].to_vec();
                let xi = xi.map_or_else(|| vec![0.0; v.latent_dim], <[f64]>::to_vec);
                cur = mu
                    .iter()
                    .zip(&logvar)
                    .zip(&xi)
                    .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                    .collect();
                latent = Some((mu, logvar, xi));
            }
        }
        Trace {
            inputs,
            pre,
            latent,
            logits: cur,
        }
    }

    /// Logits for one input. For VIB networks `xi` supplies the latent noise;
    /// `None` decodes the latent mean.
    pub fn forward(&self, x: &[f64], xi: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x, xi).logits)
    }

    /// Post-activation outputs of every layer (hidden and final), for use as
    /// embeddings.
    pub fn activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let t = self.trace(x, None);
        let mut acts: Vec<Vec<f64>> = t.inputs[1..].to_vec();
        acts.push(t.logits);
        Ok(acts)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(x, None)?))
    }

    fn check_label(&self, y: usize) -> Result<()> {
        let c = self.spec.output_dim();
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        Ok(())
    }

    /// Loss of one sample; adds `scale * dL/dtheta` into `grad` when given and
    /// returns `dL/dx` when `want_input` is set.
    fn backprop(
        &self,
        x: &[f64],
        y: usize,
        xi: Option<&[f64]>,
        mut grad: Option<(&mut [f64], f64)>,
        want_input: bool,
    ) -> (f64, Option<Vec<f64>>) {
        let t = self.trace(x, xi);
        let logp = log_softmax(&t.logits);
        let mut loss = -logp[y];
        let mut delta: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        delta[y] -= 1.0;

        let n_layers = self.layers.len();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.len();
        }
        let relu_layers = match self.spec.vib {
            None => n_layers - 1,
            Some(_) => n_layers - 2,
        };
        let beta = self.spec.vib.map_or(0.0, |v| v.beta);

        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let input = &t.inputs[li];
            if let Some((g, scale)) = grad.as_mut() {
                let o = offsets[li];
                let (gw, rest) = g[o..o + layer.len()].split_at_mut(layer.weights.len());
                for (r, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let sd = *scale * d;
                    for (gv, xv) in gw[r * layer.in_dim..(r + 1) * layer.in_dim]
                        .iter_mut()
                        .zip(input)
                    {
                        *gv += sd * xv;
                    }
                    rest[r] += sd;
                }
            }
            if li == 0 && !want_input {
                break;
            }
            let mut back = vec![0.0; layer.in_dim];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (bv, wv) in back
                    .iter_mut()
                    .zip(&layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim])
                {
                    *bv += d * wv;
                }
            }
            if li == 0 {
                return (loss, Some(back));
            }
            // `back` is dL/d(input of layer li) = dL/d(output of layer li-1).
            if let (Some(_), Some((mu, logvar, xi))) = (self.spec.vib, &t.latent) {
                if li == n_layers - 1 {
                    // Through the reparameterization and the KL term.
                    let latent = mu.len();
                    let mut d_stat = vec![0.0; 2 * latent];
                    let mut kl = 0.0;
                    for j in 0..latent {
                        let var = logvar[j].exp();
                        let std = (0.5 * logvar[j]).exp();
                        kl += 0.5 * (mu[j] * mu[j] + var - logvar[j] - 1.0);
                        d_stat[j] = back[j] + beta * mu[j];
                        d_stat[latent + j] =
                            back[j] * xi[j] * 0.5 * std + beta * 0.5 * (var - 1.0);
                    }
                    loss += beta * kl;
                    delta = d_stat;
                    continue;
                }
            }
            let prev_pre = &t.pre[li - 1];
            delta = if li - 1 < relu_layers {
                back.iter()
                    .zip(prev_pre)
                    .map(|(b, z)| if *z > 0.0 { *b } else { 0.0 })
                    .collect()
            } else {
                back
            };
        }
        (loss, None)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for (x, y) in &batch.samples {
            self.check_input(x)?;
            self.check_label(*y)?;
        }
        Ok(())
    }

    fn noise_for<'a>(&self, noise: Option<&'a LatentNoise>, i: usize) -> Option<&'a [f64]> {
        self.spec.vib?;
        noise.and_then(|n| n.get(i))
    }

    /// Mean softmax cross-entropy (plus `beta * KL` for VIB) and its exact
    /// gradient.
    pub fn loss_and_gradient(
        &self,
        batch: &Batch,
        noise: Option<&LatentNoise>,
    ) -> Result<(f64, GradientVector)> {
        self.check_batch(batch)?;
        let k = batch.len() as f64;
        let mut g = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        for (i, (x, y)) in batch.samples.iter().enumerate() {
            let (l, _) =
                self.backprop(x, *y, self.noise_for(noise, i), Some((&mut g, 1.0 / k)), false);
            loss += l;
        }
        Ok((loss / k, GradientVector(g)))
    }

    pub fn loss(&self, batch: &Batch, noise: Option<&LatentNoise>) -> Result<f64> {
        self.check_batch(batch)?;
        let mut loss = 0.0;
        for (i, (x, y)) in batch.samples.iter().enumerate() {
            loss += self.sample_loss(x, *y, self.noise_for(noise, i));
        }
        Ok(loss / batch.len() as f64)
    }

    fn sample_loss(&self, x: &[f64], y: usize, xi: Option<&[f64]>) -> f64 {
        let t = self.trace(x, xi);
        let mut loss = -log_softmax(&t.logits)[y];
        if let (Some(v), Some((mu, logvar, _))) = (self.spec.vib, &t.latent) {
            let kl: f64 = mu
                .iter()
                .zip(logvar)
                .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
                .sum();
            loss += v.beta * kl;
        }
        loss
    }

    pub fn per_sample_gradients(
        &self,
        batch: &Batch,
        noise: Option<&LatentNoise>,
    ) -> Result<Vec<GradientVector>> {
        self.check_batch(batch)?;
        let n = self.param_count();
        Ok(batch
            .samples
            .iter()
            .enumerate()
            .map(|(i, (x, y))| {
                let mut g = vec![0.0; n];
                self.backprop(x, *y, self.noise_for(noise, i), Some((&mut g, 1.0)), false);
                GradientVector(g)
            })
            .collect())
    }

    /// Gradient of the single-sample loss with respect to the input features.
    pub fn input_gradient(&self, x: &[f64], y: usize, xi: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_label(y)?;
        let (_, gx) = self.backprop(x, y, xi, None, true);
        Ok(gx.expect("input gradient requested"))
    }

    pub fn sgd_step(&self, g: &[f64], lr: f64) -> Result<Self> {
        let flat = self.to_flat();
        if g.len() != flat.len() {
            return Err(Error::DimensionMismatch {
                expected: flat.len(),
                got: g.len(),
            });
        }
        let next: Vec<f64> = flat.iter().zip(g).map(|(p, gv)| p - lr * gv).collect();
        self.with_flat(&next)
    }
}

/// Max over coordinates of `|analytic - central difference| / max(|analytic|, 1e-8)`.
pub fn finite_difference_check(
    params: &ModelParameters,
    batch: &Batch,
    step: f64,
    noise: Option<&LatentNoise>,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let (_, g) = params.loss_and_gradient(batch, noise)?;
    let flat = params.to_flat();
    let mut worst: f64 = 0.0;
    let mut probe = flat.clone();
    for i in 0..flat.len() {
        probe[i] = flat[i] + step;
        let up = params.with_flat(&probe)?.loss(batch, noise)?;
        probe[i] = flat[i] - step;
        let down = params.with_flat(&probe)?.loss(batch, noise)?;
        probe[i] = flat[i];
        let fd = (up - down) / (2.0 * step);
        let err = (g[i] - fd).abs() / g[i].abs().max(1e-8);
        // Coordinates whose true gradient is ~0 make the ratio meaningless;
        // fall back to absolute error there.
        let err = if g[i].abs() < 1e-8 && fd.abs() < 1e-8 {
            (g[i] - fd).abs()
        } else {
            err
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn random_batch(d: usize, classes: usize, k: usize, seed: u64) -> Batch {
        let mut rng = SeedTree::new(seed).rng();
        Batch::new(
            (0..k)
                .map(|_| {
                    let x = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    (x, rng.random_range(0..classes))
                })
                .collect(),
        )
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let spec = NetworkSpec::new(vec![4, 3, 2], 1);
        assert_eq!(spec.param_count(), 23);
        assert_eq!(init_network(&spec).unwrap().param_count(), 23);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = NetworkSpec::new(vec![2, 2], 99);
        let a = init_network(&spec).unwrap();
        let b = init_network(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.layers()[0].bias.iter().all(|&b| b == 0.0));
        assert!(init_network(&NetworkSpec::new(vec![3], 0)).is_err());
        assert!(init_network(&NetworkSpec::new(vec![3, 0, 2], 0)).is_err());
    }

    #[test]
    fn zero_network_has_zero_logits() {
        let spec = NetworkSpec::new(vec![3, 4, 2], 0);
        let p = init_network(&spec).unwrap();
        let z = p.with_flat(&vec![0.0; p.param_count()]).unwrap();
        assert_eq!(z.forward(&[1.0, -2.0, 3.0], None).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_linear_layer() {
        let spec = NetworkSpec::new(vec![2, 2], 0);
        let layer = Dense {
            in_dim: 2,
            out_dim: 2,
            weights: vec![1.0, 2.0, 3.0, 4.0],
            bias: vec![0.0, 0.0],
        };
        let p = ModelParameters::from_layers(spec, vec![layer]).unwrap();
        assert_eq!(p.forward(&[1.0, 1.0], None).unwrap(), vec![3.0, 7.0]);
        assert!(matches!(
            p.forward(&[1.0], None),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let spec = NetworkSpec::new(vec![3, 2], 0);
        let p = init_network(&spec).unwrap();
        let z = p.with_flat(&vec![0.0; p.param_count()]).unwrap();
        let (loss, _) = z
            .loss_and_gradient(&Batch::single(vec![0.5, 0.1, 0.2], 1), None)
            .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let p = init_network(&NetworkSpec::new(vec![2, 3], 0)).unwrap();
        let err = p.loss_and_gradient(&Batch::single(vec![0.0, 0.0], 3), None);
        assert!(matches!(err, Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
        assert!(matches!(
            p.loss_and_gradient(&Batch::default(), None),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = init_network(&NetworkSpec::new(vec![5, 4, 3], 11)).unwrap();
        let batch = random_batch(5, 3, 8, 12);
        let err = finite_difference_check(&p, &batch, 1e-5, None).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn single_layer_finite_difference_is_tight() {
        let p = init_network(&NetworkSpec::new(vec![4, 3], 5)).unwrap();
        let batch = random_batch(4, 3, 6, 6);
        let err = finite_difference_check(&p, &batch, 1e-5, None).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn symmetric_logits_finite_difference_is_finite() {
        let p = init_network(&NetworkSpec::new(vec![2, 2], 0)).unwrap();
        let z = p.with_flat(&vec![0.0; p.param_count()]).unwrap();
        let err = finite_difference_check(&z, &Batch::single(vec![0.0, 0.0], 0), 1e-5, None)
            .unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn per_sample_gradients_average_to_batch_gradient() {
        let p = init_network(&NetworkSpec::new(vec![5, 6, 4, 3], 3)).unwrap();
        let batch = random_batch(5, 3, 9, 4);
        let (_, g) = p.loss_and_gradient(&batch, None).unwrap();
        let per = p.per_sample_gradients(&batch, None).unwrap();
        for i in 0..g.len() {
            let mean = per.iter().map(|v| v[i]).sum::<f64>() / per.len() as f64;
            assert!((mean - g[i]).abs() < 1e-10);
        }
        let single = Batch::single(batch.samples[0].0.clone(), batch.samples[0].1);
        let (_, g1) = p.loss_and_gradient(&single, None).unwrap();
        assert_eq!(p.per_sample_gradients(&single, None).unwrap(), vec![g1]);
        let dup = Batch::new(vec![batch.samples[1].clone(), batch.samples[1].clone()]);
        let per = p.per_sample_gradients(&dup, None).unwrap();
        assert_eq!(per[0], per[1]);
    }

    #[test]
    fn per_sample_gradients_match_finite_differences() {
        let p = init_network(&NetworkSpec::new(vec![5, 4, 3], 21)).unwrap();
        let batch = random_batch(5, 3, 4, 22);
        for (x, y) in &batch.samples {
            let single = Batch::single(x.clone(), *y);
            assert!(finite_difference_check(&p, &single, 1e-5, None).unwrap() < 1e-4);
        }
    }

    #[test]
    fn sgd_step_inverse_restores_parameters() {
        let p = init_network(&NetworkSpec::new(vec![3, 4, 2], 8)).unwrap();
        let batch = random_batch(3, 2, 5, 9);
        let (_, g) = p.loss_and_gradient(&batch, None).unwrap();
        assert_eq!(p.sgd_step(&g, 0.0).unwrap(), p);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let back = p.sgd_step(&g, 0.01).unwrap().sgd_step(&neg, 0.01).unwrap();
        for (a, b) in back.to_flat().iter().zip(p.to_flat()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(p.sgd_step(&[1.0], 0.1).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = init_network(&NetworkSpec::new(vec![4, 5, 3], 31)).unwrap();
        let x = vec![0.3, -0.7, 1.1, 0.2];
        let gx = p.input_gradient(&x, 2, None).unwrap();
        for j in 0..4 {
            let mut up = x.clone();
            up[j] += 1e-6;
            let mut dn = x.clone();
            dn[j] -= 1e-6;
            let fd = (p.loss(&Batch::single(up, 2), None).unwrap()
                - p.loss(&Batch::single(dn, 2), None).unwrap())
                / 2e-6;
            assert!((fd - gx[j]).abs() < 1e-6, "{fd} vs {}", gx[j]);
        }
    }

    #[test]
    fn vib_network_gradient_and_determinism() {
        let spec = NetworkSpec::new(vec![5, 6, 3], 41).with_vib(VibConfig {
            latent_dim: 3,
            beta: 0.1,
        });
        let p = init_network(&spec).unwrap();
        assert_eq!(p.param_count(), 5 * 6 + 6 + 6 * 6 + 6 + 3 * 3 + 3);
        let batch = random_batch(5, 3, 6, 42);
        let noise = LatentNoise::draw(&spec, batch.len(), &mut SeedTree::new(1).rng());
        let noise2 = LatentNoise::draw(&spec, batch.len(), &mut SeedTree::new(1).rng());
        assert_eq!(noise, noise2);
        let x = &batch.samples[0].0;
        assert_eq!(
            p.forward(x, Some(&noise.0[0])).unwrap(),
            p.forward(x, Some(&noise2.0[0])).unwrap()
        );
        let err = finite_difference_check(&p, &batch, 1e-5, Some(&noise)).unwrap();
        assert!(err < 1e-4, "vib max relative error {err}");
    }

    #[test]
    fn vib_with_zero_beta_has_plain_cross_entropy() {
        let spec = NetworkSpec::new(vec![4, 5, 2], 7).with_vib(VibConfig {
            latent_dim: 2,
            beta: 0.0,
        });
        let p = init_network(&spec).unwrap();
        let batch = random_batch(4, 2, 5, 8);
        let noise = LatentNoise::draw(&spec, batch.len(), &mut SeedTree::new(2).rng());
        let loss = p.loss(&batch, Some(&noise)).unwrap();
        let ce: f64 = batch
            .samples
            .iter()
            .enumerate()
            .map(|(i, (x, y))| -log_softmax(&p.forward(x, Some(&noise.0[i])).unwrap())[*y])
            .sum::<f64>()
            / batch.len() as f64;
        assert!((loss - ce).abs() < 1e-14);

        let with_beta = p.with_flat(&p.to_flat()).unwrap();
        let mut spec_b = spec.clone();
        spec_b.vib = Some(VibConfig {
            latent_dim: 2,
            beta: 0.5,
        });
        let pb = ModelParameters::from_layers(spec_b, with_beta.layers().to_vec()).unwrap();
        assert!(pb.loss(&batch, Some(&noise)).unwrap() >= loss);
    }
}
