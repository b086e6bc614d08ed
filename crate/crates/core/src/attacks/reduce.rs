//! Dimensionality reduction of gradient vectors before the posterior model.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReducerConfig {
    /// Non-overlapping windows, stride equal to the kernel.
    MaxPool { kernel: usize },
    Pca { dims: usize },
    Identity,
}

impl Default for ReducerConfig {
    fn default() -> Self {
        Self::MaxPool { kernel: 3 }
    }
}

/// Fitted principal subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `dims` orthonormal rows of length `n`.
    pub components: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureReducer {
    MaxPool { kernel: usize },
    Pca { dims: usize, basis: Option<PcaBasis> },
    Identity,
}

impl FeatureReducer {
    pub fn from_config(cfg: ReducerConfig) -> Result<Self> {
        match cfg {
            ReducerConfig::MaxPool { kernel: 0 } => {
                Err(Error::InvalidArgument("max-pool kernel must be >= 1".into()))
            }
            ReducerConfig::MaxPool { kernel } => Ok(Self::MaxPool { kernel }),
            ReducerConfig::Pca { dims: 0 } => Err(Error::InvalidArgument("pca dims must be >= 1".into())),
            ReducerConfig::Pca { dims } => Ok(Self::Pca { dims, basis: None }),
            ReducerConfig::Identity => Ok(Self::Identity),
        }
    }

    /// Fits a PCA basis on the rows; no-op for the other variants.
    pub fn fit(&mut self, rows: &[&[f64]]) -> Result<()> {
        if let Self::Pca { dims, basis } = self {
            *basis = Some(fit_pca(rows, *dims)?);
        }
        Ok(())
    }

    pub fn reduce(&self, g: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Identity => Ok(g.to_vec()),
            Self::MaxPool { kernel } => Ok(g
                .chunks(*kernel)
                .map(|w| w.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect()),
            Self::Pca { basis: None, .. } => Err(Error::NotFitted("pca reducer")),
            Self::Pca { basis: Some(b), .. } => {
                if g.len() != b.mean.len() {
                    return Err(Error::DimensionMismatch {
                        expected: b.mean.len(),
                        got: g.len(),
                    });
                }
                Ok(b.components
                    .iter()
                    .map(|c| c.iter().zip(g).zip(&b.mean).map(|((ci, gi), mi)| ci * (gi - mi)).sum())
                    .collect())
            }
        }
    }

    /// Pulls a gradient with respect to the reduced features back to the
    /// input. Max-pool routes each window's gradient to its first maximum.
    pub fn pullback(&self, g: &[f64], d_features: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Identity => Ok(d_features.to_vec()),
            Self::MaxPool { kernel } => {
                let mut out = vec![0.0; g.len()];
                for (w, (chunk, d)) in g.chunks(*kernel).zip(d_features).enumerate() {
                    let mut best = 0;
                    for (i, v) in chunk.iter().enumerate() {
                        if *v > chunk[best] {
                            best = i;
                        }
                    }
                    out[w * kernel + best] = *d;
                }
                Ok(out)
            }
            Self::Pca { basis: None, .. } => Err(Error::NotFitted("pca reducer")),
            Self::Pca { basis: Some(b), .. } => {
                let mut out = vec![0.0; g.len()];
                for (c, d) in b.components.iter().zip(d_features) {
                    out.iter_mut().zip(c).for_each(|(o, ci)| *o += d * ci);
                }
                Ok(out)
            }
        }
    }
}

fn fit_pca(rows: &[&[f64]], dims: usize) -> Result<PcaBasis> {
    let n_rows = rows.len();
    if n_rows < 2 {
        return Err(Error::Insufficient("pca needs at least two rows".into()));
    }
    let n = rows[0].len();
    let mut mean = vec![0.0; n];
    for r in rows {
        if r.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: r.len() });
        }
        mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n_rows as f64);
    let centered = DMatrix::from_fn(n_rows, n, |i, j| rows[i][j] - mean[j]);
    let dims = dims.min(n).min(n_rows);

    // Eigen-decompose the smaller of the Gram and covariance matrices.
    let mut components: Vec<(f64, Vec<f64>)> = if n_rows < n {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        (0..n_rows)
            .map(|k| {
                let u = eig.eigenvectors.column(k);
                let v = centered.transpose() * u;
                let norm = v.norm();
                let v: Vec<f64> = if norm > 0.0 { (v / norm).iter().copied().collect() } else { vec![0.0; n] };
                (eig.eigenvalues[k], v)
            })
            .collect()
    } else {
        let cov = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(cov);
        (0..n)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect()))
            .collect()
    };
    components.sort_by(|a, b| b.0.total_cmp(&a.0));
    let components = components
        .into_iter()
        .take(dims)
        .map(|(_, mut v)| {
            // Sign convention: largest-magnitude coordinate positive.
            let mut big = 0;
            for (i, x) in v.iter().enumerate() {
                if x.abs() > v[big].abs() {
                    big = i;
                }
            }
            if v[big] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(PcaBasis { mean, components })
}
