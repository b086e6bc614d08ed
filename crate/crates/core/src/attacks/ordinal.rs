//! Ordinal inference over `m` ratio bins from `m - 1` threshold classifiers.

use super::posterior::{train_posterior, EstimatorKind, PosteriorModel};
use super::reduce::ReducerConfig;
use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// Binary model `i` estimates `P(a > i | g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalModel {
    binaries: Vec<PosteriorModel>,
}

/// Recombines threshold scores `s_i = P(a > i)` into a distribution over
/// `s.len() + 1` classes. Negative masses (non-monotone scores) are clamped
/// and the rest renormalized; all-zero falls back to uniform.
pub fn ordinal_from_scores(scores: &[f64]) -> Vec<f64> {
    let m = scores.len() + 1;
    let mut p = Vec::with_capacity(m);
    p.push(1.0 - scores[0]);
    for w in scores.windows(2) {
        p.push(w[0] - w[1]);
    }
    p.push(scores[m - 2]);
    p.iter_mut().for_each(|v| *v = v.max(0.0));
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        p.iter_mut().for_each(|v| *v = 1.0 / m as f64);
    }
    p
}

/// Trains the threshold classifiers on pairs labelled with bin indices.
pub fn train_ordinal(
    pairs: &[(Vec<f64>, usize)],
    m: usize,
    reducer: ReducerConfig,
    kind: EstimatorKind,
    seed: SeedTree,
) -> Result<OrdinalModel> {
    if m < 3 {
        return Err(Error::InvalidArgument("ordinal model needs m >= 3".into()));
    }
    let binaries = (0..m - 1)
        .map(|i| {
            let relabelled: Vec<(Vec<f64>, usize)> =
                pairs.iter().map(|(g, b)| (g.clone(), usize::from(*b > i))).collect();
            train_posterior(&relabelled, reducer, kind, 2, seed.index(i as u64))
        })
        .collect::<Result<_>>()?;
    Ok(OrdinalModel { binaries })
}

impl OrdinalModel {
    pub fn classes(&self) -> usize {
        self.binaries.len() + 1
    }

    pub fn predict(&self, g: &[f64]) -> Result<Vec<f64>> {
        let scores = self
            .binaries
            .iter()
            .map(|b| b.predict(g).map(|p| p[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(ordinal_from_scores(&scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_class_hand_case() {
        let p = ordinal_from_scores(&[0.8, 0.3]);
        for (a, b) in p.iter().zip([0.2, 0.5, 0.3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_monotone_scores_are_clamped() {
        // Raw masses (0.7, -0.5, 0.8) clamp to (0.7, 0, 0.8).
        let p = ordinal_from_scores(&[0.3, 0.8]);
        assert!((p[0] - 0.7 / 1.5).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
        assert!((p[2] - 0.8 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn ordinal_model_recovers_bins() {
        // One informative coordinate equal to the bin plus small noise.
        let mut rng = SeedTree::new(8).rng();
        let pairs: Vec<(Vec<f64>, usize)> = (0..300)
            .map(|i| {
                let b = i % 4;
                let jitter: f64 = rand::Rng::random::<f64>(&mut rng) * 0.2;
                (vec![b as f64 + jitter, 1.0 - jitter], b)
            })
            .collect();
        let model = train_ordinal(&pairs, 4, ReducerConfig::Identity, EstimatorKind::logistic(), SeedTree::new(1)).unwrap();
        assert_eq!(model.classes(), 4);
        let correct = pairs
            .iter()
            .filter(|(g, b)| crate::metrics::argmax(&model.predict(g).unwrap()) == *b)
            .count();
        assert!(correct as f64 / pairs.len() as f64 > 0.9);
    }

    proptest! {
        #[test]
        fn monotone_scores_telescope(mut s in prop::collection::vec(0.0f64..1.0, 1..8)) {
            s.sort_by(|a, b| b.total_cmp(a));
            let p = ordinal_from_scores(&s);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // No clamping happened: masses match the raw differences.
            prop_assert!((p[0] - (1.0 - s[0])).abs() < 1e-12);
        }
    }
}
