//! Quick invariant suites behind the `selftest` command.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::analysis::{binary_entropy, fano_binary_numeric, fano_brute_force};
use crate::attacks::{multi_round_aggregate, ordinal_from_scores};
use crate::defenses::{adv_perturb, clip_l2, dpsgd, prune, sign, theoretical_epsilon, GradientClassifier};
use crate::metrics::{advantage, argmax, auroc, clopper_pearson};
use crate::nn::{finite_difference_check, init_network, Batch, GradientVector, NetworkSpec};
use crate::rng::SeedTree;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn normal_vec<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

/// Linear scorer `w_label . g`, enough to drive the perturbation loop.
struct Linear(Vec<Vec<f64>>);

impl GradientClassifier for Linear {
    fn input_gradient(&self, _g: &[f64], label: usize) -> Vec<f64> {
        self.0[label].clone()
    }
}

fn gradient_oracle(seed: SeedTree) -> Check {
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let mut rng = seed.index(i).rng();
        let widths = vec![
            rng.random_range(2..8),
            rng.random_range(2..10),
            rng.random_range(2..6),
            rng.random_range(2..5),
        ];
        let classes = widths[3];
        // Random biases keep pre-activations off the ReLU kink.
        let net = match init_network(&NetworkSpec::new(widths.clone(), rng.random()))
            .and_then(|n| n.with_flat(&normal_vec(n.param_count(), 0.5, &mut rng)))
        {
            Ok(n) => n,
            Err(e) => return check("gradient_oracle", false, e.to_string()),
        };
        let batch = Batch::new(
            (0..rng.random_range(1..6))
                .map(|_| (normal_vec(widths[0], 1.0, &mut rng), rng.random_range(0..classes)))
                .collect(),
        );
        match finite_difference_check(&net, &batch, 1e-6, None) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return check("gradient_oracle", false, e.to_string()),
        }
    }
    check("gradient_oracle", worst < 1e-4, format!("max relative error {worst:.2e}"))
}

fn defense_invariants(seed: SeedTree, instances: u64) -> Vec<Check> {
    let (mut clip_ok, mut prune_ok, mut sign_ok, mut adv_ok) = (true, true, true, true);
    for i in 0..instances {
        let mut rng = seed.index(i).rng();
        let n = rng.random_range(1..40);
        let g = GradientVector(normal_vec(n, rng.random_range(0.1..10.0), &mut rng));
        let clip = rng.random_range(0.1..5.0);
        clip_ok &= clip_l2(&g, clip).norm() <= clip * (1.0 + 1e-12);
        let per_sample: Vec<GradientVector> = (0..3).map(|_| GradientVector(normal_vec(n, 3.0, &mut rng))).collect();
        clip_ok &= dpsgd(&per_sample, clip, 0.0, &mut rng).is_ok_and(|o| o.norm() <= clip * (1.0 + 1e-12));

        let rate: f64 = rng.random();
        let expected = ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize;
        prune_ok &= prune(&g, rate).is_ok_and(|p| p.iter().filter(|v| **v == 0.0).count() == expected);

        sign_ok &= sign(&g).iter().all(|v| [-1.0, 0.0, 1.0].contains(v));

        let gamma = rng.random_range(1e-4..1e-1);
        let w = Linear((0..2).map(|_| normal_vec(n, 1.0, &mut rng)).collect());
        let out = adv_perturb(&g, rng.random_range(0..2), &w, gamma, gamma * 0.7, 5, rng.random());
        adv_ok &= out.iter().zip(g.iter()).all(|(a, b)| (a - b).abs() <= gamma + 1e-12 * (1.0 + b.abs()));
    }
    vec![
        check("dpsgd_clip_norm", clip_ok, format!("{instances} instances")),
        check("prune_zero_count", prune_ok, format!("{instances} instances")),
        check("sign_range", sign_ok, format!("{instances} instances")),
        check("adv_perturb_linf", adv_ok, format!("{instances} instances")),
    ]
}

fn fano_checks(seed: u64) -> Vec<Check> {
    let brute = match fano_brute_force(1000, 4, 8, seed) {
        Ok(c) => check(
            "fano_brute_force",
            c.violations == 0,
            format!("{} violations, min slack {:.3e}", c.violations, c.min_slack),
        ),
        Err(e) => check("fano_brute_force", false, e.to_string()),
    };
    let worst = (0..=500)
        .map(|i| {
            let e = 0.5 * i as f64 / 500.0;
            (fano_binary_numeric(binary_entropy(e)) - e).abs()
        })
        .fold(0.0, f64::max);
    vec![
        brute,
        check("fano_binary_inverse", worst < 1e-8, format!("max error {worst:.2e}")),
    ]
}

fn algebra_checks(seed: SeedTree, instances: u64) -> Vec<Check> {
    let (mut ord_ok, mut agg_ok) = (true, true);
    for i in 0..instances {
        let mut rng = seed.index(i).rng();
        let m = rng.random_range(3..9);
        let mut s: Vec<f64> = (0..m - 1).map(|_| rng.random()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        ord_ok &= (ordinal_from_scores(&s).iter().sum::<f64>() - 1.0).abs() < 1e-12;

        let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let prior = vec![1.0 / m as f64; m];
        agg_ok &= multi_round_aggregate(std::slice::from_ref(&p), &prior).is_ok_and(|(a, _)| a == argmax(&p));
    }
    vec![
        check("ordinal_telescoping", ord_ok, format!("{instances} score sets")),
        check("single_round_aggregate", agg_ok, format!("{instances} posteriors")),
    ]
}

fn statistics_checks() -> Vec<Check> {
    let au = auroc(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]);
    let cp = clopper_pearson(0, 10, 0.95);
    let adv = [(1.0, 0.5, 1.0), (0.5, 0.5, 0.0), (0.75, 0.5, 0.5), (0.4, 0.5, 0.0)]
        .iter()
        .all(|&(p, ps, want)| advantage(p, ps).is_ok_and(|v| (v - want).abs() < 1e-15));
    let eps = (
        theoretical_epsilon(2.0, 0.1, 1e-5).unwrap_or(f64::NAN),
        theoretical_epsilon(2.0, 1.5, 1e-5).unwrap_or(f64::NAN),
    );
    vec![
        check("auroc_hand_case", au.as_ref().is_ok_and(|v| *v == 0.75), format!("{au:?}")),
        check(
            "clopper_pearson_zero_of_ten",
            cp.as_ref().is_ok_and(|(_, hi)| (hi - 0.3085).abs() < 1e-3),
            format!("{cp:?}"),
        ),
        check("advantage_cases", adv, String::new()),
        check(
            "analytic_epsilon",
            (eps.0 - 96.90).abs() < 0.01 && (eps.1 - 6.46).abs() < 0.01,
            format!("{:.4} {:.4}", eps.0, eps.1),
        ),
    ]
}

/// Runs every suite; smaller instance counts than the full test suite.
pub fn run_selftest(seed: u64) -> Vec<Check> {
    let root = SeedTree::new(seed).child("selftest");
    let mut out = vec![gradient_oracle(root.child("fd"))];
    out.extend(defense_invariants(root.child("defenses"), 1000));
    out.extend(fano_checks(seed));
    out.extend(algebra_checks(root.child("algebra"), 1000));
    out.extend(statistics_checks());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let checks = run_selftest(1);
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
        assert!(checks.len() >= 12);
    }
}
