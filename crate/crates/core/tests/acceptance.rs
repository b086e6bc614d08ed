//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use gradlab::analysis::{binary_entropy, fano_binary_numeric, fano_error_lower_bound, random_channel};
use gradlab::attacks::{multi_round_aggregate, ordinal_from_scores, AttackKind};
use gradlab::audit::{chi_mean, craft_canary, empirical_epsilon, run_audit_game, AttributeSlots, AuditConfig, CanaryRecord, Distance};
use gradlab::cli::{run_experiment, ExperimentConfig, Overrides};
use gradlab::data::{synth_generate, SyntheticSpec};
use gradlab::defenses::{adv_perturb, clip_l2, dpsgd, prune, sign, theoretical_epsilon, DefenseMechanism, GradientClassifier};
use gradlab::game::{
    evaluate_attack, run_defense_eval, run_inference_game, train_epoch, AdversaryMode, EvalMode, GameConfig, GameData,
};
use gradlab::metrics::{advantage, argmax, auroc, clopper_pearson};
use gradlab::nn::{init_network, Batch, GradientVector, NetworkSpec};
use gradlab::rng::SeedTree;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn normal_vec<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

fn frozen_data(sensitive_in_features: bool) -> GameData {
    let spec = SyntheticSpec::frozen();
    let mut ds = synth_generate(&spec, 10_000).expect("frozen spec generates");
    if sensitive_in_features {
        ds = ds.with_sensitive_features().expect("one-hot append");
    }
    GameData::split(&ds, (0.5, 0.2, 0.3), spec.seed).expect("split")
}

fn pia_base() -> GameConfig {
    let spec = SyntheticSpec::frozen();
    GameConfig {
        prior: Some(vec![0.5, 0.5]),
        ..GameConfig::new(AttackKind::Pia, spec.seed)
    }
}

fn c1_analytic_epsilon() -> Outcome {
    // Closed form of the Gaussian mechanism bound.
    let oracle = |clip: f64, sigma: f64, delta: f64| clip * (2.0 * (1.25f64 / delta).ln()).sqrt() / sigma;
    let a = theoretical_epsilon(2.0, 0.1, 1e-5).unwrap_or(f64::NAN);
    let b = theoretical_epsilon(2.0, 1.5, 1e-5).unwrap_or(f64::NAN);
    let ok = (a - 96.90).abs() <= 0.01
        && (b - 6.46).abs() <= 0.01
        && (a - oracle(2.0, 0.1, 1e-5)).abs() < 1e-9
        && (b - oracle(2.0, 1.5, 1e-5)).abs() < 1e-9;
    outcome(ok, format!("eps(2,0.1)={a:.4} eps(2,1.5)={b:.4} tol 0.01"))
}

fn c2_gradient_oracle() -> Outcome {
    let root = SeedTree::new(2).child("acceptance-fd");
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let mut rng = root.index(i).rng();
        let widths: Vec<usize> = vec![
            rng.random_range(2..9),
            rng.random_range(2..12),
            rng.random_range(2..8),
            rng.random_range(2..5),
        ];
        let net = init_network(&NetworkSpec::new(widths.clone(), rng.random())).expect("valid spec");
        // Zero biases can leave every pre-activation on the ReLU kink, where
        // central differences disagree with any subgradient.
        let net = net.with_flat(&normal_vec(net.param_count(), 0.5, &mut rng)).expect("same shape");
        let batch = Batch::new(
            (0..rng.random_range(1..6))
                .map(|_| (normal_vec(widths[0], 1.0, &mut rng), rng.random_range(0..widths[3])))
                .collect(),
        );
        let (_, g) = net.loss_and_gradient(&batch, None).expect("gradient");
        let flat = net.to_flat();
        for j in 0..flat.len() {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[j] += h;
            minus[j] -= h;
            let lp = net.with_flat(&plus).unwrap().loss_and_gradient(&batch, None).unwrap().0;
            let lm = net.with_flat(&minus).unwrap().loss_and_gradient(&batch, None).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over 20 networks, tol 1e-4"))
}

struct Linear(Vec<Vec<f64>>);

impl GradientClassifier for Linear {
    fn input_gradient(&self, _g: &[f64], label: usize) -> Vec<f64> {
        self.0[label].clone()
    }
}

fn c3_defense_invariants() -> Outcome {
    let root = SeedTree::new(3).child("acceptance-defenses");
    // Floating-point slack on comparisons that are exact in real arithmetic.
    let ulp = 1e-12;
    let mut failures = [0usize; 4];
    for i in 0..1000u64 {
        let mut rng = root.index(i).rng();
        let n = rng.random_range(1..64);
        let clip = rng.random_range(0.1..5.0);
        let per_sample: Vec<GradientVector> = (0..rng.random_range(1..8))
            .map(|_| GradientVector(normal_vec(n, rng.random_range(0.1..10.0), &mut rng)))
            .collect();
        let clipped_ok = per_sample.iter().all(|g| clip_l2(g, clip).norm() <= clip * (1.0 + ulp));
        let mean_ok = dpsgd(&per_sample, clip, 0.0, &mut rng).is_ok_and(|o| o.norm() <= clip * (1.0 + ulp));
        failures[0] += usize::from(!(clipped_ok && mean_ok));

        let g = &per_sample[0];
        let rate: f64 = rng.random();
        let p = prune(g, rate).expect("rate in range");
        let want = ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize;
        let zeroed: Vec<usize> = (0..n).filter(|&j| p[j] == 0.0).collect();
        let max_dropped = zeroed.iter().map(|&j| g[j].abs()).fold(0.0, f64::max);
        let kept_ok = (0..n).filter(|j| !zeroed.contains(j)).all(|j| p[j] == g[j] && g[j].abs() >= max_dropped);
        failures[1] += usize::from(!(zeroed.len() == want && kept_ok));

        let s = sign(g);
        let sign_ok = (0..n).all(|j| s[j] == if g[j] > 0.0 { 1.0 } else if g[j] < 0.0 { -1.0 } else { 0.0 });
        failures[2] += usize::from(!sign_ok);

        let gamma = rng.random_range(1e-4..1e-1);
        let w = Linear((0..3).map(|_| normal_vec(n, 1.0, &mut rng)).collect());
        let out = adv_perturb(g, rng.random_range(0..3), &w, gamma, gamma * 0.6, 7, rng.random());
        failures[3] += usize::from(!(0..n).all(|j| (out[j] - g[j]).abs() <= gamma + ulp * (1.0 + g[j].abs())));
    }
    outcome(
        failures.iter().all(|f| *f == 0),
        format!(
            "failures over 1000 instances: clip {} prune {} sign {} adv_perturb {}",
            failures[0], failures[1], failures[2], failures[3]
        ),
    )
}

fn c4_fano() -> Outcome {
    let root = SeedTree::new(4).child("acceptance-fano");
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for i in 0..1000u64 {
        let mut rng = root.index(i).rng();
        let nx = rng.random_range(2..=4);
        let ny = rng.random_range(2..=8);
        let ch = random_channel(nx, ny, &mut rng);
        // Exact Bayes error and mutual information from the joint table.
        let joint: Vec<Vec<f64>> = (0..nx).map(|x| (0..ny).map(|y| ch.prior[x] * ch.transition[x][y]).collect()).collect();
        let py: Vec<f64> = (0..ny).map(|y| (0..nx).map(|x| joint[x][y]).sum()).collect();
        let bayes = 1.0 - (0..ny).map(|y| (0..nx).map(|x| joint[x][y]).fold(0.0, f64::max)).sum::<f64>();
        let h_x: f64 = -ch.prior.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let mi: f64 = (0..nx)
            .flat_map(|x| (0..ny).map(move |y| (x, y)))
            .filter(|&(x, y)| joint[x][y] > 0.0)
            .map(|(x, y)| joint[x][y] * (joint[x][y] / (ch.prior[x] * py[y])).ln())
            .sum();
        let bound = if nx == 2 {
            fano_binary_numeric((h_x - mi).max(0.0))
        } else {
            fano_error_lower_bound(h_x, mi, nx).unwrap_or(f64::NAN)
        };
        let slack = bayes - bound;
        min_slack = min_slack.min(slack);
        if !(slack >= -1e-12) {
            violations += 1;
        }
    }
    let inverse_err = (0..=1000)
        .map(|i| {
            let e = 0.5 * i as f64 / 1000.0;
            (fano_binary_numeric(binary_entropy(e)) - e).abs()
        })
        .fold(0.0, f64::max);
    outcome(
        violations == 0 && inverse_err < 1e-8,
        format!("{violations} violations in 1000 channels (min slack {min_slack:.3e}); H2 inverse error {inverse_err:.2e}, tol 1e-8"),
    )
}

fn c5_algebra() -> Outcome {
    let root = SeedTree::new(5).child("acceptance-algebra");
    let mut worst_sum: f64 = 0.0;
    let mut mismatches = 0;
    for i in 0..10_000u64 {
        let mut rng = root.index(i).rng();
        let m = rng.random_range(3..12);
        let mut s: Vec<f64> = (0..m - 1).map(|_| rng.random()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let p = ordinal_from_scores(&s);
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());

        let m = rng.random_range(2..12);
        let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-6).collect();
        let total: f64 = raw.iter().sum();
        let post: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let prior = vec![1.0 / m as f64; m];
        let want = post
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) })
            .0;
        match multi_round_aggregate(std::slice::from_ref(&post), &prior) {
            Ok((a, _)) if a == want && a == argmax(&post) => {}
            _ => mismatches += 1,
        }
    }
    outcome(
        worst_sum <= 1e-12 && mismatches == 0,
        format!("ordinal max |sum-1| {worst_sum:.2e} (tol 1e-12); aggregate/argmax mismatches {mismatches} of 10000"),
    )
}

fn c6_batch_size(data: &GameData) -> Outcome {
    let base = pia_base();
    let mut aurocs = Vec::new();
    for k in [1, 4, 16, 64] {
        let c = GameConfig {
            batch_size: k,
            epochs: 1,
            ..base.clone()
        };
        let o = run_inference_game(&c, data).expect("game runs");
        aurocs.push(evaluate_attack(&o, EvalMode::Round(0)).expect("metrics").auroc);
    }
    let monotone = aurocs.windows(2).all(|w| w[1] >= w[0] - 0.03);
    let gap = aurocs[3] - aurocs[0];
    outcome(
        monotone && gap >= 0.10,
        format!(
            "AUROC k=1,4,16,64: {:.4} {:.4} {:.4} {:.4}; nondecreasing (tol 0.03) {monotone}; gap {gap:.4} (need >= 0.10)",
            aurocs[0], aurocs[1], aurocs[2], aurocs[3]
        ),
    )
}

fn c7_multi_round(data: &GameData) -> Outcome {
    let c = GameConfig {
        epochs: 10,
        ..pia_base()
    };
    let o = run_inference_game(&c, data).expect("game runs");
    let best_single = (0..o.rounds.len())
        .map(|i| evaluate_attack(&o, EvalMode::Round(i)).expect("metrics").auroc)
        .fold(0.0, f64::max);
    let multi = evaluate_attack(&o, EvalMode::MultiRound).expect("metrics").auroc;
    outcome(
        o.rounds.len() == 10 && multi >= best_single - 0.02,
        format!("multi-round AUROC {multi:.5} vs best single {best_single:.5} over {} rounds, tol 0.02", o.rounds.len()),
    )
}

fn c8_static_adaptive(data: &GameData) -> Outcome {
    let base = pia_base();
    let dp = DefenseMechanism::DpSgd { clip: 2.0, sigma: 1.0 };
    let rows = run_defense_eval(
        &base,
        data,
        &[DefenseMechanism::Sign, dp],
        &[AdversaryMode::Static, AdversaryMode::Adaptive],
    )
    .expect("defense eval runs");
    let adv = |d: &DefenseMechanism, m: AdversaryMode| {
        rows.iter()
            .find(|r| r.defense == *d && r.mode == m)
            .map(|r| r.report.advantage)
            .expect("cell present")
    };
    let sign_static = adv(&DefenseMechanism::Sign, AdversaryMode::Static);
    let sign_adaptive = adv(&DefenseMechanism::Sign, AdversaryMode::Adaptive);
    let dp_adaptive = adv(&dp, AdversaryMode::Adaptive);

    let identity = |mode| {
        let c = GameConfig {
            defense: DefenseMechanism::Identity,
            mode,
            ..base.clone()
        };
        run_inference_game(&c, data).expect("game runs").trials
    };
    let bits = |t: &[gradlab::game::TrialRecord]| -> Vec<u64> {
        t.iter()
            .flat_map(|r| r.posteriors.iter().flatten().chain(&r.scores).map(|v| v.to_bits()))
            .collect()
    };
    let (s, a) = (identity(AdversaryMode::Static), identity(AdversaryMode::Adaptive));
    let identical = bits(&s) == bits(&a) && s.iter().zip(&a).all(|(x, y)| x.a_hat == y.a_hat);

    let parts = [
        sign_static < 0.05,
        sign_adaptive >= sign_static + 0.20,
        dp_adaptive < 0.05,
        identical,
    ];
    outcome(
        parts.iter().all(|p| *p),
        format!(
            "sign static {sign_static:.4} (need < 0.05: {}); sign adaptive {sign_adaptive:.4} (need >= static + 0.20: {}); \
             dp-sgd adaptive {dp_adaptive:.4} (need < 0.05: {}); identity static == adaptive bitwise: {identical}",
            parts[0], parts[1], parts[2]
        ),
    )
}

fn c9_audit() -> Outcome {
    let data = frozen_data(true);
    let d = data.train.feature_dim();
    let theta0 = init_network(&NetworkSpec::new(vec![d, 32, 16, 2], 5)).expect("network");
    let theta = train_epoch(&theta0, &data.train, 0.01, 32, &DefenseMechanism::Identity, SeedTree::new(6)).expect("epoch");
    let slots = data.train.schema().sensitive_slots.clone().expect("sensitive slots");
    let attribute = AttributeSlots::OneHot {
        start: slots.start,
        m: slots.len(),
    };
    let config = AuditConfig {
        clip: 2.0,
        sigma: 0.1,
        delta: 1e-5,
        trials: 5000,
        attribute: attribute.clone(),
        seed: 1,
        sensitivity_factor: 1.0,
    };
    let crafted = craft_canary(&theta, &attribute, 0, 0, 2.0, Distance::Mse, 2000, 5e-2, 3).expect("crafting");
    let r = &data.public.records()[0];
    let random = CanaryRecord {
        x: r.x.clone(),
        y: r.y,
        a: r.a,
        crafting: None,
    };
    let eval = |rec: &CanaryRecord| {
        let s = run_audit_game(rec, &theta, &config).expect("audit game");
        let e = empirical_epsilon(&s.h0, &s.h1, config.delta).expect("estimate");
        let h0_mean = s.h0.iter().sum::<f64>() / s.h0.len() as f64;
        (e.eps_hat, h0_mean, chi_mean(config.sigma, s.dim))
    };
    let (eps_c, h0_mean, chi) = eval(&crafted);
    let (eps_r, _, _) = eval(&random);
    let analytic = theoretical_epsilon(2.0, 0.1, 1e-5).expect("analytic");
    let rel = (h0_mean - chi).abs() / chi;
    outcome(
        eps_c < analytic && eps_c >= eps_r && rel <= 0.05,
        format!(
            "crafted eps_hat {eps_c:.3} < analytic {analytic:.3}; random-record eps_hat {eps_r:.3}; \
             H0 mean {h0_mean:.4} vs chi-mean {chi:.4} (rel {rel:.2e}, tol 0.05)"
        ),
    )
}

fn c10_statistics() -> Outcome {
    let au = auroc(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap_or(f64::NAN);
    let (_, hi) = clopper_pearson(0, 10, 0.95).unwrap_or((f64::NAN, f64::NAN));
    // 0 of n: the exact upper bound solves (1 - p)^n = alpha / 2.
    let hi_oracle = 1.0 - 0.025f64.powf(0.1);
    let cases = [(1.0, 0.5, 1.0), (0.5, 0.5, 0.0), (0.75, 0.5, 0.5), (0.4, 0.5, 0.0), (0.7, 0.25, 0.6)];
    let adv_ok = cases.iter().all(|&(p, ps, want)| advantage(p, ps).is_ok_and(|v| (v - want).abs() < 1e-15));
    outcome(
        au == 0.75 && (hi - 0.3085).abs() <= 1e-3 && (hi - hi_oracle).abs() < 1e-9 && adv_ok,
        format!("AUROC hand case {au}; CP 0-of-10 upper {hi:.5} (tol 1e-3); advantage cases exact: {adv_ok}"),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("output dir")
        .map(|e| {
            let e = e.expect("entry");
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).expect("read"))
        })
        .collect();
    files.sort();
    files
}

fn run_in_pool(config: &str, threads: usize, out: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = ExperimentConfig::from_json(config).expect("valid config");
    let overrides = Overrides {
        out: Some(out.to_path_buf()),
        ..Overrides::default()
    };
    let run = || run_experiment(cfg.clone(), &overrides).expect("run");
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("pool")
        .install(run);
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        run();
    }
    snapshot(out)
}

fn c11_determinism() -> Outcome {
    let configs = [
        r#"{"command": "game", "seed": 11, "dataset": {"synthetic": {"n": 4000}},
            "game": {"attack": {"kind": "pia"}, "prior": [0.5, 0.5], "trials": 300, "epochs": 3,
                     "pairs_per_round": 300, "shadow_size": 400}}"#,
        r#"{"command": "defense-eval", "seed": 12, "dataset": {"synthetic": {"n": 3000}},
            "game": {"attack": {"kind": "aia"}, "trials": 100, "epochs": 2, "pairs_per_round": 200, "shadow_size": 300},
            "defense_eval": {"defenses": [{"kind": "sign"}, {"kind": "adv_perturb", "gamma": 0.005, "step": 0.002, "iters": 5, "targeted": false}, {"kind": "dp_sgd", "clip": 2.0, "sigma": 1.0}]}}"#,
        r#"{"command": "audit", "seed": 13, "dataset": {"synthetic": {"n": 3000, "sensitive_in_features": true}},
            "audit": {"trials": 500, "canaries": [{"kind": "crafted", "iters": 200}, {"kind": "record", "index": 3}]}}"#,
    ];
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut differing = Vec::new();
    let mut files = 0;
    for (i, cfg) in configs.iter().enumerate() {
        let a = run_in_pool(cfg, 1, &tmp.path().join(format!("{i}-a")));
        let b = run_in_pool(cfg, 4, &tmp.path().join(format!("{i}-b")));
        let c = run_in_pool(cfg, 4, &tmp.path().join(format!("{i}-c")));
        files += a.len();
        if a != b || b != c {
            differing.push(i);
        }
    }
    outcome(
        differing.is_empty(),
        format!("{files} report files from 3 commands, byte-identical at 1 and 4 threads: differing configs {differing:?}"),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        if !o.passed {
            failed += 1;
        }
        println!(
            "{} criterion {n:>2} {name}: {} [{:.1}s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    };
    report(1, "analytic_epsilon", &c1_analytic_epsilon);
    report(2, "gradient_oracle", &c2_gradient_oracle);
    report(3, "defense_invariants", &c3_defense_invariants);
    report(4, "fano_brute_force", &c4_fano);
    report(5, "ordinal_and_aggregation", &c5_algebra);
    let data = frozen_data(false);
    report(6, "trend_batch_size", &|| c6_batch_size(&data));
    report(7, "trend_multi_round", &|| c7_multi_round(&data));
    report(8, "trend_static_vs_adaptive", &|| c8_static_adaptive(&data));
    report(9, "audit_sanity", &c9_audit);
    report(10, "statistics_primitives", &c10_statistics);
    report(11, "determinism", &c11_determinism);
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        11 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
