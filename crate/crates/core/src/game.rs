//! The challenger loop: a model is trained epoch by epoch while an adversary
//! observes defended gradients of secret batches and infers the sensitive
//! variable behind them.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    gen_attack_training_set, gen_uia_training_set, multi_round_aggregate, train_ordinal, train_posterior,
    train_uia_encoder, uia_posterior, AttackKind, AttackTraining, EstimatorKind, OrdinalModel, PosteriorModel,
    ReducerConfig, TrainingMeta, UiaEncoderConfig, UserEncoder,
};
use crate::data::{
    build_shadow, sample_conditional_batch, sample_ratio_batch, sample_sensitive, split, user_partition, validate_prior,
    Dataset, Provenance, RatioBinSpec, Record, UserData,
};
use crate::defenses::{dpsgd, release, DefenseMechanism, GradientClassifier};
use crate::error::{Error, Result};
use crate::metrics::{auroc, auroc_multiclass, MetricsReport};
use crate::nn::{init_network, Batch, GradientVector, LatentNoise, ModelParameters, NetworkSpec, VibConfig};
use crate::par::try_map;
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryMode {
    /// Trains on undefended shadow gradients.
    Static,
    /// Trains on shadow gradients passed through the deployed mechanism.
    Adaptive,
}

impl AdversaryMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::Adaptive => "adaptive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    /// Hidden widths; input and output widths come from the data.
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    pub attack: AttackKind,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Observable epochs, 1-based; all epochs when absent.
    #[serde(default)]
    pub rounds: Option<Vec<usize>>,
    #[serde(default = "defaults::trials")]
    pub trials: usize,
    #[serde(default = "defaults::shadow_size")]
    pub shadow_size: usize,
    #[serde(default = "defaults::yes")]
    pub balanced_shadow: bool,
    /// Shadow gradients generated per observable round.
    #[serde(default = "defaults::pairs")]
    pub pairs_per_round: usize,
    #[serde(default = "defaults::defense")]
    pub defense: DefenseMechanism,
    #[serde(default = "defaults::mode")]
    pub mode: AdversaryMode,
    #[serde(default)]
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub reducer: ReducerConfig,
    #[serde(default)]
    pub encoder: UiaEncoderConfig,
    /// Prior over the sensitive value for attribute and property games;
    /// the training split's marginal when absent.
    #[serde(default)]
    pub prior: Option<Vec<f64>>,
    #[serde(default = "defaults::lr")]
    pub learning_rate: f64,
    #[serde(default = "defaults::train_batch")]
    pub train_batch: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    use super::*;

    pub fn hidden() -> Vec<usize> {
        vec![32, 16]
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn epochs() -> usize {
        10
    }
    pub fn trials() -> usize {
        1000
    }
    pub fn shadow_size() -> usize {
        1000
    }
    pub fn yes() -> bool {
        true
    }
    pub fn pairs() -> usize {
        1000
    }
    pub fn defense() -> DefenseMechanism {
        DefenseMechanism::Identity
    }
    pub fn mode() -> AdversaryMode {
        AdversaryMode::Static
    }
    pub fn lr() -> f64 {
        0.01
    }
    pub fn train_batch() -> usize {
        32
    }
}

impl GameConfig {
    pub fn new(attack: AttackKind, seed: u64) -> Self {
        Self {
            hidden: defaults::hidden(),
            attack,
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            rounds: None,
            trials: defaults::trials(),
            shadow_size: defaults::shadow_size(),
            balanced_shadow: true,
            pairs_per_round: defaults::pairs(),
            defense: DefenseMechanism::Identity,
            mode: AdversaryMode::Static,
            estimator: EstimatorKind::default(),
            reducer: ReducerConfig::default(),
            encoder: UiaEncoderConfig::default(),
            prior: None,
            learning_rate: defaults::lr(),
            train_batch: defaults::train_batch(),
            seed,
        }
    }

    pub fn observable_rounds(&self) -> Vec<usize> {
        self.rounds.clone().unwrap_or_else(|| (1..=self.epochs).collect())
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".to_owned());
        }
        if self.epochs == 0 {
            out.push("epochs must be >= 1".to_owned());
        }
        if self.trials == 0 {
            out.push("trials must be >= 1".to_owned());
        }
        if self.pairs_per_round < 2 {
            out.push("pairs_per_round must be >= 2".to_owned());
        }
        if self.train_batch == 0 {
            out.push("train_batch must be >= 1".to_owned());
        }
        if !(self.learning_rate > 0.0) {
            out.push("learning_rate must be positive".to_owned());
        }
        if self.hidden.contains(&0) {
            out.push("hidden widths must be >= 1".to_owned());
        }
        let rounds = self.observable_rounds();
        if rounds.is_empty() {
            out.push("rounds must be nonempty".to_owned());
        }
        if rounds.iter().any(|&r| r == 0 || r > self.epochs) {
            out.push(format!("rounds must lie in 1..={}", self.epochs));
        }
        if rounds.windows(2).any(|w| w[0] >= w[1]) {
            out.push("rounds must be strictly increasing".to_owned());
        }
        if let Err(e) = self.defense.validate() {
            out.push(e.to_string());
        }
        if let Some(p) = &self.prior {
            if let Err(e) = validate_prior(p) {
                out.push(e.to_string());
            }
        }
        match self.attack {
            AttackKind::Dia { bins, .. } if bins < 3 => out.push("dia needs bins >= 3".to_owned()),
            AttackKind::Uia { candidates } => {
                if candidates < 2 {
                    out.push("uia needs candidates >= 2".to_owned());
                }
                if matches!(self.defense, DefenseMechanism::AdvPerturb { .. }) {
                    out.push("adv_perturb has no defender classifier for identity inference".to_owned());
                }
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn network_spec(&self, input: usize, output: usize, init_seed: u64) -> NetworkSpec {
        let mut widths = vec![input];
        widths.extend(&self.hidden);
        widths.push(output);
        let spec = NetworkSpec::new(widths, init_seed);
        match self.defense {
            DefenseMechanism::Vib { beta, latent_dim } => spec.with_vib(VibConfig { latent_dim, beta }),
            _ => spec,
        }
    }
}

/// Splits the game draws from. `train` is private to the challenger; the
/// adversary only sees `public` (and shadow users).
#[derive(Debug, Clone)]
pub struct GameData {
    pub train: Dataset,
    pub test: Dataset,
    pub public: Dataset,
    pub train_users: Vec<UserData>,
    pub shadow_users: Vec<UserData>,
}

impl GameData {
    pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (train, test, public) = split(dataset, fractions, seed)?;
        Ok(Self {
            train,
            test,
            public,
            train_users: Vec::new(),
            shadow_users: Vec::new(),
        })
    }

    /// User-level partition: train users' records form the training split,
    /// shadow users' records the public split. Each train user holds out
    /// its last `test_per_user` records for the test split.
    pub fn by_users(
        dataset: &Dataset,
        min_samples: usize,
        n_train_users: usize,
        n_shadow_users: usize,
        test_per_user: usize,
        seed: u64,
    ) -> Result<Self> {
        let (mut train_users, shadow_users) =
            user_partition(dataset, min_samples, n_train_users, n_shadow_users, seed)?;
        let mut test = Vec::new();
        for u in &mut train_users {
            let keep = u.records.len().saturating_sub(test_per_user).max(1);
            test.extend(u.records.split_off(keep));
        }
        let schema = dataset.schema().clone();
        let flat = |users: &[UserData]| -> Vec<Record> { users.iter().flat_map(|u| u.records.clone()).collect() };
        Ok(Self {
            train: Dataset::with_provenance(flat(&train_users), schema.clone(), Provenance::Private)?,
            test: Dataset::with_provenance(test, schema.clone(), Provenance::Test)?,
            public: Dataset::with_provenance(flat(&shadow_users), schema, Provenance::Public)?,
            train_users,
            shadow_users,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub truth: usize,
    /// One posterior per observable round.
    pub posteriors: Vec<Vec<f64>>,
    pub a_hat: usize,
    /// Aggregated log-scores.
    pub scores: Vec<f64>,
}

/// Attack model trained for one observable round.
#[derive(Debug, Clone)]
pub enum RoundModel {
    Posterior(PosteriorModel),
    Ordinal(OrdinalModel),
    Identity(UserEncoder),
}

#[derive(Debug, Clone)]
pub struct GameOutcome {
    pub trials: Vec<TrialRecord>,
    /// Observable epochs, 1-based.
    pub rounds: Vec<usize>,
    pub prior: Vec<f64>,
    pub models: Vec<RoundModel>,
    /// Parameters after the last epoch.
    pub final_theta: ModelParameters,
}

/// Secret drawn once per trial and reused in every observable round.
struct TrialSetup {
    truth: usize,
    batch: Batch,
    candidates: Vec<Batch>,
}

fn draw_trial(config: &GameConfig, data: &GameData, prior: &[f64], seed: SeedTree) -> Result<TrialSetup> {
    let mut rng = seed.child("setup").rng();
    let k = config.batch_size;
    match config.attack {
        AttackKind::Aia | AttackKind::Pia => {
            let a = sample_sensitive(prior, &mut rng)?;
            Ok(TrialSetup {
                truth: a,
                batch: sample_conditional_batch(&data.train, a, k, &mut rng)?,
                candidates: Vec::new(),
            })
        }
        AttackKind::Dia { bins, property_value } => {
            let spec = RatioBinSpec::new(bins)?;
            let b = rng.random_range(0..bins);
            let alpha = spec.sample_ratio(b, &mut rng);
            Ok(TrialSetup {
                truth: b,
                batch: sample_ratio_batch(&data.train, property_value, alpha, k, &mut rng)?,
                candidates: Vec::new(),
            })
        }
        AttackKind::Uia { candidates } => {
            let picked = rand::seq::index::sample(&mut rng, data.train_users.len(), candidates).into_vec();
            let truth = rng.random_range(0..candidates);
            let batch = data.train_users[picked[truth]].sample_batch(k, &mut rng);
            let candidates = picked
                .iter()
                .map(|&u| data.train_users[u].sample_batch(k, &mut rng))
                .collect();
            Ok(TrialSetup {
                truth,
                batch,
                candidates,
            })
        }
    }
}

fn ensure_finite(g: &GradientVector, what: &str) -> Result<()> {
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: coordinate {i} is {}", g[i])));
    }
    Ok(())
}

/// One epoch of minibatch SGD over the whole training split in a seeded
/// shuffled order. DP-SGD replaces the update when it is the deployed
/// defense; VIB networks draw fresh latent noise per batch.
pub fn train_epoch(
    theta: &ModelParameters,
    train: &Dataset,
    learning_rate: f64,
    batch_size: usize,
    defense: &DefenseMechanism,
    seed: SeedTree,
) -> Result<ModelParameters> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = seed.rng();
    order.shuffle(&mut rng);
    let mut theta = theta.clone();
    for chunk in order.chunks(batch_size) {
        let batch = Batch::new(
            chunk
                .iter()
                .map(|&i| {
                    let r = &train.records()[i];
                    (r.x.clone(), r.y)
                })
                .collect(),
        );
        let noise = theta
            .spec()
            .vib
            .map(|_| LatentNoise::draw(theta.spec(), batch.len(), &mut rng));
        let g = match *defense {
            DefenseMechanism::DpSgd { clip, sigma } => {
                dpsgd(&theta.per_sample_gradients(&batch, noise.as_ref())?, clip, sigma, &mut rng)?
            }
            _ => theta.loss_and_gradient(&batch, noise.as_ref())?.1,
        };
        ensure_finite(&g, "training gradient")?;
        theta = theta.sgd_step(&g, learning_rate)?;
    }
    Ok(theta)
}

fn meta_model(mut m: PosteriorModel, round: usize, defended: bool) -> PosteriorModel {
    m.meta = TrainingMeta { round, defended };
    m
}

/// Classifier the defender perturbs against: trained on undefended public
/// gradients at the current parameters.
fn train_defender(
    theta: &ModelParameters,
    config: &GameConfig,
    public: &Dataset,
    classes: usize,
    round: usize,
    seed: SeedTree,
) -> Result<PosteriorModel> {
    let training = AttackTraining {
        kind: config.attack,
        batch_size: config.batch_size,
        n_pairs: config.pairs_per_round,
        defense: None,
    };
    let pairs = gen_attack_training_set(theta, public, &training, None, &mut seed.child("pairs").rng())?;
    let model = train_posterior(&pairs, config.reducer, config.estimator, classes, seed.child("fit"))?;
    Ok(meta_model(model, round, false))
}

fn train_round_model(
    theta: &ModelParameters,
    config: &GameConfig,
    data: &GameData,
    shadow: &Dataset,
    classes: usize,
    round: usize,
    defender: Option<&dyn GradientClassifier>,
    seed: SeedTree,
) -> Result<RoundModel> {
    let training = AttackTraining {
        kind: config.attack,
        batch_size: config.batch_size,
        n_pairs: config.pairs_per_round,
        defense: match config.mode {
            AdversaryMode::Static => None,
            AdversaryMode::Adaptive => Some(config.defense),
        },
    };
    let defended = training.defense.is_some();
    let mut rng = seed.child("pairs").rng();
    let fit = seed.child("fit");
    match config.attack {
        AttackKind::Aia | AttackKind::Pia => {
            let pairs = gen_attack_training_set(theta, shadow, &training, defender, &mut rng)?;
            let model = train_posterior(&pairs, config.reducer, config.estimator, classes, fit)?;
            Ok(RoundModel::Posterior(meta_model(model, round, defended)))
        }
        AttackKind::Dia { bins, .. } => {
            let pairs = gen_attack_training_set(theta, shadow, &training, defender, &mut rng)?;
            Ok(RoundModel::Ordinal(train_ordinal(&pairs, bins, config.reducer, config.estimator, fit)?))
        }
        AttackKind::Uia { .. } => {
            let pairs = gen_uia_training_set(theta, &data.shadow_users, &training, None, &mut rng)?;
            Ok(RoundModel::Identity(train_uia_encoder(&pairs, &config.encoder, fit)?))
        }
    }
}

fn attack_prior(config: &GameConfig, data: &GameData) -> Vec<f64> {
    match config.attack {
        AttackKind::Aia | AttackKind::Pia => config.prior.clone().unwrap_or_else(|| data.train.sensitive_marginal()),
        AttackKind::Dia { bins, .. } => vec![1.0 / bins as f64; bins],
        AttackKind::Uia { candidates } => vec![1.0 / candidates as f64; candidates],
    }
}

/// Runs the full game. The parameter trajectory is computed serially; the
/// trials of each observable round run in parallel on their own streams.
pub fn run_inference_game(config: &GameConfig, data: &GameData) -> Result<GameOutcome> {
    config.validate()?;
    if data.train.provenance() != Provenance::Private {
        return Err(Error::InvalidArgument("game training split must be tagged private".into()));
    }
    let classes = config.attack.classes(data.train.schema().m);
    if let AttackKind::Aia | AttackKind::Pia = config.attack {
        if let Some(p) = &config.prior {
            if p.len() != classes {
                return Err(Error::Config(vec![format!(
                    "prior has {} entries, dataset has m = {classes}",
                    p.len()
                )]));
            }
        }
    }
    if let AttackKind::Uia { candidates } = config.attack {
        if data.train_users.len() < candidates {
            return Err(Error::Insufficient(format!(
                "{} train users for {candidates} candidates",
                data.train_users.len()
            )));
        }
    }
    let prior = attack_prior(config, data);
    let root = SeedTree::new(config.seed);
    let theta_seed = root.child("theta");
    let spec = config.network_spec(
        data.train.feature_dim(),
        data.train.schema().n_labels,
        theta_seed.child("init").seed(),
    );
    let mut theta = init_network(&spec)?;

    let shadow = match config.attack {
        AttackKind::Uia { .. } => data.public.clone(),
        _ => build_shadow(
            &data.public,
            config.shadow_size,
            config.balanced_shadow,
            &mut root.child("shadow").rng(),
        )?,
    };
    let trial_seeds: Vec<SeedTree> = (0..config.trials).map(|t| root.child("trial").index(t as u64)).collect();
    let setups = try_map(config.trials, |t| draw_trial(config, data, &prior, trial_seeds[t]))?;

    let rounds = config.observable_rounds();
    let mut posteriors: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(rounds.len()); config.trials];
    let mut models = Vec::with_capacity(rounds.len());
    let adaptive = config.mode == AdversaryMode::Adaptive;
    for epoch in 1..=config.epochs {
        if rounds.contains(&epoch) {
            let defender = match config.defense {
                DefenseMechanism::AdvPerturb { .. } => Some(train_defender(
                    &theta,
                    config,
                    &data.public,
                    classes,
                    epoch,
                    root.child("defender").index(epoch as u64),
                )?),
                _ => None,
            };
            let defender_ref = defender.as_ref().map(|d| d as &dyn GradientClassifier);
            let model = train_round_model(
                &theta,
                config,
                data,
                &shadow,
                classes,
                epoch,
                defender_ref,
                root.child("attack").index(epoch as u64),
            )?;
            let round_post = try_map(config.trials, |t| {
                let setup = &setups[t];
                let seed = trial_seeds[t].child("release").index(epoch as u64);
                let mut rng = seed.rng();
                let g = release(
                    &theta,
                    &setup.batch,
                    &config.defense,
                    defender.as_ref().map(|d| (d as &dyn GradientClassifier, setup.truth)),
                    &mut rng,
                )?;
                ensure_finite(&g, &format!("trial {t}, epoch {epoch}"))?;
                match &model {
                    RoundModel::Posterior(m) => m.predict(&g),
                    RoundModel::Ordinal(m) => m.predict(&g),
                    RoundModel::Identity(enc) => {
                        let mut crng = trial_seeds[t].child("candidates").index(epoch as u64).rng();
                        let cands = setup
                            .candidates
                            .iter()
                            .map(|b| {
                                if adaptive {
                                    release(&theta, b, &config.defense, None, &mut crng).map(GradientVector::into_inner)
                                } else {
                                    Ok(theta.loss_and_gradient(b, None)?.1.into_inner())
                                }
                            })
                            .collect::<Result<Vec<_>>>()?;
                        uia_posterior(enc, &g, &cands)
                    }
                }
            })?;
            for (acc, p) in posteriors.iter_mut().zip(round_post) {
                acc.push(p);
            }
            models.push(model);
        }
        theta = train_epoch(
            &theta,
            &data.train,
            config.learning_rate,
            config.train_batch,
            &config.defense,
            theta_seed.child("epoch").index(epoch as u64),
        )?;
    }

    let trials = setups
        .iter()
        .zip(posteriors)
        .map(|(s, posteriors)| {
            let (a_hat, scores) = multi_round_aggregate(&posteriors, &prior)?;
            Ok(TrialRecord {
                truth: s.truth,
                posteriors,
                a_hat,
                scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GameOutcome {
        trials,
        rounds,
        prior,
        models,
        final_theta: theta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Position within the observable rounds.
    Round(usize),
    MultiRound,
}

pub fn evaluate_attack(outcome: &GameOutcome, mode: EvalMode) -> Result<MetricsReport> {
    if outcome.trials.is_empty() {
        return Err(Error::Insufficient("no trials to evaluate".into()));
    }
    let truths: Vec<usize> = outcome.trials.iter().map(|t| t.truth).collect();
    let posteriors: Vec<Vec<f64>> = match mode {
        EvalMode::Round(i) => {
            if i >= outcome.rounds.len() {
                return Err(Error::InvalidArgument(format!("round position {i} out of range")));
            }
            outcome.trials.iter().map(|t| t.posteriors[i].clone()).collect()
        }
        EvalMode::MultiRound => outcome
            .trials
            .iter()
            .map(|t| crate::attacks::normalize_scores(&t.scores))
            .collect(),
    };
    MetricsReport::from_posteriors(&posteriors, &truths, &outcome.prior)
}

/// Task AUROC of `theta` on a labelled split (macro one-vs-rest beyond two
/// labels).
pub fn task_auroc(theta: &ModelParameters, test: &Dataset) -> Result<f64> {
    let probs = test
        .records()
        .iter()
        .map(|r| theta.predict_proba(&r.x))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = test.records().iter().map(|r| r.y).collect();
    let n_labels = test.schema().n_labels;
    if n_labels == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        auroc(&scores, &pos)
    } else {
        auroc_multiclass(&probs, &labels, n_labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefenseEvalRow {
    pub defense: DefenseMechanism,
    pub mode: AdversaryMode,
    pub report: MetricsReport,
}

/// One multi-round report per `(defense, mode)` cell. All cells share the
/// master seed, so trial `t` sees the same secret and batch everywhere.
pub fn run_defense_eval(
    base: &GameConfig,
    data: &GameData,
    defenses: &[DefenseMechanism],
    modes: &[AdversaryMode],
) -> Result<Vec<DefenseEvalRow>> {
    let mut rows = Vec::with_capacity(defenses.len() * modes.len());
    for d in defenses {
        for &mode in modes {
            let config = GameConfig {
                defense: *d,
                mode,
                ..base.clone()
            };
            let outcome = run_inference_game(&config, data)?;
            rows.push(DefenseEvalRow {
                defense: *d,
                mode,
                report: evaluate_attack(&outcome, EvalMode::MultiRound)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub defense: DefenseMechanism,
    pub params: String,
    pub advantage: f64,
    pub task_auroc: f64,
}

/// Privacy (adversary advantage) against utility (task AUROC of the final
/// model on the test split) for each profile.
pub fn privacy_utility_sweep(
    base: &GameConfig,
    data: &GameData,
    profiles: &[DefenseMechanism],
) -> Result<Vec<SweepPoint>> {
    profiles
        .iter()
        .map(|d| {
            let config = GameConfig {
                defense: *d,
                ..base.clone()
            };
            let outcome = run_inference_game(&config, data)?;
            Ok(SweepPoint {
                defense: *d,
                params: d.params_label(),
                advantage: evaluate_attack(&outcome, EvalMode::MultiRound)?.advantage,
                task_auroc: task_auroc(&outcome.final_theta, &data.test)?,
            })
        })
        .collect()
}
