//! Config-driven experiment runner behind the `gradlab` binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{advantage_upper_bound, fano_binary_numeric, fano_brute_force, fano_error_lower_bound};
use crate::audit::{
    audit_report, craft_canary, empirical_epsilon, run_audit_game, AttributeSlots, AuditConfig, CanaryRecord, Distance,
};
use crate::data::{load_csv, synth_generate, synth_users, CsvSchema, Dataset, SyntheticSpec, UserSpec};
use crate::defenses::{privacy_utility_profiles, DefenseMechanism};
use crate::error::{Error, Result};
use crate::game::{
    evaluate_attack, privacy_utility_sweep, run_defense_eval, run_inference_game, train_epoch, AdversaryMode,
    EvalMode, GameConfig, GameData,
};
use crate::metrics::MetricsReport;
use crate::nn::{init_network, NetworkSpec};
use crate::report::{emit_report, format_sig, Manifest, ReportFormat, ReportRow};
use crate::rng::SeedTree;
use crate::selftest::run_selftest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Game,
    DefenseEval,
    Sweep,
    Audit,
    Fano,
    Selftest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default = "SyntheticSpec::frozen")]
    pub spec: SyntheticSpec,
    #[serde(default = "defaults::n")]
    pub n: usize,
    /// Generate per-user data for identity inference.
    #[serde(default)]
    pub users: Option<UserSpec>,
    #[serde(default)]
    pub sensitive_in_features: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub schema: CsvSchema,
}

/// Exactly one source per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSource),
    Csv(CsvSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "defaults::fractions")]
    pub fractions: (f64, f64, f64),
    #[serde(default = "defaults::min_samples")]
    pub min_user_samples: usize,
    #[serde(default = "defaults::users")]
    pub train_users: usize,
    #[serde(default = "defaults::users")]
    pub shadow_users: usize,
    #[serde(default = "defaults::test_per_user")]
    pub test_per_user: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: defaults::fractions(),
            min_user_samples: defaults::min_samples(),
            train_users: defaults::users(),
            shadow_users: defaults::users(),
            test_per_user: defaults::test_per_user(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseEvalPayload {
    #[serde(default = "defaults::defenses")]
    pub defenses: Vec<DefenseMechanism>,
    #[serde(default = "defaults::modes")]
    pub modes: Vec<AdversaryMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPayload {
    #[serde(default = "privacy_utility_profiles")]
    pub profiles: Vec<DefenseMechanism>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSetting {
    pub clip: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CanarySource {
    Crafted {
        #[serde(default = "defaults::craft_iters")]
        iters: usize,
        #[serde(default = "defaults::craft_step")]
        step: f64,
        #[serde(default = "defaults::distance")]
        distance: Distance,
        #[serde(default)]
        a: usize,
        #[serde(default)]
        y: usize,
    },
    /// A record of the public split, by position.
    Record { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditPayload {
    #[serde(default = "defaults::audit_settings")]
    pub settings: Vec<AuditSetting>,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    #[serde(default = "defaults::audit_trials")]
    pub trials: usize,
    #[serde(default = "defaults::canaries")]
    pub canaries: Vec<CanarySource>,
    /// Epochs of plain SGD before the audited step.
    #[serde(default = "defaults::one")]
    pub train_epochs: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "defaults::lr")]
    pub learning_rate: f64,
    /// Attribute count used to normalize the reported ratio.
    #[serde(default = "defaults::one")]
    pub n_attributes: usize,
    #[serde(default = "defaults::unit")]
    pub sensitivity_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanoPayload {
    #[serde(default = "defaults::channels")]
    pub channels: usize,
    #[serde(default = "defaults::max_inputs")]
    pub max_inputs: usize,
    #[serde(default = "defaults::max_outputs")]
    pub max_outputs: usize,
    /// Alphabet sizes for the bound curves (uniform prior).
    #[serde(default = "defaults::curve_m")]
    pub curve_m: Vec<usize>,
    #[serde(default = "defaults::curve_points")]
    pub curve_points: usize,
}

mod defaults {
    use super::*;

    pub fn n() -> usize {
        10_000
    }
    pub fn fractions() -> (f64, f64, f64) {
        (0.5, 0.2, 0.3)
    }
    pub fn min_samples() -> usize {
        20
    }
    pub fn users() -> usize {
        50
    }
    pub fn test_per_user() -> usize {
        5
    }
    pub fn defenses() -> Vec<DefenseMechanism> {
        vec![
            DefenseMechanism::Identity,
            DefenseMechanism::DEFAULT_PRUNE,
            DefenseMechanism::Sign,
            DefenseMechanism::DEFAULT_ADV,
            DefenseMechanism::DEFAULT_VIB,
            DefenseMechanism::DEFAULT_DPSGD,
        ]
    }
    pub fn modes() -> Vec<AdversaryMode> {
        vec![AdversaryMode::Static, AdversaryMode::Adaptive]
    }
    pub fn craft_iters() -> usize {
        2000
    }
    pub fn craft_step() -> f64 {
        5e-2
    }
    pub fn distance() -> Distance {
        Distance::Mse
    }
    pub fn audit_settings() -> Vec<AuditSetting> {
        vec![AuditSetting { clip: 2.0, sigma: 0.1 }]
    }
    pub fn delta() -> f64 {
        1e-5
    }
    pub fn audit_trials() -> usize {
        5000
    }
    pub fn canaries() -> Vec<CanarySource> {
        vec![
            CanarySource::Crafted {
                iters: craft_iters(),
                step: craft_step(),
                distance: distance(),
                a: 0,
                y: 0,
            },
            CanarySource::Record { index: 0 },
        ]
    }
    pub fn one() -> usize {
        1
    }
    pub fn unit() -> f64 {
        1.0
    }
    pub fn hidden() -> Vec<usize> {
        vec![32, 16]
    }
    pub fn lr() -> f64 {
        0.01
    }
    pub fn channels() -> usize {
        1000
    }
    pub fn max_inputs() -> usize {
        4
    }
    pub fn max_outputs() -> usize {
        8
    }
    pub fn curve_m() -> Vec<usize> {
        vec![2, 4, 10]
    }
    pub fn curve_points() -> usize {
        21
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seed: u64,
    #[serde(default)]
    pub dataset: Option<DatasetSource>,
    #[serde(default)]
    pub split: SplitConfig,
    /// Game settings; its `seed` is replaced by the experiment seed.
    #[serde(default)]
    pub game: Option<GameConfig>,
    #[serde(default)]
    pub defense_eval: Option<DefenseEvalPayload>,
    #[serde(default)]
    pub sweep: Option<SweepPayload>,
    #[serde(default)]
    pub audit: Option<AuditPayload>,
    #[serde(default)]
    pub fano: Option<FanoPayload>,
    #[serde(default)]
    pub format: ReportFormat,
    #[serde(default = "defaults::one")]
    pub repeats: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

const TOP_LEVEL: &[&str] = &[
    "command",
    "seed",
    "dataset",
    "split",
    "game",
    "defense_eval",
    "sweep",
    "audit",
    "fano",
    "format",
    "repeats",
    "out",
];

impl ExperimentConfig {
    /// Parses and validates, collecting every problem found.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let mut problems = Vec::new();
        let Some(obj) = value.as_object() else {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        };
        for key in ["command", "seed"] {
            if !obj.contains_key(key) {
                problems.push(format!("missing required field `{key}`"));
            }
        }
        for key in obj.keys() {
            if !TOP_LEVEL.contains(&key.as_str()) {
                problems.push(format!("unknown field `{key}`"));
            }
        }
        // Deserialize each section on its own so one bad section does not
        // hide the others.
        let section_errors = obj
            .iter()
            .filter(|(k, _)| TOP_LEVEL.contains(&k.as_str()))
            .filter_map(|(k, v)| {
                let mut single = serde_json::Map::new();
                single.insert(k.clone(), v.clone());
                if k != "command" {
                    single.insert("command".into(), "fano".into());
                }
                if k != "seed" {
                    single.insert("seed".into(), 0.into());
                }
                serde_json::from_value::<ExperimentConfig>(serde_json::Value::Object(single))
                    .err()
                    .map(|e| format!("`{k}`: {e}"))
            });
        problems.extend(section_errors);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let config: Self = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.repeats == 0 {
            out.push("repeats must be >= 1".to_owned());
        }
        let needs_data = matches!(
            self.command,
            Command::Game | Command::DefenseEval | Command::Sweep | Command::Audit
        );
        if needs_data && self.dataset.is_none() {
            out.push("this command needs a `dataset` source".to_owned());
        }
        if matches!(self.command, Command::Game | Command::DefenseEval | Command::Sweep) {
            match &self.game {
                None => out.push("this command needs a `game` section".to_owned()),
                Some(g) => out.extend(g.problems().into_iter().map(|p| format!("game: {p}"))),
            }
        }
        if let Some(a) = &self.audit {
            if a.settings.is_empty() {
                out.push("audit: settings must be nonempty".to_owned());
            }
            if a.canaries.is_empty() {
                out.push("audit: canaries must be nonempty".to_owned());
            }
            for s in &a.settings {
                let probe = AuditConfig {
                    clip: s.clip,
                    sigma: s.sigma,
                    delta: a.delta,
                    trials: a.trials,
                    attribute: AttributeSlots::OneHot { start: 0, m: 2 },
                    seed: 0,
                    sensitivity_factor: a.sensitivity_factor,
                };
                out.extend(probe.problems().into_iter().map(|p| format!("audit: {p}")));
            }
        }
        if let Some(f) = &self.fano {
            if f.max_inputs < 3 || f.max_outputs < 2 {
                out.push("fano: need max_inputs >= 3 and max_outputs >= 2".to_owned());
            }
            if f.curve_points < 2 {
                out.push("fano: curve_points must be >= 2".to_owned());
            }
            if f.curve_m.iter().any(|&m| m < 2) {
                out.push("fano: curve alphabet sizes must be >= 2".to_owned());
            }
        }
        if let Some(DatasetSource::Synthetic(s)) = &self.dataset {
            if let Err(e) = s.spec.validate() {
                out.push(format!("dataset: {e}"));
            }
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub rows: usize,
    /// Selftest checks that failed; zero for other commands.
    pub failed_checks: usize,
    pub run_hash: String,
}

fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Synthetic(s) => {
            let ds = match &s.users {
                Some(u) => synth_users(&s.spec, u)?,
                None => synth_generate(&s.spec, s.n)?,
            };
            if s.sensitive_in_features {
                ds.with_sensitive_features()
            } else {
                Ok(ds)
            }
        }
        DatasetSource::Csv(c) => load_csv(&c.path, &c.schema),
    }
}

fn game_data(config: &ExperimentConfig, dataset: &Dataset, game: &GameConfig, seed: u64) -> Result<GameData> {
    let s = &config.split;
    match game.attack {
        crate::attacks::AttackKind::Uia { .. } => GameData::by_users(
            dataset,
            s.min_user_samples,
            s.train_users,
            s.shadow_users,
            s.test_per_user,
            seed,
        ),
        _ => GameData::split(dataset, s.fractions, seed),
    }
}

fn repeat_seed(master: u64, r: usize) -> u64 {
    master.wrapping_add(r as u64)
}

const METRICS: [&str; 4] = ["asr", "auroc", "advantage", "tpr_at_1pct_fpr"];

fn metric_values(r: &MetricsReport) -> [f64; 4] {
    [r.asr, r.auroc, r.advantage, r.tpr_at_1pct_fpr]
}

type Keys = Vec<(String, String)>;

/// Appends `mean` and `std` rows over repeats for every distinct key set.
fn summarize_repeats(rows: &mut Vec<ReportRow>, repeats: usize) {
    if repeats < 2 {
        return;
    }
    let mut groups: Vec<(Keys, String, Vec<f64>)> = Vec::new();
    for r in rows.iter() {
        let key: Keys = r.keys.iter().filter(|(k, _)| k != "repeat").cloned().collect();
        match groups.iter_mut().find(|(k, m, _)| *k == key && *m == r.metric) {
            Some(g) => g.2.push(r.value),
            None => groups.push((key, r.metric.clone(), vec![r.value])),
        }
    }
    for (key, metric, values) in groups {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        for (label, v) in [("mean", mean), ("std", var.sqrt())] {
            let mut keys = vec![("repeat".to_owned(), label.to_owned())];
            keys.extend(key.iter().cloned());
            rows.push(ReportRow {
                keys,
                metric: metric.clone(),
                value: v,
            });
        }
    }
}

struct Output {
    dir: PathBuf,
    manifest: Manifest,
    format: ReportFormat,
    rows: usize,
}

impl Output {
    fn emit(&mut self, stem: &str, rows: &[ReportRow], keys: &[&str]) -> Result<()> {
        let name = format!("{stem}.{}", self.format.extension());
        emit_report(rows, keys, self.manifest.run_hash(), self.format, &self.dir.join(&name))?;
        self.manifest.files.push(name);
        self.rows += rows.len();
        Ok(())
    }

    /// Free-form CSV detail file whose first column is the run hash.
    fn detail(&mut self, name: &str, header: &[&str], records: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        let mut h = vec!["run_hash"];
        h.extend(header);
        w.write_record(&h)?;
        for r in records {
            let mut rec = vec![self.manifest.run_hash().to_owned()];
            rec.extend(r.iter().cloned());
            w.write_record(&rec)?;
        }
        w.flush()?;
        self.manifest.files.push(name.to_owned());
        Ok(())
    }
}

fn run_game(config: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let dataset = load_dataset(config.dataset.as_ref().expect("validated"))?;
    let base = config.game.as_ref().expect("validated");
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for r in 0..config.repeats {
        let seed = repeat_seed(config.seed, r);
        let game = GameConfig { seed, ..base.clone() };
        let data = game_data(config, &dataset, &game, seed)?;
        let outcome = run_inference_game(&game, &data)?;
        let keys = |eval: String| {
            vec![
                ("repeat", r.to_string()),
                ("attack", game.attack.name().to_owned()),
                ("defense", game.defense.name().to_owned()),
                ("mode", game.mode.name().to_owned()),
                ("eval", eval),
            ]
        };
        let mut evals: Vec<(String, EvalMode)> = outcome
            .rounds
            .iter()
            .enumerate()
            .map(|(i, epoch)| (format!("round_{epoch}"), EvalMode::Round(i)))
            .collect();
        evals.push(("multi".to_owned(), EvalMode::MultiRound));
        for (label, mode) in evals {
            let report = evaluate_attack(&outcome, mode)?;
            for (m, v) in METRICS.iter().zip(metric_values(&report)) {
                rows.push(ReportRow::new(&keys(label.clone()), m, v));
            }
        }
        for (t, trial) in outcome.trials.iter().enumerate() {
            for (epoch, p) in outcome.rounds.iter().zip(&trial.posteriors) {
                details.push(vec![
                    r.to_string(),
                    t.to_string(),
                    epoch.to_string(),
                    trial.truth.to_string(),
                    crate::metrics::argmax(p).to_string(),
                    p.iter().map(|v| format_sig(*v)).collect::<Vec<_>>().join(";"),
                ]);
            }
            let agg = crate::attacks::normalize_scores(&trial.scores);
            details.push(vec![
                r.to_string(),
                t.to_string(),
                "multi".to_owned(),
                trial.truth.to_string(),
                trial.a_hat.to_string(),
                agg.iter().map(|v| format_sig(*v)).collect::<Vec<_>>().join(";"),
            ]);
        }
    }
    summarize_repeats(&mut rows, config.repeats);
    out.emit("metrics", &rows, &["repeat", "attack", "defense", "mode", "eval"])?;
    out.detail(
        "trials.csv",
        &["repeat", "trial", "round", "truth", "prediction", "posterior"],
        &details,
    )
}

fn run_defense_cells(config: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let dataset = load_dataset(config.dataset.as_ref().expect("validated"))?;
    let base = config.game.as_ref().expect("validated");
    let payload = config.defense_eval.clone().unwrap_or(DefenseEvalPayload {
        defenses: defaults::defenses(),
        modes: defaults::modes(),
    });
    let mut rows = Vec::new();
    for r in 0..config.repeats {
        let seed = repeat_seed(config.seed, r);
        let game = GameConfig { seed, ..base.clone() };
        let data = game_data(config, &dataset, &game, seed)?;
        for cell in run_defense_eval(&game, &data, &payload.defenses, &payload.modes)? {
            let keys = [
                ("repeat", r.to_string()),
                ("defense", cell.defense.name().to_owned()),
                ("params", cell.defense.params_label()),
                ("mode", cell.mode.name().to_owned()),
            ];
            for (m, v) in METRICS.iter().zip(metric_values(&cell.report)) {
                rows.push(ReportRow::new(&keys, m, v));
            }
        }
    }
    summarize_repeats(&mut rows, config.repeats);
    out.emit("metrics", &rows, &["repeat", "defense", "params", "mode"])
}

fn run_sweep(config: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let dataset = load_dataset(config.dataset.as_ref().expect("validated"))?;
    let base = config.game.as_ref().expect("validated");
    let profiles = config
        .sweep
        .as_ref()
        .map_or_else(privacy_utility_profiles, |s| s.profiles.clone());
    let mut rows = Vec::new();
    for r in 0..config.repeats {
        let seed = repeat_seed(config.seed, r);
        let game = GameConfig { seed, ..base.clone() };
        let data = game_data(config, &dataset, &game, seed)?;
        for p in privacy_utility_sweep(&game, &data, &profiles)? {
            let keys = [
                ("repeat", r.to_string()),
                ("defense", p.defense.name().to_owned()),
                ("params", p.params.clone()),
            ];
            rows.push(ReportRow::new(&keys, "advantage", p.advantage));
            rows.push(ReportRow::new(&keys, "task_auroc", p.task_auroc));
        }
    }
    summarize_repeats(&mut rows, config.repeats);
    out.emit("metrics", &rows, &["repeat", "defense", "params"])
}

fn run_audit(config: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let dataset = load_dataset(config.dataset.as_ref().expect("validated"))?;
    let payload = config.audit.clone().unwrap_or(AuditPayload {
        settings: defaults::audit_settings(),
        delta: defaults::delta(),
        trials: defaults::audit_trials(),
        canaries: defaults::canaries(),
        train_epochs: 1,
        hidden: defaults::hidden(),
        learning_rate: defaults::lr(),
        n_attributes: 1,
        sensitivity_factor: 1.0,
    });
    let slots = dataset.schema().sensitive_slots.clone().ok_or_else(|| {
        Error::Config(vec![
            "audit needs the sensitive attribute among the features (sensitive_in_features)".into(),
        ])
    })?;
    let attribute = AttributeSlots::OneHot {
        start: slots.start,
        m: slots.len(),
    };
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for r in 0..config.repeats {
        let seed = repeat_seed(config.seed, r);
        let root = SeedTree::new(seed);
        let data = GameData::split(&dataset, config.split.fractions, seed)?;
        let mut widths = vec![dataset.feature_dim()];
        widths.extend(&payload.hidden);
        widths.push(dataset.schema().n_labels);
        let mut theta = init_network(&NetworkSpec::new(widths, root.child("theta").seed()))?;
        for e in 0..payload.train_epochs {
            theta = train_epoch(
                &theta,
                &data.train,
                payload.learning_rate,
                32,
                &DefenseMechanism::Identity,
                root.child("epoch").index(e as u64),
            )?;
        }
        for setting in &payload.settings {
            for canary in &payload.canaries {
                let (label, record) = match canary {
                    CanarySource::Crafted {
                        iters,
                        step,
                        distance,
                        a,
                        y,
                    } => (
                        "crafted".to_owned(),
                        craft_canary(
                            &theta,
                            &attribute,
                            *a,
                            *y,
                            setting.clip,
                            *distance,
                            *iters,
                            *step,
                            root.child("canary").seed(),
                        )?,
                    ),
                    CanarySource::Record { index } => {
                        let rec = data.public.records().get(*index).ok_or_else(|| {
                            Error::Config(vec![format!("audit: no public record at index {index}")])
                        })?;
                        (
                            format!("record_{index}"),
                            CanaryRecord {
                                x: rec.x.clone(),
                                y: rec.y,
                                a: rec.a,
                                crafting: None,
                            },
                        )
                    }
                };
                let audit = AuditConfig {
                    clip: setting.clip,
                    sigma: setting.sigma,
                    delta: payload.delta,
                    trials: payload.trials,
                    attribute: attribute.clone(),
                    seed: root.child("audit").seed(),
                    sensitivity_factor: payload.sensitivity_factor,
                };
                let samples = run_audit_game(&record, &theta, &audit)?;
                let estimate = empirical_epsilon(&samples.h0, &samples.h1, audit.delta)?;
                let row = audit_report(&estimate, &audit, payload.n_attributes)?;
                let keys = [
                    ("repeat", r.to_string()),
                    ("canary", label.clone()),
                    ("clip", format_sig(row.clip)),
                    ("sigma", format_sig(row.sigma)),
                    ("delta", format_sig(row.delta)),
                    ("n_attributes", row.n_attributes.to_string()),
                ];
                for (m, v) in [
                    ("epsilon", row.epsilon),
                    ("eps_hat", row.eps_hat),
                    ("eps_lo", row.lo),
                    ("eps_hi", row.hi),
                ] {
                    rows.push(ReportRow::new(&keys, m, v));
                }
                match row.ratio {
                    Some(v) => rows.push(ReportRow::new(&keys, "ratio", v)),
                    None => rows.push(ReportRow::new(&keys, "indistinguishable", 1.0)),
                }
                for (b, set) in [(0, &samples.h0), (1, &samples.h1)] {
                    for (t, v) in set.iter().enumerate() {
                        details.push(vec![
                            r.to_string(),
                            label.clone(),
                            format_sig(setting.clip),
                            format_sig(setting.sigma),
                            b.to_string(),
                            t.to_string(),
                            format_sig(*v),
                        ]);
                    }
                }
            }
        }
    }
    summarize_repeats(&mut rows, config.repeats);
    out.emit("metrics", &rows, &["repeat", "canary", "clip", "sigma", "delta", "n_attributes"])?;
    out.detail(
        "audit_statistics.csv",
        &["repeat", "canary", "clip", "sigma", "hypothesis", "trial", "statistic"],
        &details,
    )
}

fn run_fano(config: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let p = config.fano.clone().unwrap_or(FanoPayload {
        channels: defaults::channels(),
        max_inputs: defaults::max_inputs(),
        max_outputs: defaults::max_outputs(),
        curve_m: defaults::curve_m(),
        curve_points: defaults::curve_points(),
    });
    let mut rows = Vec::new();
    let check = fano_brute_force(p.channels, p.max_inputs, p.max_outputs, config.seed)?;
    let keys = [("section", "brute_force".to_owned()), ("m", String::new()), ("mi", String::new())];
    rows.push(ReportRow::new(&keys, "instances", check.instances as f64));
    rows.push(ReportRow::new(&keys, "violations", check.violations as f64));
    rows.push(ReportRow::new(&keys, "min_slack", check.min_slack));
    for &m in &p.curve_m {
        let h = (m as f64).ln();
        for i in 0..p.curve_points {
            let mi = h * i as f64 / (p.curve_points - 1) as f64;
            let keys = [("section", "curve".to_owned()), ("m", m.to_string()), ("mi", format_sig(mi))];
            if m == 2 {
                rows.push(ReportRow::new(&keys, "error_bound", fano_binary_numeric((h - mi).max(0.0))));
            } else {
                rows.push(ReportRow::new(&keys, "error_bound", fano_error_lower_bound(h, mi, m)?));
                rows.push(ReportRow::new(
                    &keys,
                    "advantage_bound",
                    advantage_upper_bound(h, mi, m, 1.0 / m as f64)?,
                ));
            }
        }
    }
    out.emit("metrics", &rows, &["section", "m", "mi"])
}

fn run_selftest_command(config: &ExperimentConfig, out: &mut Output) -> Result<usize> {
    let checks = run_selftest(config.seed);
    let rows: Vec<ReportRow> = checks
        .iter()
        .map(|c| ReportRow::new(&[("check", c.name.to_owned())], "passed", f64::from(u8::from(c.passed))))
        .collect();
    for c in &checks {
        println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("selftest: {} passed, {failed} failed", checks.len() - failed);
    out.emit("metrics", &rows, &["check"])?;
    Ok(failed)
}

/// Applies overrides, runs the command, and writes the manifest and reports
/// into the output directory.
pub fn run_experiment(mut config: ExperimentConfig, overrides: &Overrides) -> Result<RunSummary> {
    if let Some(s) = overrides.seed {
        config.seed = s;
    }
    if let Some(r) = overrides.repeats {
        config.repeats = r;
    }
    if let Some(o) = &overrides.out {
        config.out = Some(o.clone());
    }
    config.validate()?;
    let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)?;
    // The echo leaves out the output location so moving a run does not
    // change its hash.
    let mut echo = config.clone();
    echo.out = None;
    let manifest = Manifest::new(serde_json::to_value(&echo)?)?;
    let mut out = Output {
        dir: dir.clone(),
        manifest,
        format: config.format,
        rows: 0,
    };
    let mut failed = 0;
    match config.command {
        Command::Game => run_game(&config, &mut out)?,
        Command::DefenseEval => run_defense_cells(&config, &mut out)?,
        Command::Sweep => run_sweep(&config, &mut out)?,
        Command::Audit => run_audit(&config, &mut out)?,
        Command::Fano => run_fano(&config, &mut out)?,
        Command::Selftest => failed = run_selftest_command(&config, &mut out)?,
    }
    out.manifest.write(&dir.join("manifest.json"))?;
    Ok(RunSummary {
        out_dir: dir,
        files: out.manifest.files.clone(),
        rows: out.rows,
        failed_checks: failed,
        run_hash: out.manifest.run_hash().to_owned(),
    })
}

pub fn run_config_file(path: &Path, overrides: &Overrides) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path)?;
    run_experiment(ExperimentConfig::from_json(&text)?, overrides)
}

/// Machine-readable error record for the binary's stderr.
pub fn error_record(err: &Error) -> serde_json::Value {
    let (kind, messages) = match err {
        Error::Config(list) => ("config", list.clone()),
        Error::Io(e) => ("io", vec![e.to_string()]),
        Error::Json(e) => ("json", vec![e.to_string()]),
        Error::Csv(e) => ("csv", vec![e.to_string()]),
        other => ("runtime", vec![other.to_string()]),
    };
    serde_json::json!({ "error": kind, "messages": messages })
}
