//! Records, datasets, and the conditional samplers the inference game needs.

mod csv;
mod synth;

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::SeedTree;

pub use self::csv::{load_csv, CategoricalColumn, CsvSchema, FeatureColumn};
pub use self::synth::{synth_generate, synth_users, SyntheticSpec, UserSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x: Vec<f64>,
    pub y: usize,
    /// Sensitive value in `[0, m)`.
    pub a: usize,
    #[serde(default)]
    pub user: Option<usize>,
}

/// Where a dataset came from. The attack side must never train on
/// [`Provenance::Private`] data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Raw,
    Private,
    Test,
    Public,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub feature_names: Vec<String>,
    pub label_name: String,
    pub n_labels: usize,
    pub sensitive_name: String,
    /// Number of sensitive values.
    pub m: usize,
    /// Feature slots holding the one-hot sensitive attribute, when it is
    /// part of the features.
    #[serde(default)]
    pub sensitive_slots: Option<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
    schema: Schema,
    provenance: Provenance,
    by_sensitive: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(records: Vec<Record>, schema: Schema) -> Result<Self> {
        Self::with_provenance(records, schema, Provenance::Raw)
    }

    pub fn with_provenance(records: Vec<Record>, schema: Schema, provenance: Provenance) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Insufficient("dataset must be nonempty".into()));
        }
        let d = schema.feature_names.len();
        let mut by_sensitive = vec![Vec::new(); schema.m];
        for (i, r) in records.iter().enumerate() {
            if r.x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: r.x.len(),
                });
            }
            if r.a >= schema.m {
                return Err(Error::LabelOutOfRange {
                    label: r.a,
                    classes: schema.m,
                });
            }
            if r.y >= schema.n_labels {
                return Err(Error::LabelOutOfRange {
                    label: r.y,
                    classes: schema.n_labels,
                });
            }
            by_sensitive[r.a].push(i);
        }
        Ok(Self {
            records,
            schema,
            provenance,
            by_sensitive,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.schema.feature_names.len()
    }

    pub fn count_by_sensitive(&self) -> Vec<usize> {
        self.by_sensitive.iter().map(Vec::len).collect()
    }

    /// Empirical marginal of the sensitive value.
    pub fn sensitive_marginal(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.by_sensitive.iter().map(|v| v.len() as f64 / n).collect()
    }

    fn subset(&self, idx: impl IntoIterator<Item = usize>, provenance: Provenance) -> Result<Self> {
        Self::with_provenance(
            idx.into_iter().map(|i| self.records[i].clone()).collect(),
            self.schema.clone(),
            provenance,
        )
    }

    pub fn relabel(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Appends the one-hot sensitive value to every feature vector, turning a
    /// property (external to the features) into an attribute.
    pub fn with_sensitive_features(&self) -> Result<Self> {
        if self.schema.sensitive_slots.is_some() {
            return Ok(self.clone());
        }
        let d = self.feature_dim();
        let m = self.schema.m;
        let mut schema = self.schema.clone();
        schema
            .feature_names
            .extend((0..m).map(|v| format!("{}={v}", schema.sensitive_name)));
        schema.sensitive_slots = Some(d..d + m);
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut x = r.x.clone();
                x.extend((0..m).map(|v| if v == r.a { 1.0 } else { 0.0 }));
                Record { x, ..r.clone() }
            })
            .collect();
        Self::with_provenance(records, schema, self.provenance)
    }

    pub fn to_batch(&self) -> Batch {
        Batch::new(self.records.iter().map(|r| (r.x.clone(), r.y)).collect())
    }
}

/// Draws `a` from a prior by inverse-CDF on one uniform.
pub fn sample_sensitive<R: Rng + ?Sized>(prior: &[f64], rng: &mut R) -> Result<usize> {
    validate_prior(prior)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding slack: last value with positive mass.
    Ok(prior.iter().rposition(|&p| p > 0.0).unwrap_or(0))
}

pub fn validate_prior(prior: &[f64]) -> Result<()> {
    if prior.is_empty()
        || prior.iter().any(|p| !(*p >= 0.0) || !p.is_finite())
        || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!("invalid prior {prior:?}")));
    }
    Ok(())
}

/// `k` records drawn with replacement from those with sensitive value `a`.
pub fn sample_conditional_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    a: usize,
    k: usize,
    rng: &mut R,
) -> Result<Batch> {
    let pool = dataset.by_sensitive.get(a).filter(|p| !p.is_empty());
    let pool = pool.ok_or(Error::EmptySubset(a))?;
    Ok(Batch::new(
        (0..k)
            .map(|_| {
                let r = &dataset.records[*pool.choose(rng).expect("nonempty pool")];
                (r.x.clone(), r.y)
            })
            .collect(),
    ))
}

/// Number of property records in a ratio batch.
pub fn property_count(alpha: f64, k: usize) -> usize {
    ((alpha * k as f64) + 1e-9).floor().min(k as f64) as usize
}

/// Exactly `floor(alpha * k)` records with sensitive value `property_value`,
/// the rest without; both sides bootstrapped.
pub fn sample_ratio_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    property_value: usize,
    alpha: f64,
    k: usize,
    rng: &mut R,
) -> Result<Batch> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("ratio {alpha} outside [0, 1]")));
    }
    let n_prop = property_count(alpha, k);
    let with = dataset
        .by_sensitive
        .get(property_value)
        .cloned()
        .unwrap_or_default();
    let without: Vec<usize> = dataset
        .by_sensitive
        .iter()
        .enumerate()
        .filter(|(v, _)| *v != property_value)
        .flat_map(|(_, idx)| idx.iter().copied())
        .collect();
    if n_prop > 0 && with.is_empty() {
        return Err(Error::EmptySubset(property_value));
    }
    if n_prop < k && without.is_empty() {
        return Err(Error::Insufficient(format!(
            "no records without property {property_value}"
        )));
    }
    let mut samples = Vec::with_capacity(k);
    for i in 0..k {
        let pool = if i < n_prop { &with } else { &without };
        let r = &dataset.records[*pool.choose(rng).expect("nonempty pool")];
        samples.push((r.x.clone(), r.y));
    }
    Ok(Batch::new(samples))
}

/// Ordinal ratio bins `{0}, (0, 1/(m-1)], ..., ((m-2)/(m-1), 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioBinSpec {
    pub m_bins: usize,
}

impl RatioBinSpec {
    pub fn new(m_bins: usize) -> Result<Self> {
        if m_bins < 3 {
            return Err(Error::InvalidArgument("ratio bins need m >= 3".into()));
        }
        Ok(Self { m_bins })
    }

    /// `(lo, hi]` bounds of bin `b`; bin 0 is the point `{0}`.
    pub fn bounds(&self, bin: usize) -> (f64, f64) {
        if bin == 0 {
            return (0.0, 0.0);
        }
        let w = 1.0 / (self.m_bins - 1) as f64;
        ((bin - 1) as f64 * w, bin as f64 * w)
    }

    pub fn bin_of(&self, alpha: f64) -> usize {
        if alpha <= 0.0 {
            return 0;
        }
        let w = 1.0 / (self.m_bins - 1) as f64;
        ((alpha / w).ceil() as usize).clamp(1, self.m_bins - 1)
    }

    /// Ratio drawn uniformly inside the bin's interval.
    pub fn sample_ratio<R: Rng + ?Sized>(&self, bin: usize, rng: &mut R) -> f64 {
        if bin == 0 {
            return 0.0;
        }
        let (lo, hi) = self.bounds(bin);
        // (lo, hi]: map u in [0, 1) to hi - u * (hi - lo).
        let u: f64 = rng.random();
        hi - u * (hi - lo)
    }
}

/// Disjoint `(train, test, public)` subsets of sizes `floor(f_i * n)`.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|v| !(*v > 0.0)) || f.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive and sum to at most 1: {fractions:?}"
        )));
    }
    let n = dataset.len();
    let sizes: Vec<usize> = f.iter().map(|v| (v * n as f64 + 1e-9).floor() as usize).collect();
    if sizes.contains(&0) {
        return Err(Error::Insufficient(format!("split of {n} records yields an empty part")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeedTree::new(seed).child("split").rng());
    let train = dataset.subset(idx[..sizes[0]].iter().copied(), Provenance::Private)?;
    let test = dataset.subset(
        idx[sizes[0]..sizes[0] + sizes[1]].iter().copied(),
        Provenance::Test,
    )?;
    let public = dataset.subset(
        idx[sizes[0] + sizes[1]..sizes[0] + sizes[1] + sizes[2]].iter().copied(),
        Provenance::Public,
    )?;
    Ok((train, test, public))
}

/// Shadow set of `s` records from the public split. Balanced shadows hold
/// `s / m` records per sensitive value (remainder to the lowest values).
pub fn build_shadow<R: Rng + ?Sized>(public: &Dataset, s: usize, balanced: bool, rng: &mut R) -> Result<Dataset> {
    if public.provenance == Provenance::Private {
        return Err(Error::InvalidArgument("shadow data cannot come from the private split".into()));
    }
    if s == 0 {
        return Err(Error::Insufficient("shadow size must be >= 1".into()));
    }
    let picked: Vec<usize> = if balanced {
        let m = public.schema.m;
        let mut out = Vec::with_capacity(s);
        for (v, pool) in public.by_sensitive.iter().enumerate() {
            let want = s / m + usize::from(v < s % m);
            if pool.len() < want {
                return Err(Error::Insufficient(format!(
                    "balanced shadow needs {want} records with sensitive value {v}, found {}",
                    pool.len()
                )));
            }
            out.extend(pool.choose_multiple(rng, want).copied());
        }
        out
    } else {
        if public.len() < s {
            return Err(Error::Insufficient(format!(
                "shadow needs {s} records, public split has {}",
                public.len()
            )));
        }
        rand::seq::index::sample(rng, public.len(), s).into_vec()
    };
    public.subset(picked, Provenance::Public)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserData {
    pub user: usize,
    pub records: Vec<Record>,
}

impl UserData {
    pub fn sample_batch<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Batch {
        Batch::new(
            (0..k)
                .map(|_| {
                    let r = self.records.choose(rng).expect("user has records");
                    (r.x.clone(), r.y)
                })
                .collect(),
        )
    }
}

/// Splits qualifying users (at least `min_samples` records) into disjoint
/// train and shadow sets.
pub fn user_partition(
    dataset: &Dataset,
    min_samples: usize,
    n_train_users: usize,
    n_shadow_users: usize,
    seed: u64,
) -> Result<(Vec<UserData>, Vec<UserData>)> {
    let mut per_user: BTreeMap<usize, Vec<Record>> = BTreeMap::new();
    for r in &dataset.records {
        let u = r
            .user
            .ok_or_else(|| Error::Schema("user partition needs a user id on every record".into()))?;
        per_user.entry(u).or_default().push(r.clone());
    }
    let mut users: Vec<UserData> = per_user
        .into_iter()
        .filter(|(_, recs)| recs.len() >= min_samples)
        .map(|(user, records)| UserData { user, records })
        .collect();
    if users.len() < n_train_users + n_shadow_users {
        return Err(Error::Insufficient(format!(
            "{} qualifying users, need {}",
            users.len(),
            n_train_users + n_shadow_users
        )));
    }
    users.shuffle(&mut SeedTree::new(seed).child("users").rng());
    let shadow = users.split_off(n_train_users);
    let shadow = shadow.into_iter().take(n_shadow_users).collect();
    Ok((users, shadow))
}
