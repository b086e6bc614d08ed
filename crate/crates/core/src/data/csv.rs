//! CSV ingestion driven by a JSON schema.
//!
//! Numeric features are min-max scaled per column (on by default).
//! Categorical features are one-hot expanded. The sensitive column is kept out
//! of the features unless `sensitive_in_features` is set, in which case its
//! one-hot encoding is appended after all other features.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Record, Schema};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureColumn {
    Numeric { name: String },
    Categorical { name: String, categories: Vec<String> },
}

impl FeatureColumn {
    fn name(&self) -> &str {
        match self {
            Self::Numeric { name } | Self::Categorical { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    pub name: String,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<FeatureColumn>,
    pub label: CategoricalColumn,
    pub sensitive: CategoricalColumn,
    #[serde(default)]
    pub user_id: Option<String>,
    #[serde(default)]
    pub sensitive_in_features: bool,
    #[serde(default = "yes")]
    pub min_max_scale: bool,
}

fn yes() -> bool {
    true
}

impl CsvSchema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn category_index(col: &CategoricalColumn, cell: &str, row: usize) -> Result<usize> {
    col.categories
        .iter()
        .position(|c| c == cell.trim())
        .ok_or_else(|| Error::Parse {
            row,
            column: col.name.clone(),
            message: format!("unknown category `{cell}`"),
        })
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let feature_cols = schema
        .features
        .iter()
        .map(|f| column(f.name()))
        .collect::<Result<Vec<_>>>()?;
    let label_col = column(&schema.label.name)?;
    let sensitive_col = column(&schema.sensitive.name)?;
    let user_col = schema.user_id.as_deref().map(column).transpose()?;

    let mut feature_names = Vec::new();
    for f in &schema.features {
        match f {
            FeatureColumn::Numeric { name } => feature_names.push(name.clone()),
            FeatureColumn::Categorical { name, categories } => {
                feature_names.extend(categories.iter().map(|c| format!("{name}={c}")))
            }
        }
    }

    let mut user_ids: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let row_no = row + 2;
        let rec = result?;
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let mut x = Vec::with_capacity(feature_names.len());
        for (f, &ci) in schema.features.iter().zip(&feature_cols) {
            match f {
                FeatureColumn::Numeric { name } => {
                    let v: f64 = cell(ci).parse().map_err(|_| Error::Parse {
                        row: row_no,
                        column: name.clone(),
                        message: format!("non-numeric value `{}`", cell(ci)),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            row: row_no,
                            column: name.clone(),
                            message: "non-finite value".into(),
                        });
                    }
                    x.push(v);
                }
                FeatureColumn::Categorical { name, categories } => {
                    let col = CategoricalColumn {
                        name: name.clone(),
                        categories: categories.clone(),
                    };
                    let idx = category_index(&col, cell(ci), row_no)?;
                    x.extend((0..categories.len()).map(|j| if j == idx { 1.0 } else { 0.0 }));
                }
            }
        }
        let y = category_index(&schema.label, cell(label_col), row_no)?;
        let a = category_index(&schema.sensitive, cell(sensitive_col), row_no)?;
        let user = user_col.map(|ci| {
            let next = user_ids.len();
            *user_ids.entry(cell(ci).to_owned()).or_insert(next)
        });
        records.push(Record { x, y, a, user });
    }
    if records.is_empty() {
        return Err(Error::Insufficient("csv has no data rows".into()));
    }

    if schema.min_max_scale {
        let mut off = 0;
        for f in &schema.features {
            match f {
                FeatureColumn::Numeric { .. } => {
                    let (lo, hi) = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                        (lo.min(r.x[off]), hi.max(r.x[off]))
                    });
                    let span = hi - lo;
                    for r in &mut records {
                        r.x[off] = if span > 0.0 { (r.x[off] - lo) / span } else { 0.0 };
                    }
                    off += 1;
                }
                FeatureColumn::Categorical { categories, .. } => off += categories.len(),
            }
        }
    }

    let ds = Dataset::new(
        records,
        Schema {
            feature_names,
            label_name: schema.label.name.clone(),
            n_labels: schema.label.categories.len(),
            sensitive_name: schema.sensitive.name.clone(),
            m: schema.sensitive.categories.len(),
            sensitive_slots: None,
        },
    )?;
    if schema.sensitive_in_features {
        ds.with_sensitive_features()
    } else {
        Ok(ds)
    }
}
