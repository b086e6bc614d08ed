//! Long-format report files and run manifests.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

/// One metric value with its identifying keys; keys must be listed in the
/// same order on every row of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub keys: Vec<(String, String)>,
    pub metric: String,
    pub value: f64,
}

impl ReportRow {
    pub fn new(keys: &[(&str, String)], metric: &str, value: f64) -> Self {
        Self {
            keys: keys.iter().map(|(k, v)| ((*k).to_owned(), v.clone())).collect(),
            metric: metric.to_owned(),
            value,
        }
    }
}

/// Rounds to six significant digits and prints the shortest form.
pub fn format_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn sig_value(v: f64) -> serde_json::Value {
    if v.is_finite() {
        let rounded: f64 = format_sig(v).parse().expect("finite");
        serde_json::Number::from_f64(rounded).map_or(serde_json::Value::Null, serde_json::Value::Number)
    } else {
        serde_json::Value::String(format_sig(v))
    }
}

/// Writes rows as `run_hash, <keys...>, metric, value`. An empty report
/// still gets its header (or an empty JSON array).
pub fn emit_report(rows: &[ReportRow], key_names: &[&str], run_hash: &str, format: ReportFormat, path: &Path) -> Result<()> {
    for r in rows {
        let names: Vec<&str> = r.keys.iter().map(|(k, _)| k.as_str()).collect();
        if names != key_names {
            return Err(Error::InvalidArgument(format!(
                "report row keys {names:?} differ from header {key_names:?}"
            )));
        }
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            let mut header = vec!["run_hash"];
            header.extend(key_names);
            header.extend(["metric", "value"]);
            w.write_record(&header)?;
            for r in rows {
                let mut rec = vec![run_hash.to_owned()];
                rec.extend(r.keys.iter().map(|(_, v)| v.clone()));
                rec.push(r.metric.clone());
                rec.push(format_sig(r.value));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let arr: Vec<serde_json::Value> = rows
                .iter()
                .map(|r| {
                    let mut obj = serde_json::Map::new();
                    obj.insert("run_hash".into(), run_hash.into());
                    for (k, v) in &r.keys {
                        obj.insert(k.clone(), v.clone().into());
                    }
                    obj.insert("metric".into(), r.metric.clone().into());
                    obj.insert("value".into(), sig_value(r.value));
                    serde_json::Value::Object(obj)
                })
                .collect();
            let mut f = std::fs::File::create(path)?;
            serde_json::to_writer_pretty(&mut f, &arr)?;
            f.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(config: serde_json::Value) -> Result<Self> {
        let canonical = serde_json::to_vec(&config)?;
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            config_hash: sha256_hex(&canonical),
            config,
            files: Vec::new(),
        })
    }

    /// Short form used to tag every emitted row.
    pub fn run_hash(&self) -> &str {
        &self.config_hash[..16]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}
