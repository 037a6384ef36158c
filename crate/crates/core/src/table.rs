//! The score table: one row per scored network, with fixed columns.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a table
//! and writing it back reproduces the file byte for byte.

use std::io::{Read, Write};

use thiserror::Error;

/// Dataset tags, in one-hot column order.
pub const DATASETS: [&str; 3] = ["cifar10", "cifar100", "imagenet16"];

/// Classes per dataset tag.
pub fn num_classes(dataset: &str) -> Option<usize> {
    match dataset {
        "cifar10" => Some(10),
        "cifar100" => Some(100),
        "imagenet16" => Some(120),
        _ => None,
    }
}

/// Literature proxy columns.
pub const PROXIES: [&str; 11] = [
    "synflow",
    "gradnorm",
    "naswot",
    "tenas",
    "zennas",
    "zico",
    "eznas",
    "aznas",
    "az_expressivity",
    "az_progressivity",
    "az_trainability",
];

/// Formula proxy columns.
pub const FORMULAS: [&str; 10] = [
    "gm_a", "gm_b", "gm_c", "gm_d", "gm_e", "gm_f", "gm_g", "gm_h", "gm_i", "gm_j",
];

/// All 26 feature columns in table order.
pub const FEATURES: [&str; 26] = [
    "cifar10",
    "cifar100",
    "imagenet16",
    "synflow",
    "gradnorm",
    "naswot",
    "tenas",
    "zennas",
    "zico",
    "eznas",
    "aznas",
    "az_expressivity",
    "az_progressivity",
    "az_trainability",
    "gm_a",
    "gm_b",
    "gm_c",
    "gm_d",
    "gm_e",
    "gm_f",
    "gm_g",
    "gm_h",
    "gm_i",
    "gm_j",
    "params",
    "flops",
];

pub const META: [&str; 4] = ["net_id", "spec", "search_space", "dataset"];
pub const TARGET: &str = "accuracy";

/// Full header: metadata, features, target.
pub fn header() -> Vec<&'static str> {
    META.iter()
        .chain(FEATURES.iter())
        .chain(std::iter::once(&TARGET))
        .copied()
        .collect()
}

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURES.iter().position(|f| *f == name)
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header mismatch: missing columns {missing:?}, unexpected columns {unexpected:?}")]
    Header {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("row {row}, column `{column}`: {reason}")]
    Value { row: usize, column: String, reason: String },
    #[error("unknown feature(s): {0:?}")]
    UnknownFeatures(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub net_id: String,
    pub spec: String,
    pub search_space: String,
    pub dataset: String,
    /// Values in [`FEATURES`] order.
    pub features: [f64; 26],
    pub accuracy: f64,
}

impl ScoreRow {
    pub fn get(&self, feature: &str) -> Option<f64> {
        feature_index(feature).map(|i| self.features[i])
    }

    pub fn set(&mut self, feature: &str, value: f64) {
        let i = feature_index(feature).unwrap_or_else(|| panic!("unknown feature `{feature}`"));
        self.features[i] = value;
    }

    fn record(&self) -> Vec<String> {
        let mut out = vec![
            self.net_id.clone(),
            self.spec.clone(),
            self.search_space.clone(),
            self.dataset.clone(),
        ];
        out.extend(self.features.iter().map(|v| v.to_string()));
        out.push(self.accuracy.to_string());
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

fn parse_value(text: &str, row: usize, column: &str) -> Result<f64, TableError> {
    let v: f64 = text.trim().parse().map_err(|_| TableError::Value {
        row,
        column: column.to_string(),
        reason: format!("`{text}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(TableError::Value {
            row,
            column: column.to_string(),
            reason: "non-finite value".into(),
        });
    }
    Ok(v)
}

impl ScoreTable {
    pub fn read(reader: impl Read) -> Result<Self, TableError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let want = header();
        if got != want {
            let missing = want
                .iter()
                .filter(|w| !got.iter().any(|g| g == *w))
                .map(|s| s.to_string())
                .collect();
            let unexpected = got.iter().filter(|g| !want.contains(&g.as_str())).cloned().collect();
            return Err(TableError::Header { missing, unexpected });
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let mut features = [0.0; 26];
            for (k, name) in FEATURES.iter().enumerate() {
                features[k] = parse_value(&rec[META.len() + k], row, name)?;
            }
            rows.push(ScoreRow {
                net_id: rec[0].to_string(),
                spec: rec[1].to_string(),
                search_space: rec[2].to_string(),
                dataset: rec[3].to_string(),
                features,
                accuracy: parse_value(&rec[META.len() + FEATURES.len()], row, TARGET)?,
            });
        }
        Ok(Self { rows })
    }

    pub fn write(&self, writer: impl Write) -> Result<(), TableError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(header())?;
        for r in &self.rows {
            w.write_record(r.record())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8 csv")
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Column indices of `features`, or an error listing unknown names.
    pub fn resolve(features: &[String]) -> Result<Vec<usize>, TableError> {
        let unknown: Vec<String> = features
            .iter()
            .filter(|f| feature_index(f).is_none())
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(TableError::UnknownFeatures(unknown));
        }
        Ok(features.iter().map(|f| feature_index(f).expect("checked")).collect())
    }

    /// Design matrix over `columns` (indices into [`FEATURES`]) for `rows`.
    pub fn matrix(&self, columns: &[usize], rows: &[usize]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|&r| columns.iter().map(|&c| self.rows[r].features[c]).collect())
            .collect()
    }

    pub fn targets(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| self.rows[r].accuracy).collect()
    }

    pub fn all_targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.accuracy).collect()
    }
}
