//! On-disk artifacts shared by `fit`, `encode`, `train` and `predict`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use stein_encoder::data::read_columns;
use stein_encoder::regressor::SafeguardReport;
use stein_encoder::{EncoderFit, FitReport};

use crate::config::RunConfig;
use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prescreen {
    pub kept: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopFeature {
    pub name: String,
    pub coef: f64,
}

/// Output of `fit`: the encoder plus what is needed to apply it to a new file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub response: String,
    pub nuisance_names: Vec<String>,
    /// Columns of `gamma`, in order.
    pub feature_names: Vec<String>,
    pub categories: BTreeMap<String, Vec<String>>,
    pub prescreen: Option<Prescreen>,
    /// Largest `|gamma_j|` first.
    pub top_features: Vec<TopFeature>,
    pub report: FitReport,
    pub run: RunConfig,
}

impl FitArtifact {
    pub fn encoder(&self) -> &EncoderFit {
        &self.report.encoder
    }

    pub fn load(path: &Path) -> Result<FitArtifact, UsageError> {
        read_json(path, "encoder")
    }
}

/// Largest-magnitude coefficients, ties broken by column order.
pub fn top_features(names: &[String], gamma: ArrayView1<f64>, k: usize) -> Vec<TopFeature> {
    let mut idx: Vec<usize> = (0..gamma.len()).filter(|&j| gamma[j] != 0.0).collect();
    idx.sort_by(|&a, &b| gamma[b].abs().total_cmp(&gamma[a].abs()).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|j| TopFeature { name: names[j].clone(), coef: gamma[j] })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// One network on `[X, Z]`.
    Raw,
    /// Network on `[X, t_hat]` plus the gated residual network on `[X, Z]`.
    Stein,
}

/// `model.json`, written next to the network checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub kind: ModelKind,
    pub response: String,
    pub nuisance_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub categories: BTreeMap<String, Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub safeguard: Option<SafeguardReport>,
    /// Direction used to build `t_hat` during training.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma: Option<Array1<f64>>,
    pub run: RunConfig,
}

impl ModelSidecar {
    pub const FILE: &'static str = "model.json";
    pub const MAIN: &'static str = "main.bin";
    pub const RESIDUAL: &'static str = "residual.bin";
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid {what} {}: {e}", path.display())))
}

/// Named columns of a data file; any missing or unrecognised cell is refused.
pub fn read_complete(
    path: &Path,
    columns: &[String],
    categories: &BTreeMap<String, Vec<String>>,
) -> anyhow::Result<Array2<f64>> {
    let m = read_columns(path, b',', columns, categories)?;
    if let Some(((i, j), _)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(UsageError(format!(
            "{}: row {} column `{}` is missing or not a known value",
            path.display(),
            i + 1,
            columns[j]
        ))
        .into());
    }
    Ok(m)
}

/// A single-column CSV such as the output of `encode`.
pub fn read_vector(path: &Path, column: &str) -> anyhow::Result<Array1<f64>> {
    let m = read_complete(path, &[column.to_string()], &BTreeMap::new())?;
    Ok(m.column(0).to_owned())
}

pub fn write_vector(path: &Path, column: &str, v: ArrayView1<f64>) -> anyhow::Result<()> {
    let mut s = String::with_capacity(16 * (v.len() + 1));
    s.push_str(column);
    s.push('\n');
    for x in v {
        s.push_str(&format!("{x}\n"));
    }
    write_file(path, &s)
}

pub fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| UsageError(format!("cannot write {}: {e}", path.display())).into())
}

pub fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| UsageError(format!("cannot create {}: {e}", path.display())).into())
}
