//! Tabular multi-modal datasets: loading, standardization, prescreening and
//! cross-validation splits.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::info;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Cell values treated as missing.
const MISSING_TOKENS: &[&str] = &["", "NA", "N/A", "na", "NaN", "nan", "null", "NULL", "?", "."];

pub fn is_missing(cell: &str) -> bool {
    MISSING_TOKENS.contains(&cell.trim())
}

/// Response, nuisance covariates and feature block over the same `n` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    y: Array1<f64>,
    x: Array2<f64>,
    z: Array2<f64>,
    names_x: Vec<String>,
    names_z: Vec<String>,
    /// Level lists (code order) of categorical nuisance columns.
    #[serde(default)]
    categories: BTreeMap<String, Vec<String>>,
}

impl Dataset {
    pub fn new(
        y: Array1<f64>,
        x: Array2<f64>,
        z: Array2<f64>,
        names_x: Vec<String>,
        names_z: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::Shape(format!(
                "row counts differ: y={n}, x={}, z={}",
                x.nrows(),
                z.nrows()
            )));
        }
        if names_x.len() != x.ncols() || names_z.len() != z.ncols() {
            return Err(Error::Shape("column names do not match matrix widths".into()));
        }
        if z.ncols() == 0 {
            return Err(Error::InvalidArgument("feature block z has no columns".into()));
        }
        let finite = |v: &f64| v.is_finite();
        if !(y.iter().all(finite) && x.iter().all(finite) && z.iter().all(finite)) {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(Dataset {
            y,
            x,
            z,
            names_x,
            names_z,
            categories: BTreeMap::new(),
        })
    }

    /// Builds a dataset with generated column names `x1..`, `z1..`.
    pub fn from_arrays(y: Array1<f64>, x: Array2<f64>, z: Array2<f64>) -> Result<Self> {
        let names_x = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        let names_z = (1..=z.ncols()).map(|j| format!("z{j}")).collect();
        Dataset::new(y, x, z, names_x, names_z)
    }

    pub fn with_categories(mut self, categories: BTreeMap<String, Vec<String>>) -> Self {
        self.categories = categories;
        self
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }
    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }
    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }
    pub fn names_x(&self) -> &[String] {
        &self.names_x
    }
    pub fn names_z(&self) -> &[String] {
        &self.names_z
    }
    pub fn categories(&self) -> &BTreeMap<String, Vec<String>> {
        &self.categories
    }
    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: self.y.select(Axis(0), rows),
            x: self.x.select(Axis(0), rows),
            z: self.z.select(Axis(0), rows),
            names_x: self.names_x.clone(),
            names_z: self.names_z.clone(),
            categories: self.categories.clone(),
        }
    }

    /// Keeps the given feature columns, in the given order.
    pub fn select_features(&self, cols: &[usize]) -> Result<Dataset> {
        if cols.is_empty() {
            return Err(Error::InvalidArgument("empty feature selection".into()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.q()) {
            return Err(Error::InvalidArgument(format!("feature index {bad} out of range")));
        }
        Ok(Dataset {
            y: self.y.clone(),
            x: self.x.clone(),
            z: self.z.select(Axis(1), cols),
            names_x: self.names_x.clone(),
            names_z: cols.iter().map(|&c| self.names_z[c].clone()).collect(),
            categories: self.categories.clone(),
        })
    }

    /// Same rows with the feature block replaced.
    pub fn with_z(&self, z: Array2<f64>, names_z: Vec<String>) -> Result<Dataset> {
        Dataset::new(self.y.clone(), self.x.clone(), z, self.names_x.clone(), names_z)
            .map(|d| d.with_categories(self.categories.clone()))
    }

    /// Writes `response, x..., z...` as a comma-separated table.
    pub fn write_csv(&self, path: &Path, response_name: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| table_err(path, e))?;
        let mut header = vec![response_name.to_string()];
        header.extend(self.names_x.iter().cloned());
        header.extend(self.names_z.iter().cloned());
        w.write_record(&header).map_err(|e| table_err(path, e))?;
        for i in 0..self.n() {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(fmt_cell(self.y[i]));
            for (j, name) in self.names_x.iter().enumerate() {
                let v = self.x[[i, j]];
                match self.categories.get(name) {
                    Some(levels) => rec.push(levels[v as usize].clone()),
                    None => rec.push(fmt_cell(v)),
                }
            }
            rec.extend(self.z.row(i).iter().map(|&v| fmt_cell(v)));
            w.write_record(&rec).map_err(|e| table_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn fmt_cell(v: f64) -> String {
    format!("{v}")
}

fn table_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Table {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Response,
    Nuisance,
    Feature,
    Drop,
}

/// Column roles for [`load_table`].
///
/// Roles are resolved per header column: an explicit `columns` entry wins,
/// then the longest matching `prefixes` entry, then `default_role`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnManifest {
    #[serde(default)]
    pub columns: BTreeMap<String, Role>,
    #[serde(default)]
    pub prefixes: BTreeMap<String, Role>,
    #[serde(default = "default_drop")]
    pub default_role: Role,
    #[serde(default = "default_missing_cap")]
    pub missing_cap: f64,
}

fn default_drop() -> Role {
    Role::Drop
}

fn default_missing_cap() -> f64 {
    0.3
}

impl ColumnManifest {
    pub fn new(columns: BTreeMap<String, Role>) -> Self {
        ColumnManifest {
            columns,
            prefixes: BTreeMap::new(),
            default_role: Role::Drop,
            missing_cap: default_missing_cap(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let m: ColumnManifest = toml::from_str(s).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.missing_cap) {
            return Err(Error::Manifest(format!(
                "missing_cap {} outside [0, 1]",
                self.missing_cap
            )));
        }
        let responses = self.columns.values().filter(|r| **r == Role::Response).count();
        if responses != 1 {
            return Err(Error::Manifest(format!(
                "expected exactly one response column, found {responses}"
            )));
        }
        if self.prefixes.values().any(|r| *r == Role::Response) || self.default_role == Role::Response
        {
            return Err(Error::Manifest("the response must be named explicitly".into()));
        }
        Ok(())
    }

    pub fn response(&self) -> &str {
        self.columns
            .iter()
            .find(|(_, r)| **r == Role::Response)
            .map(|(c, _)| c.as_str())
            .unwrap_or("")
    }

    pub fn role_of(&self, column: &str) -> Role {
        if let Some(r) = self.columns.get(column) {
            return *r;
        }
        self.prefixes
            .iter()
            .filter(|(p, _)| column.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map(|(_, r)| *r)
            .unwrap_or(self.default_role)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub delimiter: u8,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { delimiter: b',' }
    }
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_raw(path: &Path, delimiter: u8) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| table_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(table_err(path, "missing header row"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| table_err(path, e))?;
        rows.push(rec.iter().map(|c| c.trim().to_string()).collect());
    }
    Ok(RawTable { header, rows })
}

pub fn load_table(path: &Path, manifest: &ColumnManifest) -> Result<Dataset> {
    load_table_with(path, manifest, &LoadOptions::default())
}

/// Reads a delimited table and assembles a [`Dataset`].
///
/// Rows with a missing response are removed, then nuisance/feature columns
/// whose missing rate exceeds `manifest.missing_cap` are dropped. Remaining
/// numeric gaps get the column mean; categorical nuisance columns are coded
/// 0, 1, ... by first appearance and their gaps get the most frequent code.
pub fn load_table_with(path: &Path, manifest: &ColumnManifest, opts: &LoadOptions) -> Result<Dataset> {
    manifest.validate()?;
    let raw = read_raw(path, opts.delimiter)?;
    for name in manifest.columns.keys() {
        if !raw.header.contains(name) {
            return Err(Error::UnknownColumn(name.clone()));
        }
    }
    let response = manifest.response();
    let resp_idx = raw.header.iter().position(|h| h == response).unwrap();

    let mut y = Vec::new();
    let mut kept = Vec::new();
    for (i, row) in raw.rows.iter().enumerate() {
        let cell = &row[resp_idx];
        if is_missing(cell) {
            continue;
        }
        let v: f64 = cell.parse().map_err(|_| {
            table_err(path, format!("non-numeric response `{cell}` on data row {}", i + 1))
        })?;
        if !v.is_finite() {
            continue;
        }
        y.push(v);
        kept.push(i);
    }
    if kept.is_empty() {
        return Err(Error::Empty);
    }
    let dropped_rows = raw.rows.len() - kept.len();
    if dropped_rows > 0 {
        info!("dropped {dropped_rows} rows with missing response");
    }

    let mut x_cols: Vec<Vec<f64>> = Vec::new();
    let mut z_cols: Vec<Vec<f64>> = Vec::new();
    let mut names_x = Vec::new();
    let mut names_z = Vec::new();
    let mut categories = BTreeMap::new();

    for (j, name) in raw.header.iter().enumerate() {
        let role = manifest.role_of(name);
        if j == resp_idx || matches!(role, Role::Drop | Role::Response) {
            continue;
        }
        let cells: Vec<&str> = kept.iter().map(|&i| raw.rows[i][j].as_str()).collect();
        let n_missing = cells.iter().filter(|c| is_missing(c)).count();
        let rate = n_missing as f64 / cells.len() as f64;
        if rate > manifest.missing_cap || n_missing == cells.len() {
            info!("dropping column `{name}`: missing rate {:.1}%", 100.0 * rate);
            continue;
        }
        let column = match parse_numeric(&cells) {
            Some(col) => mean_impute(col),
            None if role == Role::Nuisance => {
                let (codes, levels) = label_encode(&cells);
                categories.insert(name.clone(), levels);
                codes
            }
            None => {
                return Err(table_err(path, format!("feature column `{name}` is not numeric")));
            }
        };
        if role == Role::Nuisance {
            x_cols.push(column);
            names_x.push(name.clone());
        } else {
            z_cols.push(column);
            names_z.push(name.clone());
        }
    }
    if z_cols.is_empty() {
        return Err(Error::InvalidArgument("no feature columns left after filtering".into()));
    }
    let n = y.len();
    let x = columns_to_matrix(&x_cols, n);
    let z = columns_to_matrix(&z_cols, n);
    Ok(Dataset::new(Array1::from(y), x, z, names_x, names_z)?.with_categories(categories))
}

/// Reads named columns as numbers, without filtering or imputation.
///
/// Missing cells and categorical levels absent from `categories` become NaN;
/// an input with a header but no rows yields a `0 x k` matrix.
pub fn read_columns(
    path: &Path,
    delimiter: u8,
    columns: &[String],
    categories: &BTreeMap<String, Vec<String>>,
) -> Result<Array2<f64>> {
    let raw = read_raw(path, delimiter)?;
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            raw.header
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::UnknownColumn(c.clone()))
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::from_elem((raw.rows.len(), columns.len()), f64::NAN);
    for (i, row) in raw.rows.iter().enumerate() {
        for (k, (&j, name)) in idx.iter().zip(columns).enumerate() {
            let cell = &row[j];
            if is_missing(cell) {
                continue;
            }
            out[[i, k]] = match categories.get(name) {
                Some(levels) => levels
                    .iter()
                    .position(|l| l == cell)
                    .map(|p| p as f64)
                    .unwrap_or(f64::NAN),
                None => cell.parse().map_err(|_| {
                    table_err(path, format!("non-numeric value `{cell}` in column `{name}`"))
                })?,
            };
        }
    }
    Ok(out)
}

fn parse_numeric(cells: &[&str]) -> Option<Vec<Option<f64>>> {
    cells
        .iter()
        .map(|c| {
            if is_missing(c) {
                Some(None)
            } else {
                c.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some)
            }
        })
        .collect()
}

fn mean_impute(col: Vec<Option<f64>>) -> Vec<f64> {
    let (sum, cnt) = col
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    let mean = sum / cnt as f64;
    col.into_iter().map(|v| v.unwrap_or(mean)).collect()
}

fn label_encode(cells: &[&str]) -> (Vec<f64>, Vec<String>) {
    let mut levels: Vec<String> = Vec::new();
    let mut lookup: HashMap<&str, usize> = HashMap::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut codes: Vec<Option<usize>> = Vec::with_capacity(cells.len());
    for &c in cells {
        if is_missing(c) {
            codes.push(None);
            continue;
        }
        let code = *lookup.entry(c).or_insert_with(|| {
            levels.push(c.to_string());
            counts.push(0);
            levels.len() - 1
        });
        counts[code] += 1;
        codes.push(Some(code));
    }
    // mode, ties to the earliest level
    let mode = counts
        .iter()
        .enumerate()
        .fold((0, 0), |best, (k, &c)| if c > best.1 { (k, c) } else { best })
        .0;
    let coded = codes.into_iter().map(|c| c.unwrap_or(mode) as f64).collect();
    (coded, levels)
}

fn columns_to_matrix(cols: &[Vec<f64>], n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, cols.len()), |(i, j)| cols[j][i])
}

/// Column-wise affine maps fitted by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub names_x: Vec<String>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub names_z: Vec<String>,
    pub z_mean: Vec<f64>,
    pub z_std: Vec<f64>,
    pub y_mean: Option<f64>,
    pub y_std: Option<f64>,
    pub dropped_x: Vec<String>,
    pub dropped_z: Vec<String>,
}

/// Sample mean and standard deviation (denominator `n - 1`) of each column.
pub fn column_moments(a: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = a.nrows() as f64;
    a.axis_iter(Axis(1))
        .map(|c| {
            let m = c.sum() / n;
            let ss = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            (m, (ss / (n - 1.0)).sqrt())
        })
        .unzip()
}

fn is_constant(mean: f64, std: f64) -> bool {
    std <= 64.0 * f64::EPSILON * mean.abs().max(1.0)
}

/// Centers and scales every column of `x` and `z` (and `y` if requested).
///
/// Zero-variance columns are removed and listed in the returned params.
pub fn standardize(d: &Dataset, scale_y: bool) -> Result<(Dataset, ScalingParams)> {
    if d.n() < 2 {
        return Err(Error::InvalidArgument(format!(
            "standardize needs at least 2 rows, got {}",
            d.n()
        )));
    }
    let split = |a: ArrayView2<f64>, names: &[String]| {
        let (mean, std) = column_moments(a);
        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        for j in 0..names.len() {
            if is_constant(mean[j], std[j]) {
                info!("dropping zero-variance column `{}`", names[j]);
                dropped.push(names[j].clone());
            } else {
                keep.push(j);
            }
        }
        (keep, dropped, mean, std)
    };
    let (kx, dropped_x, mx, sx) = split(d.x(), d.names_x());
    let (kz, dropped_z, mz, sz) = split(d.z(), d.names_z());
    if kz.is_empty() {
        return Err(Error::InvalidArgument("all feature columns have zero variance".into()));
    }
    let (y_mean, y_std) = if scale_y {
        let (m, s) = column_moments(d.y().insert_axis(Axis(1)));
        if is_constant(m[0], s[0]) {
            return Err(Error::InvalidArgument("response has zero variance".into()));
        }
        (Some(m[0]), Some(s[0]))
    } else {
        (None, None)
    };
    let params = ScalingParams {
        names_x: kx.iter().map(|&j| d.names_x[j].clone()).collect(),
        x_mean: kx.iter().map(|&j| mx[j]).collect(),
        x_std: kx.iter().map(|&j| sx[j]).collect(),
        names_z: kz.iter().map(|&j| d.names_z[j].clone()).collect(),
        z_mean: kz.iter().map(|&j| mz[j]).collect(),
        z_std: kz.iter().map(|&j| sz[j]).collect(),
        y_mean,
        y_std,
        dropped_x,
        dropped_z,
    };
    let out = params.transform(d)?;
    Ok((out, params))
}

impl ScalingParams {
    /// Applies the fitted maps to a dataset carrying (at least) the same columns.
    pub fn transform(&self, d: &Dataset) -> Result<Dataset> {
        let pick = |names: &[String], have: &[String]| -> Result<Vec<usize>> {
            names
                .iter()
                .map(|c| {
                    have.iter()
                        .position(|h| h == c)
                        .ok_or_else(|| Error::UnknownColumn(c.clone()))
                })
                .collect()
        };
        let ix = pick(&self.names_x, d.names_x())?;
        let iz = pick(&self.names_z, d.names_z())?;
        let x = self.scale_x(d.x().select(Axis(1), &ix).view());
        let z = self.scale_z(d.z().select(Axis(1), &iz).view());
        let y = match (self.y_mean, self.y_std) {
            (Some(m), Some(s)) => d.y().mapv(|v| (v - m) / s),
            _ => d.y().to_owned(),
        };
        let cats = d
            .categories()
            .iter()
            .filter(|(k, _)| self.names_x.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Dataset::new(y, x, z, self.names_x.clone(), self.names_z.clone())?.with_categories(cats))
    }

    pub fn scale_x(&self, x: ArrayView2<f64>) -> Array2<f64> {
        scale_columns(x, &self.x_mean, &self.x_std)
    }

    pub fn scale_z(&self, z: ArrayView2<f64>) -> Array2<f64> {
        scale_columns(z, &self.z_mean, &self.z_std)
    }
}

fn scale_columns(a: ArrayView2<f64>, mean: &[f64], std: &[f64]) -> Array2<f64> {
    let mut out = a.to_owned();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|v| (v - mean[j]) / std[j]);
    }
    out
}

/// Indices of the `k` highest-variance columns, highest first; ties keep
/// the lower column index first.
pub fn variance_prescreen(z: ArrayView2<f64>, k: usize) -> Result<Vec<usize>> {
    let q = z.ncols();
    if k == 0 || k > q {
        return Err(Error::InvalidArgument(format!("prescreen size {k} not in 1..={q}")));
    }
    if z.nrows() < 2 {
        return Err(Error::InvalidArgument("prescreen needs at least 2 rows".into()));
    }
    let (_, std) = column_moments(z);
    let mut idx: Vec<usize> = (0..q).collect();
    idx.sort_by(|&a, &b| std[b].total_cmp(&std[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// A single cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded `k`-fold partition of `0..n`; the first `n % k` folds get one
/// extra test row. Index lists are sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("fold count {k} not in 2..={n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = perm[start..start + size].to_vec();
        test.sort_unstable();
        let mut in_test = vec![false; n];
        test.iter().for_each(|&i| in_test[i] = true);
        let train = (0..n).filter(|&i| !in_test[i]).collect();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn manifest(pairs: &[(&str, Role)]) -> ColumnManifest {
        ColumnManifest::new(pairs.iter().map(|(c, r)| (c.to_string(), *r)).collect())
    }

    #[test]
    fn rows_with_missing_response_are_removed() {
        let f = write_tmp("y,a,g\n1,0,1.0\nNA,1,2.0\n3,0,3.0\n4,1,4.0\n5,1,5.0\n");
        let m = manifest(&[("y", Role::Response), ("a", Role::Nuisance), ("g", Role::Feature)]);
        let d = load_table(f.path(), &m).unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.y().to_vec(), vec![1.0, 3.0, 4.0, 5.0]);
        assert_eq!(d.z().column(0).to_vec(), vec![1.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn dropped_column_is_absent() {
        let f = write_tmp("y,a,b,g\n1,0,9,1\n2,1,9,2\n3,0,9,3\n");
        let m = manifest(&[
            ("y", Role::Response),
            ("a", Role::Nuisance),
            ("b", Role::Drop),
            ("g", Role::Feature),
        ]);
        let d = load_table(f.path(), &m).unwrap();
        assert_eq!(d.names_x(), &["a".to_string()]);
        assert_eq!(d.names_z(), &["g".to_string()]);
    }

    #[test]
    fn high_missing_column_is_removed() {
        // 2 of 5 = 40% missing in `b`, cap 0.30
        let f = write_tmp("y,b,g\n1,NA,1\n2,,2\n3,1,3\n4,2,4\n5,3,5\n");
        let m = manifest(&[("y", Role::Response), ("b", Role::Nuisance), ("g", Role::Feature)]);
        let d = load_table(f.path(), &m).unwrap();
        assert_eq!(d.p(), 0);
    }

    #[test]
    fn remaining_gaps_are_mean_imputed_and_categories_coded() {
        let f = write_tmp("y,c,g\n1,lo,1\n2,hi,NA\n3,lo,5\n4,mid,3\n5,,1\n");
        let mut m = manifest(&[("y", Role::Response), ("c", Role::Nuisance), ("g", Role::Feature)]);
        m.missing_cap = 0.5;
        let d = load_table(f.path(), &m).unwrap();
        assert_eq!(d.z().column(0).to_vec(), vec![1.0, 2.5, 5.0, 3.0, 1.0]);
        // first appearance order: lo=0, hi=1, mid=2; gap gets the mode (lo)
        assert_eq!(d.x().column(0).to_vec(), vec![0.0, 1.0, 0.0, 2.0, 0.0]);
        assert_eq!(d.categories()["c"], vec!["lo", "hi", "mid"]);
    }

    #[test]
    fn manifest_errors() {
        let f = write_tmp("y,g\n1,2\n");
        let m = manifest(&[("y", Role::Response), ("nope", Role::Feature)]);
        assert!(matches!(load_table(f.path(), &m), Err(Error::UnknownColumn(_))));

        let f = write_tmp("y,g\nNA,2\n,3\n");
        let m = manifest(&[("y", Role::Response), ("g", Role::Feature)]);
        assert!(matches!(load_table(f.path(), &m), Err(Error::Empty)));

        let m = manifest(&[("g", Role::Feature)]);
        assert!(m.validate().is_err());

        let missing = Path::new("/definitely/not/here.csv");
        let m = manifest(&[("y", Role::Response), ("g", Role::Feature)]);
        assert!(matches!(load_table(missing, &m), Err(Error::Io { .. })));
    }

    #[test]
    fn manifest_toml_with_prefixes() {
        let m = ColumnManifest::from_toml_str(
            r#"
            missing_cap = 0.3
            [columns]
            npi = "response"
            grade = "nuisance"
            [prefixes]
            "gene_" = "feature"
            "#,
        )
        .unwrap();
        assert_eq!(m.role_of("gene_BRCA1"), Role::Feature);
        assert_eq!(m.role_of("grade"), Role::Nuisance);
        assert_eq!(m.role_of("other"), Role::Drop);
        assert_eq!(m.response(), "npi");
    }

    #[test]
    fn tab_delimited() {
        let f = write_tmp("y\tg\n1\t2\n3\t4\n");
        let m = manifest(&[("y", Role::Response), ("g", Role::Feature)]);
        let d = load_table_with(f.path(), &m, &LoadOptions { delimiter: b'\t' }).unwrap();
        assert_eq!(d.z().column(0).to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn standardize_basic_and_constant_dropped() {
        let d = Dataset::from_arrays(
            array![0.0, 1.0, 2.0],
            array![[1.0, 7.0], [2.0, 7.0], [3.0, 7.0]],
            array![[1.0], [2.0], [3.0]],
        )
        .unwrap();
        let (s, params) = standardize(&d, false).unwrap();
        assert_eq!(s.x().column(0).to_vec(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(s.p(), 1);
        assert_eq!(params.dropped_x, vec!["x2".to_string()]);
        assert!(standardize(&d.select_rows(&[0]), false).is_err());
    }

    #[test]
    fn standardize_is_idempotent() {
        let d = Dataset::from_arrays(
            array![0.3, 1.0, 2.0, -1.0],
            array![[1.5, 0.2], [2.0, -3.0], [3.7, 1.1], [0.1, 0.0]],
            array![[1.0, 4.0], [2.5, 1.0], [3.0, 0.0], [9.0, 2.0]],
        )
        .unwrap();
        let (s1, _) = standardize(&d, true).unwrap();
        let (s2, _) = standardize(&s1, true).unwrap();
        let diff = (&s1.z() - &s2.z()).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12);
        let diff = (&s1.x() - &s2.x()).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn prescreen_examples() {
        // variances 1, 25, 9 by construction
        let z = array![[1.0, 5.0, 3.0], [-1.0, -5.0, -3.0], [0.0, 0.0, 0.0]];
        assert_eq!(variance_prescreen(z.view(), 2).unwrap(), vec![1, 2]);
        assert_eq!(variance_prescreen(z.view(), 3).unwrap().len(), 3);
        let eq = array![[1.0, 1.0], [-1.0, -1.0]];
        assert_eq!(variance_prescreen(eq.view(), 1).unwrap(), vec![0]);
        assert!(variance_prescreen(z.view(), 0).is_err());
        assert!(variance_prescreen(z.view(), 4).is_err());
    }

    #[test]
    fn kfold_examples() {
        let folds = kfold_split(10, 5, 1).unwrap();
        assert_eq!(folds.len(), 5);
        assert!(folds.iter().all(|f| f.test.len() == 2 && f.train.len() == 8));
        assert_eq!(folds, kfold_split(10, 5, 1).unwrap());
        let sizes: Vec<usize> = kfold_split(7, 5, 3).unwrap().iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        assert!(kfold_split(3, 1, 0).is_err());
        assert!(kfold_split(3, 4, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn kfold_partitions_rows(n in 2usize..200, k in 2usize..12, seed in 0u64..1000) {
            proptest::prop_assume!(k <= n);
            let folds = kfold_split(n, k, seed).unwrap();
            let mut seen = vec![0usize; n];
            for f in &folds {
                for &i in &f.test { seen[i] += 1; }
                proptest::prop_assert_eq!(f.train.len() + f.test.len(), n);
            }
            proptest::prop_assert!(seen.iter().all(|&c| c == 1));
            let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
            proptest::prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
