//! Observation tables, CSV ingestion, fold assignment and standardization.
//!
//! A [`Dataset`] holds one row per unit: outcome `y`, binary treatment `a`,
//! covariates `x`, treatment-inducing proxies `z` and outcome-inducing
//! proxies `w`. Kernels never see raw columns; they act on the stacked design
//! `[x | z | w]` after a [`Standardizer`] has been fitted on training rows.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use faer::{Mat, MatRef};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::select_rows;

/// Column-role mapping for CSV ingestion.
///
/// `outcome` and `treatment` may be given as a single name or a one-element
/// list; the three feature groups are lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(with = "single_name")]
    pub outcome: String,
    #[serde(with = "single_name")]
    pub treatment: String,
    pub covariates: Vec<String>,
    pub z_proxies: Vec<String>,
    pub w_proxies: Vec<String>,
}

mod single_name {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }

    pub fn serialize<S: Serializer>(name: &str, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(name)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
        match OneOrMany::deserialize(d)? {
            OneOrMany::One(s) => Ok(s),
            OneOrMany::Many(mut v) if v.len() == 1 => Ok(v.remove(0)),
            OneOrMany::Many(v) => Err(serde::de::Error::custom(format!(
                "expected exactly one column name, got {}",
                v.len()
            ))),
        }
    }
}

impl Schema {
    /// Reads a schema from a JSON or TOML file (chosen by extension, JSON
    /// tried first when the extension is unknown).
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let is_toml = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let schema: Schema = if is_toml {
            toml::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?
        } else {
            match serde_json::from_str(&text) {
                Ok(s) => s,
                Err(json_err) => toml::from_str(&text)
                    .map_err(|e| Error::Schema(format!("not JSON ({json_err}) nor TOML ({e})")))?,
            }
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        for (role, cols) in [
            ("covariates", &self.covariates),
            ("z_proxies", &self.z_proxies),
            ("w_proxies", &self.w_proxies),
        ] {
            if cols.is_empty() {
                return Err(Error::Schema(format!("`{role}` must name at least one column")));
            }
        }
        Ok(())
    }

    /// Schema matching the columns written by the simulator.
    pub fn simulated(d_x: usize) -> Self {
        Schema {
            outcome: "y".into(),
            treatment: "a".into(),
            covariates: (1..=d_x).map(|j| format!("x{j}")).collect(),
            z_proxies: vec!["z1".into()],
            w_proxies: vec!["w1".into()],
        }
    }
}

/// Which proxy block accompanies the covariates in a kernel's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSet {
    /// `(W, X)`: inputs of the outcome bridge and of the treatment-bridge critic.
    OutcomeProxies,
    /// `(Z, X)`: inputs of the treatment bridge and of the outcome-bridge critic.
    TreatmentProxies,
    /// `X` alone.
    Covariates,
}

/// Validated observation table.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<u8>,
    x: Mat<f64>,
    z: Mat<f64>,
    w: Mat<f64>,
    x_names: Vec<String>,
    z_names: Vec<String>,
    w_names: Vec<String>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, a: Vec<u8>, x: Mat<f64>, z: Mat<f64>, w: Mat<f64>) -> Result<Self> {
        let names = |p: &str, d: usize| (1..=d).map(|j| format!("{p}{j}")).collect();
        let (x_names, z_names, w_names) =
            (names("x", x.ncols()), names("z", z.ncols()), names("w", w.ncols()));
        Self::with_names(y, a, x, z, w, x_names, z_names, w_names)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_names(
        y: Vec<f64>,
        a: Vec<u8>,
        x: Mat<f64>,
        z: Mat<f64>,
        w: Mat<f64>,
        x_names: Vec<String>,
        z_names: Vec<String>,
        w_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::TooFewUnits(n));
        }
        for (label, rows) in [("a", a.len()), ("x", x.nrows()), ("z", z.nrows()), ("w", w.nrows())] {
            if rows != n {
                return Err(Error::DimensionMismatch(format!(
                    "`{label}` has {rows} rows, outcome has {n}"
                )));
            }
        }
        for (label, m, names) in [("x", &x, &x_names), ("z", &z, &z_names), ("w", &w, &w_names)] {
            if m.ncols() == 0 {
                return Err(Error::InvalidArgument(format!("`{label}` needs at least one column")));
            }
            if names.len() != m.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "`{label}` has {} columns but {} names",
                    m.ncols(),
                    names.len()
                )));
            }
            for i in 0..n {
                for j in 0..m.ncols() {
                    if !m[(i, j)].is_finite() {
                        return Err(Error::NonFinite(format!("{}[{i}]", names[j])));
                    }
                }
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("outcome at unit {i}")));
        }
        if let Some(i) = a.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryTreatment {
                row: i + 1,
                value: a[i].to_string(),
            });
        }
        Ok(Dataset {
            y,
            a,
            x,
            z,
            w,
            x_names,
            z_names,
            w_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }
    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }
    pub fn d_w(&self) -> usize {
        self.w.ncols()
    }
    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn a(&self) -> &[u8] {
        &self.a
    }
    pub fn x(&self) -> MatRef<'_, f64> {
        self.x.as_ref()
    }
    pub fn z(&self) -> MatRef<'_, f64> {
        self.z.as_ref()
    }
    pub fn w(&self) -> MatRef<'_, f64> {
        self.w.as_ref()
    }
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }
    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }
    pub fn w_names(&self) -> &[String] {
        &self.w_names
    }

    pub fn arm_count(&self, arm: u8) -> usize {
        self.a.iter().filter(|&&v| v == arm).count()
    }

    /// Errors with [`Error::EmptyArm`] unless both treatment arms are present.
    pub fn require_both_arms(&self) -> Result<()> {
        for arm in [0, 1] {
            if self.arm_count(arm) == 0 {
                return Err(Error::EmptyArm { arm });
            }
        }
        Ok(())
    }

    /// Units selected by index, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n()) {
            return Err(Error::InvalidArgument(format!(
                "row {bad} out of range for {} units",
                self.n()
            )));
        }
        Dataset::with_names(
            rows.iter().map(|&i| self.y[i]).collect(),
            rows.iter().map(|&i| self.a[i]).collect(),
            select_rows(self.x.as_ref(), rows),
            select_rows(self.z.as_ref(), rows),
            select_rows(self.w.as_ref(), rows),
            self.x_names.clone(),
            self.z_names.clone(),
            self.w_names.clone(),
        )
    }

    /// Copy with a replaced outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Dataset> {
        Dataset::with_names(
            y,
            self.a.clone(),
            self.x.clone(),
            self.z.clone(),
            self.w.clone(),
            self.x_names.clone(),
            self.z_names.clone(),
            self.w_names.clone(),
        )
    }

    /// Stacked design `[x | z | w]`.
    pub fn design(&self) -> Mat<f64> {
        let (dx, dz, dw) = (self.d_x(), self.d_z(), self.d_w());
        Mat::from_fn(self.n(), dx + dz + dw, |i, j| {
            if j < dx {
                self.x[(i, j)]
            } else if j < dx + dz {
                self.z[(i, j - dx)]
            } else {
                self.w[(i, j - dx - dz)]
            }
        })
    }

    /// Column indices into [`Dataset::design`] for a feature set; the proxy
    /// block comes first, then the covariates.
    pub fn feature_columns(&self, set: FeatureSet) -> Vec<usize> {
        let (dx, dz, dw) = (self.d_x(), self.d_z(), self.d_w());
        let xs = 0..dx;
        match set {
            FeatureSet::OutcomeProxies => (dx + dz..dx + dz + dw).chain(xs).collect(),
            FeatureSet::TreatmentProxies => (dx..dx + dz).chain(xs).collect(),
            FeatureSet::Covariates => xs.collect(),
        }
    }

    /// Writes the table as CSV with the dataset's column names.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path.as_ref())?;
        let mut header = vec!["y".to_string(), "a".to_string()];
        header.extend(self.x_names.iter().cloned());
        header.extend(self.z_names.iter().cloned());
        header.extend(self.w_names.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.y[i].to_string(), self.a[i].to_string()];
            for m in [&self.x, &self.z, &self.w] {
                rec.extend((0..m.ncols()).map(|j| m[(i, j)].to_string()));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|source| Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty()
        || ["na", "nan", "null", "none", "."].iter().any(|m| cell.eq_ignore_ascii_case(m))
}

/// Reads a header-row CSV and maps its columns onto dataset roles.
///
/// Row order is preserved. Rows with any missing cell in a used column are
/// rejected rather than dropped.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    schema.validate()?;
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        });
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let lookup = |name: &String| -> Result<usize> {
        index
            .get(name.as_str())
            .copied()
            .ok_or_else(|| Error::UnknownColumn(name.clone()))
    };
    let y_col = lookup(&schema.outcome)?;
    let a_col = lookup(&schema.treatment)?;
    let group = |cols: &[String]| cols.iter().map(lookup).collect::<Result<Vec<_>>>();
    let (x_cols, z_cols, w_cols) = (
        group(&schema.covariates)?,
        group(&schema.z_proxies)?,
        group(&schema.w_proxies)?,
    );

    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    let mut zs: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |col: usize| -> Result<&str> {
            let v = record.get(col).unwrap_or("");
            if is_missing(v) {
                Err(Error::MissingValue {
                    row,
                    column: headers[col].to_string(),
                })
            } else {
                Ok(v)
            }
        };
        let number = |col: usize| -> Result<f64> {
            let v = cell(col)?;
            v.parse::<f64>()
                .ok()
                .filter(|f| f.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    column: headers[col].to_string(),
                    value: v.to_string(),
                })
        };
        y.push(number(y_col)?);
        let raw = cell(a_col)?;
        let arm = match raw.parse::<f64>() {
            Ok(v) if v == 0.0 => 0,
            Ok(v) if v == 1.0 => 1,
            _ => {
                return Err(Error::NonBinaryTreatment {
                    row,
                    value: raw.to_string(),
                })
            }
        };
        a.push(arm);
        for (cols, buf) in [(&x_cols, &mut xs), (&z_cols, &mut zs), (&w_cols, &mut ws)] {
            for &c in cols.iter() {
                buf.push(number(c)?);
            }
        }
    }
    let n = y.len();
    if n < 2 {
        return Err(Error::TooFewUnits(n));
    }
    let to_mat = |buf: &[f64], d: usize| Mat::from_fn(n, d, |i, j| buf[i * d + j]);
    Dataset::with_names(
        y,
        a,
        to_mat(&xs, x_cols.len()),
        to_mat(&zs, z_cols.len()),
        to_mat(&ws, w_cols.len()),
        schema.covariates.clone(),
        schema.z_proxies.clone(),
        schema.w_proxies.clone(),
    )
}

/// Partition of units into `n_folds` evenly sized folds.
///
/// Fold labels are 0-based here; exported files use 1-based labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub n_folds: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    /// Units in fold `fold`, ascending.
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// Units outside fold `fold`, ascending.
    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded random permutation split into `n_folds` folds whose sizes differ by
/// at most one.
pub fn assign_folds(n: usize, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 || n_folds > n {
        return Err(Error::InvalidArgument(format!(
            "fold count must satisfy 2 <= C <= n, got C = {n_folds}, n = {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (k, &unit) in perm.iter().enumerate() {
        fold_of[unit] = k % n_folds;
    }
    Ok(FoldAssignment {
        fold_of,
        n_folds,
        seed,
    })
}

/// Per-column affine normalization to mean 0 and sample sd 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Columns that were constant on the fitting data (scale forced to 1).
    pub degenerate: Vec<bool>,
}

impl Standardizer {
    pub fn fit(m: MatRef<'_, f64>) -> Result<Self> {
        let n = m.nrows();
        if n < 2 {
            return Err(Error::TooFewUnits(n));
        }
        let d = m.ncols();
        let mut means = Vec::with_capacity(d);
        let mut scales = Vec::with_capacity(d);
        let mut degenerate = Vec::with_capacity(d);
        for j in 0..d {
            let mean = (0..n).map(|i| m[(i, j)]).sum::<f64>() / n as f64;
            let ss: f64 = (0..n).map(|i| (m[(i, j)] - mean).powi(2)).sum();
            let sd = (ss / (n - 1) as f64).sqrt();
            let constant = !(sd > 1e-12 * (1.0 + mean.abs()));
            means.push(mean);
            scales.push(if constant { 1.0 } else { sd });
            degenerate.push(constant);
        }
        Ok(Standardizer {
            means,
            scales,
            degenerate,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn transform(&self, m: MatRef<'_, f64>) -> Result<Mat<f64>> {
        self.check(m)?;
        Ok(Mat::from_fn(m.nrows(), m.ncols(), |i, j| {
            (m[(i, j)] - self.means[j]) / self.scales[j]
        }))
    }

    pub fn inverse_transform(&self, m: MatRef<'_, f64>) -> Result<Mat<f64>> {
        self.check(m)?;
        Ok(Mat::from_fn(m.nrows(), m.ncols(), |i, j| {
            m[(i, j)] * self.scales[j] + self.means[j]
        }))
    }

    /// Restriction to a subset of columns.
    pub fn select(&self, cols: &[usize]) -> Standardizer {
        Standardizer {
            means: cols.iter().map(|&c| self.means[c]).collect(),
            scales: cols.iter().map(|&c| self.scales[c]).collect(),
            degenerate: cols.iter().map(|&c| self.degenerate[c]).collect(),
        }
    }

    fn check(&self, m: MatRef<'_, f64>) -> Result<()> {
        if m.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "standardizer fitted on {} columns, got {}",
                self.dim(),
                m.ncols()
            )));
        }
        Ok(())
    }
}

/// Standardizes a matrix, returning the scaled copy and the fitted transform.
pub fn standardize(m: MatRef<'_, f64>) -> Result<(Mat<f64>, Standardizer)> {
    let s = Standardizer::fit(m)?;
    let scaled = s.transform(m)?;
    Ok((scaled, s))
}
