//! Datasets with per-cell missingness, CSV I/O, stratified splitting and a
//! synthetic portfolio generator.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::links::LinkSpec;

/// Tokens parsed as a missing cell.
pub const MISSING_TOKENS: [&str; 2] = ["", "NA"];

/// Rectangular table of optional numeric features plus a 0/1 response.
///
/// Stored column-major; every column has exactly `n_rows()` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_names: Vec<String>,
    columns: Vec<Vec<Option<f64>>>,
    y: Vec<u8>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        columns: Vec<Vec<Option<f64>>>,
        y: Vec<u8>,
    ) -> Result<Self> {
        if feature_names.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one feature".into()));
        }
        if y.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one row".into()));
        }
        if feature_names.len() != columns.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                columns.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate feature {name:?}")));
            }
        }
        for (name, col) in feature_names.iter().zip(&columns) {
            if col.len() != y.len() {
                return Err(Error::InvalidArgument(format!(
                    "column {name:?} has {} cells, expected {}",
                    col.len(),
                    y.len()
                )));
            }
            if col.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "column {name:?} contains a non-finite value"
                )));
            }
        }
        if let Some(row) = y.iter().position(|&v| v > 1) {
            return Err(Error::InvalidResponse {
                row,
                value: y[row].to_string(),
            });
        }
        Ok(Self {
            feature_names,
            columns,
            y,
        })
    }

    /// Builds a dataset with no missing cells.
    pub fn from_complete(
        feature_names: Vec<String>,
        columns: Vec<Vec<f64>>,
        y: Vec<u8>,
    ) -> Result<Self> {
        let columns = columns
            .into_iter()
            .map(|c| c.into_iter().map(Some).collect())
            .collect();
        Self::new(feature_names, columns, y)
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn column(&self, j: usize) -> &[Option<f64>] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<Option<f64>>] {
        &self.columns
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn column_by_name(&self, name: &str) -> Result<&[Option<f64>]> {
        Ok(&self.columns[self.index_of(name)?])
    }

    /// The named column with every cell present, or the first missing cell.
    pub fn complete_column(&self, name: &str) -> Result<Vec<f64>> {
        let col = self.column_by_name(name)?;
        col.iter()
            .enumerate()
            .map(|(row, v)| {
                v.ok_or_else(|| Error::MissingCell {
                    row,
                    column: name.to_string(),
                })
            })
            .collect()
    }

    pub fn n_defaults(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1).count()
    }

    pub fn missing_count(&self) -> usize {
        self.columns
            .iter()
            .map(|c| c.iter().filter(|v| v.is_none()).count())
            .sum()
    }

    pub fn has_missing(&self) -> bool {
        self.columns.iter().any(|c| c.iter().any(Option::is_none))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Copy with column `j` replaced.
    pub fn with_column(&self, j: usize, values: Vec<Option<f64>>) -> Result<Dataset> {
        let mut columns = self.columns.clone();
        columns[j] = values;
        Dataset::new(self.feature_names.clone(), columns, self.y.clone())
    }

    /// Copy with every column replaced.
    pub fn with_columns(&self, columns: Vec<Vec<Option<f64>>>) -> Result<Dataset> {
        Dataset::new(self.feature_names.clone(), columns, self.y.clone())
    }

    pub fn write_csv<W: Write>(&self, writer: W, response_name: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(response_name);
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n_rows() {
            record.clear();
            for col in &self.columns {
                record.push(match col[i] {
                    Some(v) => v.to_string(),
                    None => "NA".to_string(),
                });
            }
            record.push(self.y[i].to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, response_name: &str) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), response_name)
    }
}

/// Parses one CSV cell; `None` for a missing token.
pub fn parse_cell(raw: &str) -> Option<std::result::Result<f64, ()>> {
    let s = raw.trim();
    if MISSING_TOKENS.contains(&s) {
        return None;
    }
    Some(s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or(()))
}

/// Reads a dataset from CSV. Rows in error messages are 1-based data rows.
pub fn read_csv<R: Read>(reader: R, response_name: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let response_idx = headers
        .iter()
        .position(|h| h == response_name)
        .ok_or_else(|| Error::MissingColumn(response_name.to_string()))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != response_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); feature_names.len()];
    let mut y = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let mut k = 0;
        for (j, raw) in record.iter().enumerate() {
            if j == response_idx {
                let v = match parse_cell(raw) {
                    Some(Ok(v)) if v == 0.0 || v == 1.0 => v as u8,
                    _ => {
                        return Err(Error::InvalidResponse {
                            row,
                            value: raw.to_string(),
                        })
                    }
                };
                y.push(v);
            } else {
                let cell = match parse_cell(raw) {
                    None => None,
                    Some(Ok(v)) => Some(v),
                    Some(Err(())) => {
                        return Err(Error::MalformedCell {
                            row,
                            column: headers[j].clone(),
                            value: raw.to_string(),
                        })
                    }
                };
                columns[k].push(cell);
                k += 1;
            }
        }
    }
    Dataset::new(feature_names, columns, y)
}

pub fn load_csv(path: impl AsRef<Path>, response_name: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), response_name)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Splits defaults and non-defaults independently into train/control parts.
///
/// Each part keeps the original row order.
pub fn stratified_split(
    ds: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(ds.n_rows());
    let mut test = Vec::with_capacity(ds.n_rows());
    for class in [1u8, 0u8] {
        let mut idx: Vec<usize> = (0..ds.n_rows()).filter(|&i| ds.y[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::CannotStratify {
                class,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let k = round_half_up(train_fraction * idx.len() as f64).min(idx.len());
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.select_rows(&train), ds.select_rows(&test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum CovariateDist {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
}

/// Named truth functions for additive effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum TruthFn {
    /// amplitude · sin(2πx)
    Sin2Pi { amplitude: f64 },
    /// slope · x
    Linear { slope: f64 },
    /// coef · (x − center)²
    Quadratic { coef: f64, center: f64 },
    /// coef · exp(rate · x)
    Exp { coef: f64, rate: f64 },
    /// coef · max(0, x − knot)
    Hinge { coef: f64, knot: f64 },
    Zero,
}

impl TruthFn {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            TruthFn::Sin2Pi { amplitude } => amplitude * (2.0 * std::f64::consts::PI * x).sin(),
            TruthFn::Linear { slope } => slope * x,
            TruthFn::Quadratic { coef, center } => coef * (x - center).powi(2),
            TruthFn::Exp { coef, rate } => coef * (rate * x).exp(),
            TruthFn::Hinge { coef, knot } => coef * (x - knot).max(0.0),
            TruthFn::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEffect {
    pub name: String,
    pub coefficient: f64,
    pub dist: CovariateDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothEffect {
    pub name: String,
    pub truth: TruthFn,
    pub dist: CovariateDist,
}

/// Missing-at-random mechanism: the chance that a cell of a target column
/// is missing grows linearly with the rank of an always-observed driver,
/// `p = rate · (1 + strength · (2r − 1))` with `r` the driver's mid-rank
/// fraction. Averaged over rows this equals `rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarMechanism {
    pub targets: Vec<String>,
    pub driver: String,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    pub intercept: f64,
    #[serde(default)]
    pub linear_effects: Vec<LinearEffect>,
    #[serde(default)]
    pub smooth_effects: Vec<SmoothEffect>,
    pub link: LinkSpec,
    #[serde(default)]
    pub missing_rate: f64,
    #[serde(default)]
    pub missing_mechanism: Option<MarMechanism>,
    /// When false, a linear predictor outside the link support is an error
    /// instead of a saturated probability.
    #[serde(default = "default_true")]
    pub clamp_support: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl SimSpec {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("simulation needs n >= 1".into()));
        }
        if self.linear_effects.is_empty() && self.smooth_effects.is_empty() {
            return Err(Error::InvalidArgument("simulation needs at least one covariate".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::InvalidArgument(format!(
                "missing rate must lie in [0, 1), got {}",
                self.missing_rate
            )));
        }
        self.link.validate()?;
        for dist in self
            .linear_effects
            .iter()
            .map(|e| e.dist)
            .chain(self.smooth_effects.iter().map(|e| e.dist))
        {
            let ok = match dist {
                CovariateDist::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
                CovariateDist::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd > 0.0,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!("invalid distribution {dist:?}")));
            }
        }
        if self.missing_rate > 0.0 {
            let mech = self.missing_mechanism.as_ref().ok_or_else(|| {
                Error::InvalidArgument("missing_rate > 0 requires a missing_mechanism".into())
            })?;
            if mech.targets.iter().any(|t| t == &mech.driver) {
                return Err(Error::InvalidArgument(
                    "the MAR driver column must stay fully observed".into(),
                ));
            }
            if !(0.0..=1.0).contains(&mech.strength) {
                return Err(Error::InvalidArgument(format!(
                    "MAR strength must lie in [0, 1], got {}",
                    mech.strength
                )));
            }
        }
        Ok(())
    }
}

fn draw_column(dist: CovariateDist, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match dist {
        CovariateDist::Uniform { low, high } => {
            let d = Uniform::new(low, high).expect("validated bounds");
            (0..n).map(|_| d.sample(rng)).collect()
        }
        CovariateDist::Normal { mean, sd } => {
            let d = Normal::new(mean, sd).expect("validated sd");
            (0..n).map(|_| d.sample(rng)).collect()
        }
    }
}

/// Mid-rank fractions in (0, 1), ties averaged.
fn rank_fractions(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            out[k] = (mid + 0.5) / n as f64;
        }
        i = j + 1;
    }
    out
}

/// Draws a synthetic portfolio. Covariates are generated first, then the
/// response, then missingness.
pub fn simulate(spec: &SimSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut names = Vec::new();
    let mut cols = Vec::new();
    let mut eta = vec![spec.intercept; n];
    for e in &spec.linear_effects {
        let x = draw_column(e.dist, n, &mut rng);
        for (acc, v) in eta.iter_mut().zip(&x) {
            *acc += e.coefficient * v;
        }
        names.push(e.name.clone());
        cols.push(x);
    }
    for e in &spec.smooth_effects {
        let x = draw_column(e.dist, n, &mut rng);
        for (acc, v) in eta.iter_mut().zip(&x) {
            *acc += e.truth.eval(*v);
        }
        names.push(e.name.clone());
        cols.push(x);
    }
    let mut y = Vec::with_capacity(n);
    for &e in &eta {
        if !spec.clamp_support && !spec.link.in_support(e) {
            return Err(Error::OutsideSupport { eta: e });
        }
        let pd = spec.link.inverse(e);
        y.push(u8::from(rng.random::<f64>() < pd));
    }
    let mut columns: Vec<Vec<Option<f64>>> = cols
        .iter()
        .map(|c| c.iter().copied().map(Some).collect())
        .collect();
    if spec.missing_rate > 0.0 {
        let mech = spec.missing_mechanism.as_ref().expect("validated");
        let driver = names
            .iter()
            .position(|n| n == &mech.driver)
            .ok_or_else(|| Error::MissingColumn(mech.driver.clone()))?;
        let ranks = rank_fractions(&cols[driver]);
        let probs: Vec<f64> = ranks
            .iter()
            .map(|r| (spec.missing_rate * (1.0 + mech.strength * (2.0 * r - 1.0))).clamp(0.0, 1.0))
            .collect();
        for target in &mech.targets {
            let j = names
                .iter()
                .position(|n| n == target)
                .ok_or_else(|| Error::MissingColumn(target.clone()))?;
            for (cell, p) in columns[j].iter_mut().zip(&probs) {
                if rng.random::<f64>() < *p {
                    *cell = None;
                }
            }
        }
    }
    Dataset::new(names, columns, y)
}
