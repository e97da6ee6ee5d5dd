//! Weights-of-Evidence coarse classing and fully conditional specification
//! (FCS) multiple imputation.
//!
//! A WoE table cuts a feature at its training quantiles into fine classes,
//! keeps missing values in their own class, and codes every class by
//! `ln((b/g)/(B/G))`, the log of its bad/good odds relative to the sample.
//! Positive values mark classes riskier than the sample.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fit::FittedModel;
use crate::smooth::quantile_sorted;

pub const DEFAULT_BINS: usize = 10;
/// Added to every count when some populated class has a zero cell.
pub const ZERO_CELL_OFFSET: f64 = 0.5;
pub const DEFAULT_MIN_RATE_GAP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WoeBin {
    pub bads: u64,
    pub goods: u64,
    pub woe: f64,
}

impl WoeBin {
    fn count(&self) -> u64 {
        self.bads + self.goods
    }

    fn bad_rate(&self) -> f64 {
        if self.count() == 0 {
            0.0
        } else {
            self.bads as f64 / self.count() as f64
        }
    }
}

/// Per-feature WoE coding.
///
/// Finite class `i` covers `(edges[i − 1], edges[i]]`, with the first and
/// last classes open to −∞ and +∞.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WoeTable {
    pub feature: String,
    pub edges: Vec<f64>,
    pub bins: Vec<WoeBin>,
    pub missing_bin: WoeBin,
    pub total_bads: u64,
    pub total_goods: u64,
    /// Count offset used in the WoE formula (0 or [`ZERO_CELL_OFFSET`]).
    pub smoothing: f64,
}

impl WoeTable {
    /// Index of the finite class containing `v`.
    pub fn bin_index(&self, v: f64) -> usize {
        self.edges.partition_point(|&e| e < v)
    }

    /// Recomputes smoothing and WoE values from the counts. An empty missing
    /// class takes WoE 0 and does not trigger smoothing.
    fn recompute(&mut self) {
        let populated_missing = self.missing_bin.count() > 0;
        let zero_cell = self
            .bins
            .iter()
            .chain(populated_missing.then_some(&self.missing_bin))
            .any(|b| b.bads == 0 || b.goods == 0);
        let c = if zero_cell { ZERO_CELL_OFFSET } else { 0.0 };
        let classes = self.bins.len() + usize::from(populated_missing);
        let bads_plus = self.total_bads as f64 + c * classes as f64;
        let goods_plus = self.total_goods as f64 + c * classes as f64;
        let woe = |b: &WoeBin| {
            ((b.bads as f64 + c) * goods_plus / ((b.goods as f64 + c) * bads_plus)).ln()
        };
        for b in &mut self.bins {
            b.woe = woe(b);
        }
        self.missing_bin.woe = if populated_missing { woe(&self.missing_bin) } else { 0.0 };
        self.smoothing = c;
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn count_bins(edges: &[f64], values: &[Option<f64>], y: &[u8]) -> (Vec<WoeBin>, WoeBin) {
    let empty = WoeBin {
        bads: 0,
        goods: 0,
        woe: 0.0,
    };
    let mut bins = vec![empty; edges.len() + 1];
    let mut missing = empty;
    for (v, &yi) in values.iter().zip(y) {
        let bin = match v {
            Some(v) => &mut bins[edges.partition_point(|&e| e < *v)],
            None => &mut missing,
        };
        if yi == 1 {
            bin.bads += 1;
        } else {
            bin.goods += 1;
        }
    }
    (bins, missing)
}

/// Fits a WoE table for `feature` on training data with `n_bins` quantile
/// classes. Duplicate cut points collapse and empty classes are dropped, so
/// fewer classes may result.
pub fn woe_fit(train: &Dataset, feature: &str, n_bins: usize) -> Result<WoeTable> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    let values = train.column_by_name(feature)?;
    let y = train.y();
    let bads = train.n_defaults() as u64;
    let goods = train.n_rows() as u64 - bads;
    if bads == 0 || goods == 0 {
        return Err(Error::SingleClass);
    }
    let mut sorted: Vec<f64> = values.iter().flatten().copied().collect();
    if sorted.is_empty() {
        return Err(Error::EntirelyMissing(feature.to_string()));
    }
    sorted.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..n_bins)
        .map(|i| quantile_sorted(&sorted, i as f64 / n_bins as f64))
        .collect();
    edges.dedup();
    // the top cut must leave something above it
    while edges.last().is_some_and(|&e| e >= sorted[sorted.len() - 1]) {
        edges.pop();
    }
    let (mut bins, missing) = count_bins(&edges, values, y);
    let mut i = 0;
    while i < bins.len() && bins.len() > 1 {
        if bins[i].count() == 0 {
            bins.remove(i);
            edges.remove(i.min(edges.len() - 1));
        } else {
            i += 1;
        }
    }
    let mut table = WoeTable {
        feature: feature.to_string(),
        edges,
        bins,
        missing_bin: missing,
        total_bads: bads,
        total_goods: goods,
        smoothing: 0.0,
    };
    table.recompute();
    Ok(table)
}

/// Greedy left-to-right merge of adjacent finite classes whose bad rates
/// differ by less than `min_rate_gap`, or where either class holds fewer
/// than `min_bin_count` observations. The missing class is never merged.
pub fn coarse_merge(table: &WoeTable, min_rate_gap: f64, min_bin_count: u64) -> WoeTable {
    let mut bins: Vec<WoeBin> = Vec::with_capacity(table.bins.len());
    let mut edges: Vec<f64> = Vec::with_capacity(table.edges.len());
    for (i, &b) in table.bins.iter().enumerate() {
        match bins.last_mut() {
            Some(cur)
                if (cur.bad_rate() - b.bad_rate()).abs() < min_rate_gap
                    || cur.count() < min_bin_count
                    || b.count() < min_bin_count =>
            {
                cur.bads += b.bads;
                cur.goods += b.goods;
            }
            _ => {
                if i > 0 {
                    edges.push(table.edges[i - 1]);
                }
                bins.push(b);
            }
        }
    }
    let mut out = WoeTable {
        edges,
        bins,
        ..table.clone()
    };
    out.recompute();
    out
}

/// Replaces each value by its class WoE; missing values take the missing
/// class WoE.
pub fn woe_transform(table: &WoeTable, values: &[Option<f64>]) -> Vec<f64> {
    values
        .iter()
        .map(|v| match v {
            Some(v) => table.bins[table.bin_index(*v)].woe,
            None => table.missing_bin.woe,
        })
        .collect()
}

/// WoE tables for a set of features, applied together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WoeEncoder {
    pub tables: Vec<WoeTable>,
}

impl WoeEncoder {
    /// Fits (and coarse-merges) one table per feature of `train`.
    pub fn fit(train: &Dataset, n_bins: usize, min_rate_gap: f64, min_bin_count: u64) -> Result<Self> {
        let tables = train
            .feature_names()
            .iter()
            .map(|f| Ok(coarse_merge(&woe_fit(train, f, n_bins)?, min_rate_gap, min_bin_count)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tables })
    }

    /// Codes every table's feature; other columns are left untouched.
    pub fn transform(&self, ds: &Dataset) -> Result<Dataset> {
        let mut columns = ds.columns().to_vec();
        for t in &self.tables {
            let j = ds.index_of(&t.feature)?;
            columns[j] = woe_transform(t, ds.column(j)).into_iter().map(Some).collect();
        }
        ds.with_columns(columns)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputationPolicy {
    pub m: usize,
    pub iterations: usize,
    pub seed: u64,
    pub noise: bool,
    /// Use the response as a predictor in every imputation model.
    pub use_response: bool,
}

impl Default for ImputationPolicy {
    fn default() -> Self {
        Self {
            m: 5,
            iterations: 10,
            seed: 0,
            noise: true,
            use_response: true,
        }
    }
}

/// A column imputed by its observed mean because its regression was
/// singular.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeanFallback {
    pub imputation: usize,
    pub sweep: usize,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputations {
    pub datasets: Vec<Dataset>,
    pub fallbacks: Vec<MeanFallback>,
}

/// Least squares with a rank check; `None` for a singular design.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let n = x.nrows();
    let p = x.ncols();
    if n <= p {
        return None;
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * max_diag) {
        return None;
    }
    let qty = qr.q().tr_mul(y);
    let coef = r.solve_upper_triangular(&qty)?;
    let resid = y - x * &coef;
    let sigma2 = resid.norm_squared() / (n - p) as f64;
    Some((coef, sigma2))
}

/// One FCS chain.
fn impute_chain(
    ds: &Dataset,
    policy: &ImputationPolicy,
    rng: &mut ChaCha8Rng,
    chain: usize,
    aux_rows: usize,
    fallbacks: &mut Vec<MeanFallback>,
) -> Result<Vec<Vec<f64>>> {
    let n = ds.n_rows();
    let p = ds.n_features();
    let observed: Vec<Vec<bool>> = ds.columns().iter().map(|c| c.iter().map(Option::is_some).collect()).collect();
    let means: Vec<f64> = ds
        .columns()
        .iter()
        .map(|c| {
            let obs: Vec<f64> = c.iter().flatten().copied().collect();
            obs.iter().sum::<f64>() / obs.len() as f64
        })
        .collect();
    let mut filled: Vec<Vec<f64>> = ds
        .columns()
        .iter()
        .zip(&means)
        .map(|(c, &m)| c.iter().map(|v| v.unwrap_or(m)).collect())
        .collect();
    let incomplete: Vec<usize> = (0..p).filter(|&j| observed[j].iter().any(|o| !o)).collect();
    let y: Vec<f64> = ds.y().iter().map(|&v| v as f64).collect();
    for sweep in 0..policy.iterations {
        for &j in &incomplete {
            let predictors: Vec<usize> = (0..p).filter(|&k| k != j).collect();
            let ncol = 1 + predictors.len() + usize::from(policy.use_response);
            let row = |i: usize, filled: &Vec<Vec<f64>>| -> Vec<f64> {
                let mut r = Vec::with_capacity(ncol);
                r.push(1.0);
                r.extend(predictors.iter().map(|&k| filled[k][i]));
                if policy.use_response {
                    // auxiliary rows carry no usable response
                    r.push(if i < n - aux_rows { y[i] } else { 0.0 });
                }
                r
            };
            let obs_rows: Vec<usize> = (0..n).filter(|&i| observed[j][i]).collect();
            let x = DMatrix::from_fn(obs_rows.len(), ncol, |r, c| row(obs_rows[r], &filled)[c]);
            let target = DVector::from_iterator(obs_rows.len(), obs_rows.iter().map(|&i| filled[j][i]));
            match least_squares(&x, &target) {
                Some((coef, sigma2)) => {
                    let noise = Normal::new(0.0, sigma2.max(0.0).sqrt()).expect("finite sd");
                    for i in (0..n).filter(|&i| !observed[j][i]) {
                        let fitted: f64 = row(i, &filled).iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
                        filled[j][i] = if policy.noise && sigma2 > 0.0 {
                            fitted + noise.sample(rng)
                        } else {
                            fitted
                        };
                    }
                }
                None => {
                    fallbacks.push(MeanFallback {
                        imputation: chain,
                        sweep,
                        column: ds.feature_names()[j].clone(),
                    });
                    for i in (0..n).filter(|&i| !observed[j][i]) {
                        filled[j][i] = means[j];
                    }
                }
            }
        }
    }
    Ok(filled)
}

fn check_imputable(ds: &Dataset, policy: &ImputationPolicy) -> Result<()> {
    if policy.m == 0 || policy.iterations == 0 {
        return Err(Error::InvalidArgument("imputation needs m >= 1 and iterations >= 1".into()));
    }
    for (name, c) in ds.feature_names().iter().zip(ds.columns()) {
        if c.iter().flatten().count() < 2 {
            return Err(Error::InvalidArgument(format!(
                "feature {name:?} needs at least 2 observed values"
            )));
        }
    }
    Ok(())
}

/// FCS multiple imputation: `m` independent chains, each starting from
/// column means and sweeping `iterations` times over the incomplete columns.
/// Observed cells are never changed.
pub fn impute_fcs(ds: &Dataset, policy: &ImputationPolicy) -> Result<Imputations> {
    impute_fcs_with_context(ds, None, policy)
}

/// FCS imputation of `ds` with the feature rows of `context` appended as
/// auxiliary data for the imputation regressions. Only the rows of `ds`
/// are returned.
pub fn impute_fcs_with_context(
    ds: &Dataset,
    context: Option<&Dataset>,
    policy: &ImputationPolicy,
) -> Result<Imputations> {
    let (work, aux_rows) = match context {
        None => (ds.clone(), 0),
        Some(ctx) => {
            if ctx.feature_names() != ds.feature_names() {
                return Err(Error::InvalidArgument(
                    "context data must have the same features".into(),
                ));
            }
            let columns = ds
                .columns()
                .iter()
                .zip(ctx.columns())
                .map(|(a, b)| a.iter().chain(b).copied().collect())
                .collect();
            let y = ds.y().iter().chain(ctx.y()).copied().collect();
            (Dataset::new(ds.feature_names().to_vec(), columns, y)?, ctx.n_rows())
        }
    };
    check_imputable(&work, policy)?;
    let mut master = ChaCha8Rng::seed_from_u64(policy.seed);
    let seeds: Vec<u64> = (0..policy.m).map(|_| master.random()).collect();
    let keep = ds.n_rows();
    let mut fallbacks = Vec::new();
    let mut datasets = Vec::with_capacity(policy.m);
    for (chain, &seed) in seeds.iter().enumerate() {
        if !work.has_missing() {
            datasets.push(ds.clone());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filled = impute_chain(&work, policy, &mut rng, chain, aux_rows, &mut fallbacks)?;
        let columns = filled
            .into_iter()
            .map(|c| c.into_iter().take(keep).map(Some).collect())
            .collect();
        datasets.push(ds.with_columns(columns)?);
    }
    Ok(Imputations {
        datasets,
        fallbacks,
    })
}

fn mean_vectors(vectors: &[Vec<f64>]) -> Vec<f64> {
    let m = vectors.len() as f64;
    let n = vectors[0].len();
    (0..n)
        .map(|i| vectors.iter().map(|v| v[i]).sum::<f64>() / m)
        .collect()
}

fn check_same_spec(models: &[FittedModel]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("no models to pool".into()))?;
    if models.iter().any(|m| m.spec.linear_terms != first.spec.linear_terms
        || m.spec.smooth_terms != first.spec.smooth_terms
        || std::mem::discriminant(&m.spec.link.kind) != std::mem::discriminant(&first.spec.link.kind))
    {
        return Err(Error::SpecMismatch);
    }
    Ok(())
}

/// Mean of the models' predicted PDs on `ds`.
pub fn pool_predictions(models: &[FittedModel], ds: &Dataset) -> Result<Vec<f64>> {
    check_same_spec(models)?;
    let preds = models.iter().map(|m| m.predict(ds)).collect::<Result<Vec<_>>>()?;
    Ok(mean_vectors(&preds))
}

/// Mean of predictions where model `k` scores its own completed dataset `k`.
pub fn pool_paired_predictions(models: &[FittedModel], datasets: &[Dataset]) -> Result<Vec<f64>> {
    check_same_spec(models)?;
    if models.len() != datasets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} models for {} datasets",
            models.len(),
            datasets.len()
        )));
    }
    let preds = models
        .iter()
        .zip(datasets)
        .map(|(m, d)| m.predict(d))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_vectors(&preds))
}

/// Rubin's-rules combination of one coefficient across imputations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledCoefficient {
    pub name: String,
    pub estimate: f64,
    pub within_variance: f64,
    pub between_variance: f64,
    pub total_std_error: f64,
}

/// Rubin's rules for the parametric coefficients (reporting only).
pub fn pool_coefficients(models: &[FittedModel]) -> Result<Vec<PooledCoefficient>> {
    check_same_spec(models)?;
    let m = models.len() as f64;
    let mut names = vec!["(Intercept)".to_string()];
    names.extend(models[0].spec.linear_terms.iter().cloned());
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let est: Vec<f64> = models.iter().map(|md| md.coefficients()[i]).collect();
            let mean = est.iter().sum::<f64>() / m;
            let within = models.iter().map(|md| md.std_errors[i].powi(2)).sum::<f64>() / m;
            let between = if models.len() > 1 {
                est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            PooledCoefficient {
                name,
                estimate: mean,
                within_variance: within,
                between_variance: between,
                total_std_error: (within + (1.0 + 1.0 / m) * between).sqrt(),
            }
        })
        .collect())
}
