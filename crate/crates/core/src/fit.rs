//! Penalized IRLS for binary GLMs and GAMs under any [`LinkSpec`], with GCV
//! smoothing-parameter selection, tail-parameter selection, Wald inference,
//! prediction and model persistence.
//!
//! The design has the column layout `[intercept | linear terms | smooth
//! blocks]`, each smooth block being the `K − 1` centered B-spline columns
//! of one covariate. The fit maximizes
//! `Σ[yᵢ ln μᵢ + (1 − yᵢ) ln(1 − μᵢ)] − ½ Σⱼ λⱼ γⱼᵀSⱼγⱼ`.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::links::{LinkKind, LinkSpec};
use crate::smooth::{self, BasisBlock, Influence};

/// log₁₀λ grid searched by [`select_lambda`].
pub const LAMBDA_LOG10_GRID: [i32; 10] = [-3, -2, -1, 0, 1, 2, 3, 4, 5, 6];
const LAMBDA_SWEEPS: usize = 2;

/// Smooths with Edf below this are reported as linear.
pub const LINEAR_EDF: f64 = 1.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTermSpec {
    pub covariate: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub link: LinkSpec,
    pub linear_terms: Vec<String>,
    pub smooth_terms: Vec<SmoothTermSpec>,
    pub include_intercept: bool,
}

impl ModelSpec {
    pub fn new(link: LinkSpec, linear_terms: Vec<String>, smooth_terms: Vec<SmoothTermSpec>) -> Self {
        Self {
            link,
            linear_terms,
            smooth_terms,
            include_intercept: true,
        }
    }

    pub fn parametric(link: LinkSpec, linear_terms: &[&str]) -> Self {
        Self::new(link, linear_terms.iter().map(|s| s.to_string()).collect(), vec![])
    }

    pub fn with_link(&self, link: LinkSpec) -> Self {
        Self {
            link,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.link.validate()?;
        if !self.include_intercept {
            return Err(Error::InvalidArgument("models always include an intercept".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in self
            .linear_terms
            .iter()
            .chain(self.smooth_terms.iter().map(|s| &s.covariate))
        {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "covariate {name:?} appears more than once in the model"
                )));
            }
        }
        Ok(())
    }

    pub fn n_parametric(&self) -> usize {
        1 + self.linear_terms.len()
    }
}

/// How smoothing parameters are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaPolicy {
    Fixed(Vec<f64>),
    Select,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Relative change of the penalized deviance.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            max_halvings: 30,
            tolerance: 1e-8,
        }
    }
}

/// Design matrix plus the per-term bookkeeping needed to penalize it.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub blocks: Vec<BasisBlock>,
    /// Column range of each smooth block.
    pub smooth_columns: Vec<Range<usize>>,
    /// `Rⱼ` with `Sⱼ = RⱼᵀRⱼ`, used to evaluate penalties without the
    /// cancellation of `γᵀ(λS)γ` at large λ.
    penalty_roots: Vec<DMatrix<f64>>,
}

fn penalty_root(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = s.clone().symmetric_eigen();
    let max = eig.eigenvalues.max().max(0.0);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > 1e-12 * max)
        .collect();
    DMatrix::from_fn(keep.len(), s.ncols(), |r, c| {
        eig.eigenvalues[keep[r]].sqrt() * eig.eigenvectors[(c, keep[r])]
    })
}

impl Design {
    /// Builds the design for `spec` from training data, constructing bases.
    pub fn build(ds: &Dataset, spec: &ModelSpec) -> Result<Self> {
        let blocks = spec
            .smooth_terms
            .iter()
            .map(|t| smooth::build_basis(&t.covariate, &ds.complete_column(&t.covariate)?, t.k))
            .collect::<Result<Vec<_>>>()?;
        Self::with_blocks(ds, spec, blocks)
    }

    /// Builds the design for `spec` on new data with existing bases.
    pub fn with_blocks(ds: &Dataset, spec: &ModelSpec, blocks: Vec<BasisBlock>) -> Result<Self> {
        let n = ds.n_rows();
        let dims: usize = blocks.iter().map(BasisBlock::dim).sum();
        let p = spec.n_parametric() + dims;
        let mut x = DMatrix::zeros(n, p);
        x.column_mut(0).fill(1.0);
        for (j, name) in spec.linear_terms.iter().enumerate() {
            let col = ds.complete_column(name)?;
            x.column_mut(1 + j).copy_from_slice(&col);
        }
        let mut offset = spec.n_parametric();
        let mut smooth_columns = Vec::with_capacity(blocks.len());
        for block in &blocks {
            let col = ds.complete_column(&block.covariate)?;
            for (i, &v) in col.iter().enumerate() {
                for (j, b) in block.centered_row(v).into_iter().enumerate() {
                    x[(i, offset + j)] = b;
                }
            }
            smooth_columns.push(offset..offset + block.dim());
            offset += block.dim();
        }
        let penalty_roots = blocks.iter().map(|b| penalty_root(&b.penalty_matrix())).collect();
        Ok(Self {
            x,
            blocks,
            smooth_columns,
            penalty_roots,
        })
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Block-diagonal `Σⱼ λⱼ Sⱼ` embedded in the full coefficient space.
    pub fn penalty(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let p = self.ncols();
        let mut s = DMatrix::zeros(p, p);
        for ((block, cols), &lambda) in self.blocks.iter().zip(&self.smooth_columns).zip(lambdas) {
            if lambda == 0.0 {
                continue;
            }
            let sj = block.penalty_matrix();
            for a in 0..block.dim() {
                for b in 0..block.dim() {
                    s[(cols.start + a, cols.start + b)] = lambda * sj[(a, b)];
                }
            }
        }
        s
    }

    /// `βᵀS_λβ` evaluated through the penalty roots.
    pub fn penalty_value(&self, lambdas: &[f64], beta: &DVector<f64>) -> f64 {
        self.penalty_roots
            .iter()
            .zip(&self.smooth_columns)
            .zip(lambdas)
            .map(|((r, cols), &lambda)| {
                if lambda == 0.0 {
                    0.0
                } else {
                    lambda * (r * beta.rows(cols.start, cols.len())).norm_squared()
                }
            })
            .sum()
    }

    /// Stacked `√λⱼ Rⱼ` rows, so that `‖Pβ‖² = βᵀS_λβ`.
    fn penalty_rows(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let rows: usize = self.penalty_roots.iter().map(|r| r.nrows()).sum();
        let mut out = DMatrix::zeros(rows, self.ncols());
        let mut at = 0;
        for ((r, cols), &lambda) in self.penalty_roots.iter().zip(&self.smooth_columns).zip(lambdas) {
            let sl = lambda.sqrt();
            for a in 0..r.nrows() {
                for b in 0..r.ncols() {
                    out[(at + a, cols.start + b)] = sl * r[(a, b)];
                }
            }
            at += r.nrows();
        }
        out
    }

    /// Fails when the design (columns scaled to unit length) is numerically
    /// rank deficient.
    pub fn check_rank(&self) -> Result<()> {
        let norms: Vec<f64> = self.x.column_iter().map(|c| c.norm()).collect();
        if norms.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::RankDeficient);
        }
        let g = self.x.tr_mul(&self.x);
        let c = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] / (norms[i] * norms[j]));
        let eig = c.symmetric_eigen().eigenvalues;
        let max = eig.max();
        let min = eig.min();
        if !(min > 1e-11 * max) {
            return Err(Error::RankDeficient);
        }
        Ok(())
    }
}

/// Bernoulli deviance `−2 Σ[y ln μ + (1 − y) ln(1 − μ)]`.
pub fn deviance(y: &[u8], mu: &[f64]) -> f64 {
    -2.0 * y
        .iter()
        .zip(mu)
        .map(|(&yi, &m)| if yi == 1 { m.ln() } else { (-m).ln_1p() })
        .sum::<f64>()
}

/// Outcome of one P-IRLS run.
#[derive(Debug, Clone)]
pub struct PirlsFit {
    pub beta: DVector<f64>,
    pub eta: DVector<f64>,
    pub mu: Vec<f64>,
    pub deviance: f64,
    pub penalized_deviance: f64,
    /// Penalized deviance after each accepted step, starting from the
    /// intercept-only start.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `XᵀWX` at the returned coefficients.
    pub xtwx: DMatrix<f64>,
}

fn working_weights(link: &LinkSpec, eta: &DVector<f64>, mu: &[f64]) -> Result<Vec<f64>> {
    eta.iter()
        .zip(mu)
        .map(|(&e, &m)| {
            let d = link.dmu_deta(e)?.max(1e-150);
            Ok(d * d / (m * (1.0 - m)))
        })
        .collect()
}

fn weighted_cross(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, &wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        xw.row_mut(i).scale_mut(s);
    }
    xw.tr_mul(&xw)
}

/// Minimizes `‖√W(z − Xβ)‖² + ‖Pβ‖²` by QR of the stacked system, which
/// stays accurate where the normal equations lose digits (λ near 10¹²).
fn penalized_least_squares(x: &DMatrix<f64>, pen_rows: &DMatrix<f64>, w: &[f64], z: &[f64]) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    let m = n + pen_rows.nrows();
    let mut a = DMatrix::zeros(m, p);
    let mut b = DVector::zeros(m);
    for i in 0..n {
        let s = w[i].sqrt();
        for j in 0..p {
            a[(i, j)] = s * x[(i, j)];
        }
        b[i] = s * z[i];
    }
    a.view_mut((n, 0), (pen_rows.nrows(), p)).copy_from(pen_rows);
    let qr = a.qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    if !(r.diagonal().iter().all(|d| d.abs() > 1e-12 * diag_max)) {
        return Err(Error::RankDeficient);
    }
    let mut qtb = b;
    qr.q_tr_mul(&mut qtb);
    let qtb = qtb.rows(0, p).into_owned();
    r.solve_upper_triangular(&qtb).ok_or(Error::RankDeficient)
}

/// Penalized IRLS with step-halving.
///
/// Each step solves `(XᵀWX + S)β = XᵀWz` (as a stacked least-squares problem) with `wᵢ = (dμ/dη)²/(μᵢ(1 − μᵢ))`
/// and `zᵢ = ηᵢ + (yᵢ − μᵢ)/(dμ/dη)`. A step that leaves the link support or
/// raises the penalized deviance is halved toward the previous coefficients.
/// Without a warm start, working quantities start from `μ⁰ = (y + ȳ)/2`;
/// that first step is only halved (toward the intercept-only coefficients)
/// until it lies inside the support, and the trace starts after it.
pub fn pirls(
    design: &Design,
    y: &[u8],
    link: &LinkSpec,
    lambdas: &[f64],
    start: Option<&DVector<f64>>,
    opts: &FitOptions,
) -> Result<PirlsFit> {
    let x = &design.x;
    let pen_rows = design.penalty_rows(lambdas);
    let n = y.len();
    let p = x.ncols();
    let ybar = y.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    if ybar == 0.0 || ybar == 1.0 {
        return Err(Error::SingleClass);
    }
    let evaluate = |beta: &DVector<f64>| -> Option<(DVector<f64>, Vec<f64>, f64, f64)> {
        let eta = x * beta;
        if !eta.iter().all(|&e| link.in_support(e)) {
            return None;
        }
        let mu: Vec<f64> = eta.iter().map(|&e| link.inverse(e)).collect();
        let dev = deviance(y, &mu);
        let pen = dev + design.penalty_value(lambdas, beta);
        pen.is_finite().then_some((eta, mu, dev, pen))
    };

    // a cold start's first step comes from μ⁰ rather than from β, so it is
    // not a descent direction and only needs to stay inside the support
    let mut cold = true;
    let (mut beta, mut eta, mut mu, mut dev, mut pen, mut work_eta, mut work_mu) = match start {
        Some(b) if b.len() == p && evaluate(b).is_some() => {
            cold = false;
            let (eta, mu, dev, pen) = evaluate(b).expect("checked");
            (b.clone(), eta.clone(), mu.clone(), dev, pen, eta, mu)
        }
        _ => {
            let mut b0 = DVector::zeros(p);
            b0[0] = link.forward(ybar);
            let (eta, mu, dev, pen) = evaluate(&b0).ok_or(Error::OutsideSupport { eta: b0[0] })?;
            let mu0: Vec<f64> = y.iter().map(|&v| (v as f64 + ybar) / 2.0).collect();
            let eta0 = DVector::from_iterator(n, mu0.iter().map(|&m| link.forward(m)));
            (b0, eta, mu, dev, pen, eta0, mu0)
        }
    };
    let mut trace = vec![pen];
    let mut converged = false;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;

    while iterations < opts.max_iter {
        iterations += 1;
        let w = working_weights(link, &work_eta, &work_mu)?;
        let z: Vec<f64> = work_eta
            .iter()
            .zip(&work_mu)
            .zip(y)
            .map(|((&e, &m), &yi)| e + (yi as f64 - m) / link.dmu_deta(e).unwrap_or(1.0).max(1e-150))
            .collect();
        let mut candidate = penalized_least_squares(x, &pen_rows, &w, &z)?;

        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            if let Some(state) = evaluate(&candidate) {
                if cold || state.3 <= pen + 1e-12 * pen.abs() {
                    accepted = Some(state);
                    break;
                }
            }
            candidate = (&candidate + &beta) * 0.5;
        }
        let step = (&candidate - &beta).amax() / (1.0 + beta.amax());
        let was_cold = std::mem::replace(&mut cold, false);
        match accepted {
            Some((e, m, d, pn)) => {
                last_change = if was_cold { f64::INFINITY } else { (pen - pn).abs() / (pn.abs() + 0.1) };
                beta = candidate;
                eta = e;
                mu = m;
                dev = d;
                pen = pn;
                if was_cold {
                    trace.clear();
                }
                trace.push(pen);
                work_eta = eta.clone();
                work_mu = mu.clone();
                if last_change < opts.tolerance && step < 1e-7 {
                    converged = true;
                    break;
                }
            }
            None => {
                // no decrease along the step direction: stationary up to
                // rounding if the last accepted change was already tiny
                if last_change < opts.tolerance {
                    converged = true;
                }
                break;
            }
        }
    }
    if !converged {
        return Err(Error::NotConverged {
            iterations,
            deviance: dev,
            last_change,
        });
    }
    let w = working_weights(link, &eta, &mu)?;
    let xtwx = weighted_cross(x, &w);
    Ok(PirlsFit {
        beta,
        eta,
        mu,
        deviance: dev,
        penalized_deviance: pen,
        trace,
        iterations,
        converged,
        xtwx,
    })
}

/// Inference quantities derived from a converged P-IRLS fit.
struct Inference {
    covariance: DMatrix<f64>,
    influence: Influence,
}

fn inference(fit: &PirlsFit, penalty: &DMatrix<f64>) -> Result<Inference> {
    let a = &fit.xtwx + penalty;
    let chol = a.cholesky().ok_or(Error::RankDeficient)?;
    let cov = chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    let f = &cov * &fit.xtwx;
    Ok(Inference {
        influence: Influence {
            diag: f.diagonal().iter().copied().collect(),
            converged: fit.converged,
        },
        covariance: cov,
    })
}

/// Result of a fit at fixed smoothing parameters on a prebuilt design.
#[derive(Debug, Clone)]
pub struct DesignFit {
    pub pirls: PirlsFit,
    pub lambdas: Vec<f64>,
    pub edf: Vec<f64>,
    pub total_edf: f64,
    pub covariance: DMatrix<f64>,
    pub influence: Influence,
}

impl DesignFit {
    /// `n · D / (n − total Edf)²`.
    pub fn gcv(&self) -> f64 {
        let n = self.pirls.mu.len() as f64;
        n * self.pirls.deviance / (n - self.total_edf).powi(2)
    }
}

pub fn fit_design(
    design: &Design,
    y: &[u8],
    link: &LinkSpec,
    lambdas: &[f64],
    start: Option<&DVector<f64>>,
    opts: &FitOptions,
) -> Result<DesignFit> {
    if lambdas.len() != design.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} smoothing parameters for {} smooth terms",
            lambdas.len(),
            design.blocks.len()
        )));
    }
    if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::InvalidArgument("smoothing parameters must be finite and >= 0".into()));
    }
    let penalty = design.penalty(lambdas);
    let pirls = pirls(design, y, link, lambdas, start, opts)?;
    let inf = inference(&pirls, &penalty)?;
    let edf = smooth::effective_df(&design.smooth_columns, &inf.influence)?;
    let total_edf = inf.influence.diag.iter().sum();
    Ok(DesignFit {
        pirls,
        lambdas: lambdas.to_vec(),
        edf,
        total_edf,
        covariance: inf.covariance,
        influence: inf.influence,
    })
}

fn check_response(ds: &Dataset) -> Result<()> {
    let d = ds.n_defaults();
    if d == 0 || d == ds.n_rows() {
        return Err(Error::SingleClass);
    }
    Ok(())
}

fn prepare(ds: &Dataset, spec: &ModelSpec) -> Result<Design> {
    spec.validate()?;
    check_response(ds)?;
    let design = Design::build(ds, spec)?;
    design.check_rank()?;
    Ok(design)
}

/// Coordinate-wise GCV search over the design's smooth terms.
fn select_lambda_on_design(
    design: &Design,
    y: &[u8],
    link: &LinkSpec,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    if design.blocks.is_empty() {
        return Err(Error::InvalidArgument("lambda selection needs at least one smooth term".into()));
    }
    let mut lambdas = vec![1.0; design.blocks.len()];
    let mut warm: Option<DVector<f64>> = None;
    for _ in 0..LAMBDA_SWEEPS {
        for j in 0..lambdas.len() {
            let mut best: Option<(f64, f64, DVector<f64>)> = None;
            for &g in &LAMBDA_LOG10_GRID {
                let mut trial = lambdas.clone();
                trial[j] = 10f64.powi(g);
                let Ok(f) = fit_design(design, y, link, &trial, warm.as_ref(), opts) else {
                    continue;
                };
                let score = f.gcv();
                if best.as_ref().is_none_or(|b| score < b.1) {
                    best = Some((trial[j], score, f.pirls.beta.clone()));
                }
                warm = Some(f.pirls.beta);
            }
            let (lambda, _, beta) = best.ok_or(Error::NoGridPointConverged)?;
            lambdas[j] = lambda;
            warm = Some(beta);
        }
    }
    Ok(lambdas)
}

/// Chooses one λ per smooth term by coordinate-wise GCV grid search
/// (two sweeps over log₁₀λ ∈ {−3, …, 6}, starting from λ = 1).
pub fn select_lambda(ds: &Dataset, spec: &ModelSpec) -> Result<Vec<f64>> {
    let design = prepare(ds, spec)?;
    select_lambda_on_design(&design, ds.y(), &spec.link, &FitOptions::default())
}

pub fn fit(ds: &Dataset, spec: &ModelSpec, lambdas: &LambdaPolicy) -> Result<FittedModel> {
    fit_with_options(ds, spec, lambdas, &FitOptions::default())
}

pub fn fit_with_options(
    ds: &Dataset,
    spec: &ModelSpec,
    lambdas: &LambdaPolicy,
    opts: &FitOptions,
) -> Result<FittedModel> {
    let design = prepare(ds, spec)?;
    let lambdas = match lambdas {
        LambdaPolicy::Fixed(l) => l.clone(),
        LambdaPolicy::Select if design.blocks.is_empty() => vec![],
        LambdaPolicy::Select => select_lambda_on_design(&design, ds.y(), &spec.link, opts)?,
    };
    let f = fit_design(&design, ds.y(), &spec.link, &lambdas, None, opts)?;
    Ok(FittedModel::from_design_fit(spec.clone(), design, f, ds.n_rows()))
}

/// Default τ grid: −1.00, −0.95, …, −0.05.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=20).rev().map(|k| -(k as f64) / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauSelection {
    pub tau: f64,
    /// In-sample deviance per grid point; `None` where the fit failed.
    pub deviances: Vec<(f64, Option<f64>)>,
}

/// Picks τ on `grid` by in-sample deviance, ties going to the τ closest to
/// zero. Every grid fit uses `lambdas`. A one-point grid is returned as is.
pub fn select_tau(
    ds: &Dataset,
    spec: &ModelSpec,
    grid: &[f64],
    lambdas: &LambdaPolicy,
) -> Result<TauSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("tau grid is empty".into()));
    }
    if grid.len() == 1 {
        return Ok(TauSelection {
            tau: grid[0],
            deviances: vec![(grid[0], None)],
        });
    }
    let epsilon = spec.link.epsilon;
    let mut deviances = Vec::with_capacity(grid.len());
    for &tau in grid {
        let link = LinkSpec::gev(tau)?.with_epsilon(epsilon)?;
        let dev = fit(ds, &spec.with_link(link), lambdas).ok().map(|m| m.deviance);
        deviances.push((tau, dev));
    }
    let mut best: Option<(f64, f64)> = None;
    for &(tau, dev) in &deviances {
        let Some(dev) = dev else { continue };
        best = match best {
            None => Some((tau, dev)),
            Some((bt, bd)) => {
                let tie = (dev - bd).abs() <= 1e-9 * bd.abs().max(1.0);
                if (tie && tau.abs() < bt.abs()) || (!tie && dev < bd) {
                    Some((tau, dev))
                } else {
                    Some((bt, bd))
                }
            }
        };
    }
    let (tau, _) = best.ok_or(Error::NoGridPointConverged)?;
    Ok(TauSelection { tau, deviances })
}

/// Fits a GEV model with τ chosen from `grid`.
///
/// With smooth terms and λ to be selected, the search runs in stages: a
/// pilot τ from the model with every covariate linear, GCV λ at the pilot
/// τ (falling back to the next-best pilot τ when no λ fit converges), then
/// τ on the grid with those λ held fixed.
pub fn fit_selecting_tau(
    ds: &Dataset,
    spec: &ModelSpec,
    grid: &[f64],
    lambdas: &LambdaPolicy,
) -> Result<(FittedModel, TauSelection)> {
    let epsilon = spec.link.epsilon;
    let at = |tau: f64| -> Result<ModelSpec> { Ok(spec.with_link(LinkSpec::gev(tau)?.with_epsilon(epsilon)?)) };
    let lambdas = match lambdas {
        LambdaPolicy::Select if !spec.smooth_terms.is_empty() => {
            let mut linear = spec.linear_terms.clone();
            linear.extend(spec.smooth_terms.iter().map(|s| s.covariate.clone()));
            let pilot_spec = ModelSpec::new(spec.link, linear, vec![]);
            let pilot = select_tau(ds, &pilot_spec, grid, &LambdaPolicy::Select)?;
            // pilot τ values in order of fit; the first with a usable GCV
            // search supplies λ
            let mut ranked: Vec<(f64, f64)> = pilot.deviances.iter().filter_map(|&(t, d)| d.map(|d| (t, d))).collect();
            ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
            let mut found = None;
            for (tau, _) in ranked {
                match select_lambda(ds, &at(tau)?) {
                    Ok(l) => {
                        found = Some(l);
                        break;
                    }
                    Err(Error::NoGridPointConverged | Error::NotConverged { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            LambdaPolicy::Fixed(found.ok_or(Error::NoGridPointConverged)?)
        }
        other => other.clone(),
    };
    let selection = select_tau(ds, spec, grid, &lambdas)?;
    let model = fit(ds, &at(selection.tau)?, &lambdas)?;
    Ok((model, selection))
}

/// A converged model with everything needed to predict, summarize and plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub version: String,
    pub spec: ModelSpec,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub gamma_blocks: Vec<Vec<f64>>,
    pub basis: Vec<BasisBlock>,
    pub lambdas: Vec<f64>,
    pub tau: Option<f64>,
    pub epsilon: f64,
    /// Intercept first, then linear terms.
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub edf: Vec<f64>,
    pub est_rank: Vec<usize>,
    pub smooth_statistics: Vec<f64>,
    pub smooth_p_values: Vec<f64>,
    /// Bayesian covariance `(XᵀWX + S_λ)⁻¹`, row-major.
    pub covariance: Vec<Vec<f64>>,
    pub deviance: f64,
    pub penalized_deviance: f64,
    pub total_edf: f64,
    pub n_obs: usize,
    pub converged: bool,
    pub iterations: usize,
}

fn normal_two_sided(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * n.sf(z.abs())).clamp(0.0, 1.0)
}

/// Wald statistic of `gamma` against the rank-`rank` pseudo-inverse of `v`.
fn wald_rank(gamma: &DVector<f64>, v: &DMatrix<f64>, rank: usize) -> (f64, f64) {
    let eig = v.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut stat = 0.0;
    for &i in order.iter().take(rank) {
        let ev = eig.eigenvalues[i];
        if ev > 0.0 {
            let proj = eig.eigenvectors.column(i).dot(gamma);
            stat += proj * proj / ev;
        }
    }
    let chi = ChiSquared::new(rank as f64).expect("positive rank");
    (stat, chi.sf(stat).clamp(0.0, 1.0))
}

impl FittedModel {
    fn from_design_fit(spec: ModelSpec, design: Design, f: DesignFit, n_obs: usize) -> Self {
        let beta = &f.pirls.beta;
        let np = spec.n_parametric();
        let std_errors: Vec<f64> = (0..np).map(|i| f.covariance[(i, i)].sqrt()).collect();
        let p_values = (0..np).map(|i| normal_two_sided(beta[i] / std_errors[i])).collect();
        let mut gamma_blocks = Vec::new();
        let mut est_rank = Vec::new();
        let mut stats = Vec::new();
        let mut smooth_p = Vec::new();
        for ((block, cols), &edf) in design.blocks.iter().zip(&design.smooth_columns).zip(&f.edf) {
            let g = beta.rows(cols.start, cols.len()).into_owned();
            let v = f
                .covariance
                .view((cols.start, cols.start), (cols.len(), cols.len()))
                .into_owned();
            let r = smooth::estimated_rank(edf, block.k);
            let (s, pv) = wald_rank(&g, &v, r);
            gamma_blocks.push(g.iter().copied().collect());
            est_rank.push(r);
            stats.push(s);
            smooth_p.push(pv);
        }
        let covariance = (0..f.covariance.nrows())
            .map(|i| f.covariance.row(i).iter().copied().collect())
            .collect();
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            tau: spec.link.tau(),
            epsilon: spec.link.epsilon,
            alpha: beta[0],
            beta: beta.rows(1, np - 1).iter().copied().collect(),
            gamma_blocks,
            basis: design.blocks,
            lambdas: f.lambdas,
            std_errors,
            p_values,
            edf: f.edf,
            est_rank,
            smooth_statistics: stats,
            smooth_p_values: smooth_p,
            covariance,
            deviance: f.pirls.deviance,
            penalized_deviance: f.pirls.penalized_deviance,
            total_edf: f.total_edf,
            n_obs,
            converged: f.pirls.converged,
            iterations: f.pirls.iterations,
            spec,
        }
    }

    pub fn link(&self) -> LinkSpec {
        self.spec.link
    }

    /// Full coefficient vector in design order.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut c = vec![self.alpha];
        c.extend_from_slice(&self.beta);
        for g in &self.gamma_blocks {
            c.extend_from_slice(g);
        }
        c
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let p = self.covariance.len();
        DMatrix::from_fn(p, p, |i, j| self.covariance[i][j])
    }

    pub fn design(&self, ds: &Dataset) -> Result<Design> {
        Design::with_blocks(ds, &self.spec, self.basis.clone())
    }

    pub fn linear_predictor(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let design = self.design(ds)?;
        let beta = DVector::from_vec(self.coefficients());
        Ok((&design.x * beta).iter().copied().collect())
    }

    pub fn predict(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let link = self.link();
        Ok(self
            .linear_predictor(ds)?
            .into_iter()
            .map(|e| link.inverse(e))
            .collect())
    }

    /// GCV score of the fit.
    pub fn gcv(&self) -> f64 {
        let n = self.n_obs as f64;
        n * self.deviance / (n - self.total_edf).powi(2)
    }

    fn smooth_index(&self, term: &str) -> Result<usize> {
        self.basis
            .iter()
            .position(|b| b.covariate == term)
            .ok_or_else(|| Error::UnknownTerm(term.to_string()))
    }

    fn smooth_offset(&self, idx: usize) -> usize {
        self.spec.n_parametric() + self.basis[..idx].iter().map(BasisBlock::dim).sum::<usize>()
    }

    pub fn summarize(&self) -> Result<Summary> {
        if !self.converged {
            return Err(Error::NotConvergedModel);
        }
        let mut names = vec!["(Intercept)".to_string()];
        names.extend(self.spec.linear_terms.iter().cloned());
        let estimates = self.coefficients();
        let parametric = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| CoefficientRow {
                name,
                estimate: estimates[i],
                std_error: self.std_errors[i],
                z_value: estimates[i] / self.std_errors[i],
                p_value: self.p_values[i],
            })
            .collect();
        let smooth = self
            .basis
            .iter()
            .enumerate()
            .map(|(j, b)| SmoothRow {
                name: b.covariate.clone(),
                edf: self.edf[j],
                est_rank: self.est_rank[j],
                statistic: self.smooth_statistics[j],
                p_value: self.smooth_p_values[j],
                linear: self.edf[j] < LINEAR_EDF,
            })
            .collect();
        Ok(Summary {
            link: self.spec.link.name(),
            parametric,
            smooth,
            deviance: self.deviance,
            total_edf: self.total_edf,
            n_obs: self.n_obs,
        })
    }

    /// Fitted smooth with pointwise 95% bands on an even grid over the
    /// training range.
    pub fn smooth_curve(&self, term: &str, grid_size: usize) -> Result<SmoothCurve> {
        let idx = self.smooth_index(term)?;
        if grid_size < 2 {
            return Err(Error::InvalidArgument("curve grid needs at least 2 points".into()));
        }
        let block = &self.basis[idx];
        let gamma = &self.gamma_blocks[idx];
        let off = self.smooth_offset(idx);
        let d = block.dim();
        let v = self.covariance_matrix().view((off, off), (d, d)).into_owned();
        let step = (block.upper - block.lower) / (grid_size - 1) as f64;
        let mut curve = SmoothCurve {
            term: term.to_string(),
            x: Vec::with_capacity(grid_size),
            fit: Vec::with_capacity(grid_size),
            lower: Vec::with_capacity(grid_size),
            upper: Vec::with_capacity(grid_size),
        };
        for i in 0..grid_size {
            let x = if i + 1 == grid_size {
                block.upper
            } else {
                block.lower + step * i as f64
            };
            let b = DVector::from_vec(block.centered_row(x));
            let fit: f64 = b.iter().zip(gamma).map(|(a, g)| a * g).sum();
            let se = b.dot(&(&v * &b)).max(0.0).sqrt();
            curve.x.push(x);
            curve.fit.push(fit);
            curve.lower.push(fit - 1.96 * se);
            curve.upper.push(fit + 1.96 * se);
        }
        Ok(curve)
    }

    /// Smooth term evaluated at arbitrary points (clamped to its range).
    pub fn eval_smooth(&self, term: &str, x: &[f64]) -> Result<Vec<f64>> {
        let idx = self.smooth_index(term)?;
        let block = &self.basis[idx];
        Ok(x.iter().map(|&v| block.eval(&self.gamma_blocks[idx], v)).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: FittedModel = serde_json::from_str(s)?;
        m.spec.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn predict(model: &FittedModel, ds: &Dataset) -> Result<Vec<f64>> {
    model.predict(ds)
}

pub fn summarize(model: &FittedModel) -> Result<Summary> {
    model.summarize()
}

pub fn smooth_curve(model: &FittedModel, term: &str, grid_size: usize) -> Result<SmoothCurve> {
    model.smooth_curve(term, grid_size)
}

/// Gradient of `ℓ(β) − ½βᵀS_λβ` at `coefs` on `ds`.
pub fn penalized_score(model: &FittedModel, ds: &Dataset, coefs: &[f64]) -> Result<Vec<f64>> {
    let design = model.design(ds)?;
    let beta = DVector::from_column_slice(coefs);
    let eta = &design.x * &beta;
    let link = model.link();
    let mut r = DVector::zeros(eta.len());
    for (i, &e) in eta.iter().enumerate() {
        let mu = link.inverse(e);
        let d = link.dmu_deta(e)?;
        r[i] = (ds.y()[i] as f64 - mu) * d / (mu * (1.0 - mu));
    }
    let s = design.penalty(&model.lambdas);
    Ok((design.x.tr_mul(&r) - s * beta).iter().copied().collect())
}

/// `ℓ(β) − ½βᵀS_λβ` at `coefs` on `ds`.
pub fn penalized_log_likelihood(model: &FittedModel, ds: &Dataset, coefs: &[f64]) -> Result<f64> {
    let design = model.design(ds)?;
    let beta = DVector::from_column_slice(coefs);
    let eta = &design.x * &beta;
    let link = model.link();
    let mu: Vec<f64> = eta.iter().map(|&e| link.inverse(e)).collect();
    Ok(-0.5 * deviance(ds.y(), &mu) - 0.5 * design.penalty_value(&model.lambdas, &beta))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothRow {
    pub name: String,
    pub edf: f64,
    pub est_rank: usize,
    pub statistic: f64,
    pub p_value: f64,
    /// Edf ≈ 1: the estimate is a straight line.
    pub linear: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub link: String,
    pub parametric: Vec<CoefficientRow>,
    pub smooth: Vec<SmoothRow>,
    pub deviance: f64,
    pub total_edf: f64,
    pub n_obs: usize,
}

impl Summary {
    pub fn linear_smooths(&self) -> impl Iterator<Item = &SmoothRow> {
        self.smooth.iter().filter(|r| r.linear)
    }
}

fn fmt_p(p: f64) -> String {
    if p < 2e-16 {
        "< 2e-16".to_string()
    } else {
        format!("{p:.3e}")
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Link: {}", self.link)?;
        writeln!(f)?;
        writeln!(f, "Parametric coefficients:")?;
        writeln!(f, "{:<24} {:>12} {:>12} {:>10}", "", "Estimate", "Std.Error", "p-value")?;
        for r in &self.parametric {
            writeln!(
                f,
                "{:<24} {:>12.5} {:>12.5} {:>10}",
                r.name,
                r.estimate,
                r.std_error,
                fmt_p(r.p_value)
            )?;
        }
        let nonlinear: Vec<_> = self.smooth.iter().filter(|r| !r.linear).collect();
        if !nonlinear.is_empty() {
            writeln!(f)?;
            writeln!(f, "Smooth terms:")?;
            writeln!(f, "{:<24} {:>8} {:>9} {:>10}", "", "Edf", "Est.rank", "p-value")?;
            for r in nonlinear {
                writeln!(f, "{:<24} {:>8.3} {:>9} {:>10}", r.name, r.edf, r.est_rank, fmt_p(r.p_value))?;
            }
        }
        let linear: Vec<_> = self.linear_smooths().collect();
        if !linear.is_empty() {
            writeln!(f)?;
            writeln!(f, "Smooth terms estimated as linear (Edf ~ 1):")?;
            for r in linear {
                writeln!(f, "{:<24} {:>8.3} {:>9} {:>10}", r.name, r.edf, r.est_rank, fmt_p(r.p_value))?;
            }
        }
        writeln!(f)?;
        writeln!(
            f,
            "Deviance = {:.4}  total Edf = {:.3}  n = {}",
            self.deviance, self.total_edf, self.n_obs
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothCurve {
    pub term: String,
    pub x: Vec<f64>,
    pub fit: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SmoothCurve {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "fit", "lo95", "hi95"])?;
        for i in 0..self.x.len() {
            w.write_record([
                self.x[i].to_string(),
                self.fit[i].to_string(),
                self.lower[i].to_string(),
                self.upper[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// True for the logit link, whose fits are symmetric under relabeling.
pub fn is_symmetric_link(link: &LinkSpec) -> bool {
    matches!(link.kind, LinkKind::Logit)
}
