//! Command-line front end: one subcommand per pipeline stage plus a
//! `pipeline` command that runs split → encode/impute → train → predict →
//! evaluate → curves over a grid of missing-value methods and models.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or fitting errors.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, simulate, stratified_split, Dataset, SimSpec};
use crate::error::{Error, Result};
use crate::eval::{compare_models, evaluate, MetricsReport, NamedReport};
use crate::fit::{default_tau_grid, fit, fit_selecting_tau, FittedModel, LambdaPolicy, ModelSpec, SmoothTermSpec, TauSelection};
use crate::links::LinkSpec;
use crate::preprocess::{
    impute_fcs, impute_fcs_with_context, pool_paired_predictions, pool_predictions, ImputationPolicy, WoeEncoder,
    DEFAULT_BINS, DEFAULT_MIN_RATE_GAP,
};
use crate::smooth::{DEFAULT_K, MIN_K};

/// Points per exported smooth curve.
pub const CURVE_POINTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Woe,
    Impute,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Woe => "woe",
            Method::Impute => "impute",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logit,
    Gev,
    /// Additive logistic model.
    Alogit,
    /// Additive GEV model.
    Bgeva,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Logit, ModelKind::Gev, ModelKind::Alogit, ModelKind::Bgeva];

    pub fn is_additive(self) -> bool {
        matches!(self, ModelKind::Alogit | ModelKind::Bgeva)
    }

    pub fn is_gev(self) -> bool {
        matches!(self, ModelKind::Gev | ModelKind::Bgeva)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Logit => "logit",
            ModelKind::Gev => "gev",
            ModelKind::Alogit => "alogit",
            ModelKind::Bgeva => "bgeva",
        })
    }
}

/// A real value or the keyword `select`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Choice {
    #[default]
    Select,
    Values(Vec<f64>),
}

impl FromStr for Choice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.trim().eq_ignore_ascii_case("select") {
            return Ok(Choice::Select);
        }
        s.split(',')
            .map(|v| {
                let v: f64 = v.trim().parse().map_err(|_| format!("expected a number or \"select\", got {v:?}"))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(format!("value {v} is not finite"))
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Choice::Values)
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::Select => f.write_str("select"),
            Choice::Values(v) => {
                let parts: Vec<String> = v.iter().map(f64::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl Serialize for Choice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Choice::Values(v) if v.len() == 1 => s.serialize_f64(v[0]),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Choice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Choice::Values(vec![v])),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Smooth term list `name:K,name:K,...`; a bare name takes the default K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothList(pub Vec<SmoothTermSpec>);

impl FromStr for SmoothList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|item| {
                let item = item.trim();
                let (name, k) = match item.split_once(':') {
                    Some((name, k)) => (name, k.parse().map_err(|_| format!("bad basis dimension in {item:?}"))?),
                    None => (item, DEFAULT_K),
                };
                if name.is_empty() {
                    return Err(format!("empty term name in {s:?}"));
                }
                if k < MIN_K {
                    return Err(format!("basis dimension for {name:?} must be at least {MIN_K}"));
                }
                Ok(SmoothTermSpec {
                    covariate: name.to_string(),
                    k,
                })
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(SmoothList)
    }
}

#[derive(Debug, Parser)]
#[command(name = "rarelink", version, about = "GEV and logit (additive) regression toolkit for low-default portfolios")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stratified train/control split.
    Split(SplitArgs),
    /// Fit WoE tables on training data and encode training and control data.
    Woe(WoeArgs),
    /// FCS multiple imputation of training (and control) data.
    Impute(ImputeArgs),
    /// Fit a model and write its JSON.
    Train(TrainArgs),
    /// Predict default probabilities with one or more saved models.
    Predict(PredictArgs),
    /// Compute defaults-only errors and AUC and update the comparison table.
    Evaluate(EvaluateArgs),
    /// Export fitted smooth curves with 95% bands.
    Curves(CurvesArgs),
    /// Simulate a dataset from a JSON simulation config.
    Simulate(SimulateArgs),
    /// Run the whole method × model grid.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (train.csv, control.csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WoeArgs {
    /// Training data; the tables are fitted on it.
    #[arg(long)]
    pub input: PathBuf,
    /// Control data encoded with the training tables.
    #[arg(long)]
    pub control: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_RATE_GAP)]
    pub min_rate_gap: f64,
    #[arg(long, default_value_t = 0)]
    pub min_bin_count: u64,
    /// Output directory (woe.json, train.csv, control.csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Control data, imputed with the training rows as auxiliary data.
    #[arg(long)]
    pub control: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// Impute by fitted values only, without residual draws.
    #[arg(long)]
    pub no_noise: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (train_<k>.csv, control_<k>.csv, diagnostics.csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Logit)]
    pub model: ModelKind,
    /// GEV tail parameter, or `select` for the grid −1.00, −0.95, …, −0.05.
    #[arg(long, default_value = "select", allow_negative_numbers = true)]
    pub tau: Choice,
    /// Smooth terms `name:K,...`; defaults to every feature.
    #[arg(long)]
    pub smooth: Option<SmoothList>,
    /// Smoothing parameter(s), one per smooth term or one for all, or `select`.
    #[arg(long, default_value = "select", allow_negative_numbers = true)]
    pub lambda: Choice,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training data; repeat for completed datasets of an imputation.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory (model.json or model_<k>.json, summaries).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Saved model; repeat to pool several.
    #[arg(long = "model-file", required = true)]
    pub model_file: Vec<PathBuf>,
    /// Data to score; give one per model to pair them.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value = "y")]
    pub response: String,
    /// Output CSV with columns y, pd.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predictions CSV with columns y, pd.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub model: String,
    /// Output directory (metrics.csv, comparison.csv, comparison.txt).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    #[arg(long = "model-file")]
    pub model_file: PathBuf,
    #[arg(long, default_value_t = CURVE_POINTS)]
    pub points: usize,
    /// Output directory (curve_<term>.csv per smooth term).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON simulation config.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "y")]
    pub response: String,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// JSON run config; when given, the other flags are not used.
    #[arg(long, conflicts_with_all = ["input", "method", "model"])]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    pub response: String,
    /// Missing-value methods; repeat or omit for both.
    #[arg(long, value_enum)]
    pub method: Vec<Method>,
    /// Models; repeat or omit for all four.
    #[arg(long, value_enum)]
    pub model: Vec<ModelKind>,
    #[arg(long, default_value = "select", allow_negative_numbers = true)]
    pub tau: Choice,
    #[arg(long)]
    pub smooth: Option<SmoothList>,
    #[arg(long, default_value = "select", allow_negative_numbers = true)]
    pub lambda: Choice,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn default_response() -> String {
    "y".into()
}
fn default_methods() -> Vec<Method> {
    vec![Method::Woe, Method::Impute]
}
fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}
fn default_train_frac() -> f64 {
    0.7
}
fn default_bins() -> usize {
    DEFAULT_BINS
}
fn default_rate_gap() -> f64 {
    DEFAULT_MIN_RATE_GAP
}
fn default_imputation() -> ImputationPolicy {
    ImputationPolicy::default()
}

/// Everything the pipeline needs; the JSON form of the `pipeline` flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: PathBuf,
    #[serde(default = "default_response")]
    pub response: String,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub tau: Choice,
    #[serde(default)]
    pub smooth: Option<Vec<SmoothTermSpec>>,
    #[serde(default)]
    pub lambda: Choice,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    pub out: PathBuf,
    #[serde(default = "default_bins")]
    pub woe_bins: usize,
    #[serde(default = "default_rate_gap")]
    pub min_rate_gap: f64,
    #[serde(default)]
    pub min_bin_count: u64,
    /// `seed` inside is replaced by a sub-seed of the master seed.
    #[serde(default = "default_imputation")]
    pub imputation: ImputationPolicy,
}

impl RunConfig {
    fn model_args(&self, model: ModelKind) -> ModelArgs {
        ModelArgs {
            model,
            tau: self.tau.clone(),
            smooth: self.smooth.clone().map(SmoothList),
            lambda: self.lambda.clone(),
        }
    }
}

/// Fatal outcomes of a command.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("rarelink: {e}");
            match e {
                CliError::Usage(_) => 1,
                CliError::Run(_) => 2,
            }
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Split(a) => cmd_split(&a),
        Command::Woe(a) => cmd_woe(&a),
        Command::Impute(a) => cmd_impute(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Curves(a) => cmd_curves(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Pipeline(a) => cmd_pipeline(&a),
    }
}

/// Deterministic per-stage seed derived from the master seed.
pub fn sub_seed(master: u64, stage: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stage);
    rng.next_u64()
}

const SPLIT_STAGE: u64 = 1;
const IMPUTE_TRAIN_STAGE: u64 = 2;
const IMPUTE_CONTROL_STAGE: u64 = 3;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

pub fn cmd_split(a: &SplitArgs) -> CliResult<()> {
    let ds = load_csv(&a.input, &a.response)?;
    let (train, control) = stratified_split(&ds, a.train_frac, a.seed)?;
    create_dir(&a.out)?;
    train.save_csv(a.out.join("train.csv"), &a.response)?;
    control.save_csv(a.out.join("control.csv"), &a.response)?;
    Ok(())
}

pub fn cmd_woe(a: &WoeArgs) -> CliResult<()> {
    if a.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let train = load_csv(&a.input, &a.response)?;
    let control = a.control.as_ref().map(|p| load_csv(p, &a.response)).transpose()?;
    let (encoder, train_w, control_w) = woe_stage(&train, control.as_ref(), a.bins, a.min_rate_gap, a.min_bin_count)?;
    create_dir(&a.out)?;
    encoder.save(a.out.join("woe.json"))?;
    train_w.save_csv(a.out.join("train.csv"), &a.response)?;
    if let Some(c) = control_w {
        c.save_csv(a.out.join("control.csv"), &a.response)?;
    }
    Ok(())
}

fn woe_stage(
    train: &Dataset,
    control: Option<&Dataset>,
    bins: usize,
    min_rate_gap: f64,
    min_bin_count: u64,
) -> Result<(WoeEncoder, Dataset, Option<Dataset>)> {
    let encoder = WoeEncoder::fit(train, bins, min_rate_gap, min_bin_count)?;
    let train_w = encoder.transform(train)?;
    let control_w = control.map(|c| encoder.transform(c)).transpose()?;
    Ok((encoder, train_w, control_w))
}

/// Completed training datasets and, when given, completed control datasets.
/// Control rows are imputed with the training features as auxiliary rows
/// and without the response.
pub fn impute_stage(
    train: &Dataset,
    control: Option<&Dataset>,
    policy: &ImputationPolicy,
    control_seed: u64,
    diagnostics: &mut Vec<(String, usize, usize, String)>,
) -> Result<(Vec<Dataset>, Option<Vec<Dataset>>)> {
    let t = impute_fcs(train, policy)?;
    diagnostics.extend(t.fallbacks.iter().map(|f| ("train".into(), f.imputation + 1, f.sweep + 1, f.column.clone())));
    let c = match control {
        None => None,
        Some(c) => {
            let cp = ImputationPolicy {
                seed: control_seed,
                use_response: false,
                ..*policy
            };
            let out = impute_fcs_with_context(c, Some(train), &cp)?;
            diagnostics
                .extend(out.fallbacks.iter().map(|f| ("control".into(), f.imputation + 1, f.sweep + 1, f.column.clone())));
            Some(out.datasets)
        }
    };
    Ok((t.datasets, c))
}

fn write_diagnostics(path: &Path, rows: &[(String, usize, usize, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample", "imputation", "sweep", "column"])?;
    for (s, i, sw, c) in rows {
        w.write_record([s.clone(), i.to_string(), sw.to_string(), c.clone()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_impute(a: &ImputeArgs) -> CliResult<()> {
    let train = load_csv(&a.input, &a.response)?;
    let control = a.control.as_ref().map(|p| load_csv(p, &a.response)).transpose()?;
    let policy = ImputationPolicy {
        m: a.m,
        iterations: a.iterations,
        seed: a.seed,
        noise: !a.no_noise,
        use_response: true,
    };
    let mut diag = Vec::new();
    let (tr, co) = impute_stage(&train, control.as_ref(), &policy, sub_seed(a.seed, IMPUTE_CONTROL_STAGE), &mut diag)?;
    create_dir(&a.out)?;
    for (k, d) in tr.iter().enumerate() {
        d.save_csv(a.out.join(format!("train_{}.csv", k + 1)), &a.response)?;
    }
    for (k, d) in co.iter().flatten().enumerate() {
        d.save_csv(a.out.join(format!("control_{}.csv", k + 1)), &a.response)?;
    }
    write_diagnostics(&a.out.join("diagnostics.csv"), &diag)?;
    Ok(())
}

fn distinct_count(ds: &Dataset, j: usize) -> usize {
    let mut v: Vec<f64> = ds.column(j).iter().flatten().copied().collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Builds the model specification shared by all training datasets.
///
/// Constant features are left out. A smooth term's K is capped at the
/// covariate's distinct count and the term becomes linear below the
/// minimum basis size.
pub fn build_spec(train_sets: &[Dataset], args: &ModelArgs) -> Result<ModelSpec> {
    let first = train_sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training data".into()))?;
    let names = first.feature_names();
    let distinct: Vec<usize> = (0..names.len())
        .map(|j| train_sets.iter().map(|d| distinct_count(d, j)).min().unwrap_or(0))
        .collect();
    let requested: Vec<SmoothTermSpec> = if !args.model.is_additive() {
        vec![]
    } else if let Some(list) = &args.smooth {
        for s in &list.0 {
            if !names.contains(&s.covariate) {
                return Err(Error::UnknownTerm(s.covariate.clone()));
            }
        }
        list.0.clone()
    } else {
        names
            .iter()
            .map(|n| SmoothTermSpec {
                covariate: n.clone(),
                k: DEFAULT_K,
            })
            .collect()
    };
    let mut linear = Vec::new();
    let mut smooth = Vec::new();
    for (j, name) in names.iter().enumerate() {
        if distinct[j] < 2 {
            eprintln!("rarelink: feature {name:?} is constant and left out of the model");
            continue;
        }
        match requested.iter().find(|s| &s.covariate == name) {
            Some(s) if s.k.min(distinct[j]) >= MIN_K => smooth.push(SmoothTermSpec {
                covariate: name.clone(),
                k: s.k.min(distinct[j]),
            }),
            _ => linear.push(name.clone()),
        }
    }
    let link = if !args.model.is_gev() {
        LinkSpec::logit()
    } else {
        match &args.tau {
            Choice::Values(v) if v.len() == 1 => LinkSpec::gev(v[0])?,
            Choice::Values(_) => return Err(Error::InvalidArgument("--tau takes a single value".into())),
            // placeholder until τ is selected
            Choice::Select => LinkSpec::gev(-0.5)?,
        }
    };
    let spec = ModelSpec::new(link, linear, smooth);
    spec.validate()?;
    Ok(spec)
}

fn lambda_policy(spec: &ModelSpec, lambda: &Choice) -> Result<LambdaPolicy> {
    match lambda {
        Choice::Select => Ok(LambdaPolicy::Select),
        Choice::Values(v) => {
            let n = spec.smooth_terms.len();
            if v.iter().any(|&l| l < 0.0) {
                return Err(Error::InvalidArgument("smoothing parameters must be >= 0".into()));
            }
            match v.len() {
                1 => Ok(LambdaPolicy::Fixed(vec![v[0]; n])),
                len if len == n => Ok(LambdaPolicy::Fixed(v.clone())),
                len => Err(Error::InvalidArgument(format!("{len} smoothing parameters for {n} smooth terms"))),
            }
        }
    }
}

/// One fitted model per training dataset.
pub fn train_models(train_sets: &[Dataset], args: &ModelArgs) -> Result<Vec<(FittedModel, Option<TauSelection>)>> {
    let spec = build_spec(train_sets, args)?;
    let policy = lambda_policy(&spec, &args.lambda)?;
    train_sets
        .iter()
        .map(|ds| {
            if args.model.is_gev() && args.tau == Choice::Select {
                let (m, sel) = fit_selecting_tau(ds, &spec, &default_tau_grid(), &policy)?;
                Ok((m, Some(sel)))
            } else {
                Ok((fit(ds, &spec, &policy)?, None))
            }
        })
        .collect()
}

fn write_tau_selection(path: &Path, sel: &TauSelection) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["tau", "deviance", "selected"])?;
    for (tau, dev) in &sel.deviances {
        w.write_record([
            tau.to_string(),
            dev.map_or_else(|| "NA".into(), |d| d.to_string()),
            (*tau == sel.tau).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes model JSON, summary text and τ-selection tables; returns the
/// model paths.
fn save_models(out: &Path, models: &[(FittedModel, Option<TauSelection>)]) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let single = models.len() == 1;
    let mut paths = Vec::new();
    for (k, (m, sel)) in models.iter().enumerate() {
        let suffix = if single { String::new() } else { format!("_{}", k + 1) };
        let path = out.join(format!("model{suffix}.json"));
        m.save(&path)?;
        write_text(&out.join(format!("summary{suffix}.txt")), &m.summarize()?.to_string())?;
        if let Some(sel) = sel {
            write_tau_selection(&out.join(format!("tau_selection{suffix}.csv")), sel)?;
        }
        paths.push(path);
    }
    Ok(paths)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let sets = a
        .input
        .iter()
        .map(|p| load_csv(p, &a.response))
        .collect::<Result<Vec<_>>>()?;
    let models = train_models(&sets, &a.model)?;
    save_models(&a.out, &models)?;
    Ok(())
}

/// Pooled predictions; with one dataset per model each model scores its
/// own dataset.
pub fn predict_pooled(models: &[FittedModel], data: &[Dataset]) -> Result<Vec<f64>> {
    match data.len() {
        1 => pool_predictions(models, &data[0]),
        _ => pool_paired_predictions(models, data),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    y: u8,
    pd: f64,
}

pub fn write_predictions(path: &Path, y: &[u8], pd: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (&y, &pd) in y.iter().zip(pd) {
        w.serialize(PredictionRow { y, pd })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<(Vec<u8>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut y = Vec::new();
    let mut pd = Vec::new();
    for row in r.deserialize() {
        let row: PredictionRow = row?;
        y.push(row.y);
        pd.push(row.pd);
    }
    Ok((y, pd))
}

pub fn cmd_predict(a: &PredictArgs) -> CliResult<()> {
    if a.input.len() != 1 && a.input.len() != a.model_file.len() {
        return Err(CliError::Usage("give one --input, or one per --model-file".into()));
    }
    let models = a.model_file.iter().map(FittedModel::load).collect::<Result<Vec<_>>>()?;
    let data = a.input.iter().map(|p| load_csv(p, &a.response)).collect::<Result<Vec<_>>>()?;
    let pd = predict_pooled(&models, &data)?;
    write_predictions(&a.out, data[0].y(), &pd)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetricsRow {
    method: String,
    model: String,
    mae_plus: f64,
    mse_plus: f64,
    auc: f64,
    n_defaults: usize,
    n_total: usize,
}

fn read_metrics(path: &Path) -> Result<Vec<NamedReport>> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| {
            let row: MetricsRow = row?;
            Ok(NamedReport {
                method: row.method,
                model: row.model,
                report: MetricsReport {
                    mae_plus: row.mae_plus,
                    mse_plus: row.mse_plus,
                    auc: row.auc,
                    n_defaults: row.n_defaults,
                    n_total: row.n_total,
                },
            })
        })
        .collect()
}

fn write_metrics(path: &Path, reports: &[NamedReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(MetricsRow {
            method: r.method.clone(),
            model: r.model.clone(),
            mae_plus: r.report.mae_plus,
            mse_plus: r.report.mse_plus,
            auc: r.report.auc,
            n_defaults: r.report.n_defaults,
            n_total: r.report.n_total,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Inserts or replaces the (method, model) row of `out/metrics.csv` and
/// rewrites the comparison table from all rows.
pub fn record_report(out: &Path, report: NamedReport) -> Result<Vec<NamedReport>> {
    create_dir(out)?;
    let path = out.join("metrics.csv");
    let mut reports = read_metrics(&path)?;
    match reports
        .iter_mut()
        .find(|r| r.method == report.method && r.model == report.model)
    {
        Some(slot) => *slot = report,
        None => reports.push(report),
    }
    write_metrics(&path, &reports)?;
    let table = compare_models(&reports);
    let mut file = fs::File::create(out.join("comparison.csv"))?;
    table.write_csv(&mut file)?;
    write_text(&out.join("comparison.txt"), &table.to_text())?;
    Ok(reports)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let (y, pd) = read_predictions(&a.input)?;
    let report = evaluate(&pd, &y)?;
    record_report(
        &a.out,
        NamedReport {
            method: a.method.clone(),
            model: a.model.clone(),
            report,
        },
    )?;
    Ok(())
}

/// Writes `curve_<term>.csv` for every smooth term; returns the paths.
pub fn write_curves(model: &FittedModel, points: usize, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    model
        .spec
        .smooth_terms
        .iter()
        .map(|t| {
            let curve = model.smooth_curve(&t.covariate, points)?;
            let path = out.join(format!("curve_{}.csv", t.covariate));
            curve.write_csv(fs::File::create(&path)?)?;
            Ok(path)
        })
        .collect()
}

pub fn cmd_curves(a: &CurvesArgs) -> CliResult<()> {
    if a.points < 2 {
        return Err(CliError::Usage("--points must be at least 2".into()));
    }
    let model = FittedModel::load(&a.model_file)?;
    if model.spec.smooth_terms.is_empty() {
        return Err(CliError::Run(Error::InvalidArgument("model has no smooth terms".into())));
    }
    write_curves(&model, a.points, &a.out)?;
    Ok(())
}

pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let mut spec: SimSpec = serde_json::from_str(&fs::read_to_string(&a.config).map_err(Error::from)?).map_err(Error::from)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let ds = simulate(&spec)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    ds.save_csv(&a.out, &a.response)?;
    Ok(())
}

fn pipeline_config(a: &PipelineArgs) -> CliResult<RunConfig> {
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(Error::from)?;
        return serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad run config: {e}")));
    }
    let out = a.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    Ok(RunConfig {
        input: a.input.clone().expect("required by clap"),
        response: a.response.clone(),
        methods: if a.method.is_empty() { default_methods() } else { a.method.clone() },
        models: if a.model.is_empty() { default_models() } else { a.model.clone() },
        tau: a.tau.clone(),
        smooth: a.smooth.clone().map(|s| s.0),
        lambda: a.lambda.clone(),
        seed: a.seed,
        train_frac: a.train_frac,
        out,
        woe_bins: DEFAULT_BINS,
        min_rate_gap: DEFAULT_MIN_RATE_GAP,
        min_bin_count: 0,
        imputation: ImputationPolicy::default(),
    })
}

pub fn cmd_pipeline(a: &PipelineArgs) -> CliResult<()> {
    let cfg = pipeline_config(a)?;
    run_pipeline(&cfg)?;
    Ok(())
}

/// Runs the full protocol of `cfg` and returns the comparison rows in grid
/// order. Metrics are computed on the control sample.
///
/// Layout under `cfg.out`: `split/`, `woe/` and `impute/` hold the
/// prepared data; `<method>/<model>/` holds models, summaries,
/// `predictions.csv`, `metrics.json` and curves (for imputation, curves of
/// the first completed dataset); top-level `metrics.csv`,
/// `comparison.csv` and `comparison.txt` hold the grid table.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<NamedReport>> {
    let ds = load_csv(&cfg.input, &cfg.response)?;
    let out = &cfg.out;
    create_dir(out)?;
    write_text(&out.join("config.json"), &(serde_json::to_string_pretty(cfg)? + "\n"))?;
    let (train, control) = stratified_split(&ds, cfg.train_frac, sub_seed(cfg.seed, SPLIT_STAGE))?;
    let split_dir = out.join("split");
    create_dir(&split_dir)?;
    train.save_csv(split_dir.join("train.csv"), &cfg.response)?;
    control.save_csv(split_dir.join("control.csv"), &cfg.response)?;
    let metrics_path = out.join("metrics.csv");
    if metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }
    let mut reports = Vec::new();
    for &method in &cfg.methods {
        let prep_dir = out.join(method.to_string());
        create_dir(&prep_dir)?;
        let (train_sets, control_sets) = match method {
            Method::Woe => {
                let (enc, tw, cw) = woe_stage(&train, Some(&control), cfg.woe_bins, cfg.min_rate_gap, cfg.min_bin_count)?;
                enc.save(prep_dir.join("woe.json"))?;
                tw.save_csv(prep_dir.join("train.csv"), &cfg.response)?;
                let cw = cw.expect("control given");
                cw.save_csv(prep_dir.join("control.csv"), &cfg.response)?;
                (vec![tw], vec![cw])
            }
            Method::Impute => {
                let policy = ImputationPolicy {
                    seed: sub_seed(cfg.seed, IMPUTE_TRAIN_STAGE),
                    use_response: true,
                    ..cfg.imputation
                };
                let mut diag = Vec::new();
                let (tr, co) =
                    impute_stage(&train, Some(&control), &policy, sub_seed(cfg.seed, IMPUTE_CONTROL_STAGE), &mut diag)?;
                let co = co.expect("control given");
                for (k, (t, c)) in tr.iter().zip(&co).enumerate() {
                    t.save_csv(prep_dir.join(format!("train_{}.csv", k + 1)), &cfg.response)?;
                    c.save_csv(prep_dir.join(format!("control_{}.csv", k + 1)), &cfg.response)?;
                }
                write_diagnostics(&prep_dir.join("diagnostics.csv"), &diag)?;
                (tr, co)
            }
        };
        for &model in &cfg.models {
            let cell = prep_dir.join(model.to_string());
            let fitted = train_models(&train_sets, &cfg.model_args(model))?;
            save_models(&cell, &fitted)?;
            let models: Vec<FittedModel> = fitted.into_iter().map(|(m, _)| m).collect();
            let pd = predict_pooled(&models, &control_sets)?;
            write_predictions(&cell.join("predictions.csv"), control.y(), &pd)?;
            let report = evaluate(&pd, control.y())?;
            write_text(&cell.join("metrics.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
            if model.is_additive() && !models[0].spec.smooth_terms.is_empty() {
                write_curves(&models[0], CURVE_POINTS, &cell)?;
            }
            reports.push(NamedReport {
                method: method.to_string(),
                model: model.to_string(),
                report,
            });
        }
    }
    let mut last = Vec::new();
    for r in &reports {
        last = record_report(out, r.clone())?;
    }
    Ok(last)
}
