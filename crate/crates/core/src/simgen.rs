//! Synthetic generators, the Monte Carlo scenario runner, table summaries,
//! and the subsampling and correlation studies used on real datasets.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{
    empirical_improve, BootstrapPlan, IndexChoice, InitialEstimator, NaiveEstimator, Resampling, RidgeEstimator,
};
use crate::data::{LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::naive::{self, beta_sq_hat_all, dicker_tau2, naive_tau2, w_matrix, Estimate, WMatrix};
use crate::rng::{derive_seed, stream, Domain};
use crate::whitening::{self, estimate_moments, whiten, whiten_unlabeled, CovariateModel};
use crate::zeroest::{self, gap_selection, pairwise_g, Law, VarSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateDist {
    Gaussian,
    ExpCentered,
}

impl CovariateDist {
    pub fn law(self) -> Law {
        match self {
            CovariateDist::Gaussian => Law::Gaussian,
            CovariateDist::ExpCentered => Law::CenteredExponential,
        }
    }

    pub fn draw<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            CovariateDist::Gaussian => rng.sample(StandardNormal),
            CovariateDist::ExpCentered => rng.sample::<f64, _>(Exp1) - 1.0,
        }
    }

    /// `E(X sin X)`, integrated numerically once per law.
    pub fn kappa(self) -> f64 {
        static GAUSS: OnceLock<f64> = OnceLock::new();
        static EXP: OnceLock<f64> = OnceLock::new();
        match self {
            CovariateDist::Gaussian => *GAUSS.get_or_init(|| {
                let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                adaptive_simpson(&|x: f64| c * (-x * x / 2.0).exp() * x * x.sin(), -40.0, 40.0, 1e-13)
            }),
            CovariateDist::ExpCentered => *EXP.get_or_init(|| {
                adaptive_simpson(&|x: f64| (-x).exp() * (x - 1.0) * (x - 1.0).sin(), 0.0, 60.0, 1e-13)
            }),
        }
    }
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    // split first so oscillating integrands cannot fool the top-level check
    let pieces = 64;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let (lo, hi) = (a + k as f64 * h, a + (k + 1) as f64 * h);
            let (flo, fmid, fhi) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            rec(f, lo, hi, flo, fmid, fhi, simpson(flo, fmid, fhi, lo, hi), tol / pieces as f64, 40)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorSpec {
    Naive,
    /// Oracle estimator built from the true coefficients.
    Ooe,
    /// Single pairwise zero-estimator over all covariates.
    Single,
    /// Gap selection with the psi correction.
    Selection,
    /// Gap selection with a single zero-estimator over the selected set.
    SelectionSingle,
    OracleSingle,
    Dicker,
    Ridge,
    FullPsi,
    /// Bootstrap correction of the naive estimator, all covariates.
    Bootstrap,
    /// Bootstrap correction of the naive estimator, gap-selected covariates.
    BootstrapGap,
    /// Bootstrap correction of the ridge estimator, all covariates.
    BootstrapRidge,
}

impl EstimatorSpec {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorSpec::Naive => "naive",
            EstimatorSpec::Ooe => "ooe",
            EstimatorSpec::Single => "single",
            EstimatorSpec::Selection => "selection",
            EstimatorSpec::SelectionSingle => "selection_single",
            EstimatorSpec::OracleSingle => "oracle_single",
            EstimatorSpec::Dicker => "dicker",
            EstimatorSpec::Ridge => "ridge",
            EstimatorSpec::FullPsi => "full_psi",
            EstimatorSpec::Bootstrap => "bootstrap",
            EstimatorSpec::BootstrapGap => "bootstrap_gap",
            EstimatorSpec::BootstrapRidge => "bootstrap_ridge",
        }
    }

    pub fn all() -> &'static [EstimatorSpec] {
        &[
            EstimatorSpec::Naive,
            EstimatorSpec::Ooe,
            EstimatorSpec::Single,
            EstimatorSpec::Selection,
            EstimatorSpec::SelectionSingle,
            EstimatorSpec::OracleSingle,
            EstimatorSpec::Dicker,
            EstimatorSpec::Ridge,
            EstimatorSpec::FullPsi,
            EstimatorSpec::Bootstrap,
            EstimatorSpec::BootstrapGap,
            EstimatorSpec::BootstrapRidge,
        ]
    }

    fn needs_truth(self) -> bool {
        matches!(self, EstimatorSpec::Ooe | EstimatorSpec::OracleSingle)
    }
}

impl std::str::FromStr for EstimatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorSpec::all()
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::param("estimator", format!("unknown estimator {s:?}")))
    }
}

impl std::fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_true() -> bool {
    true
}

fn default_bootstrap_m() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub framework: Framework,
    pub n: usize,
    pub p: usize,
    pub replications: usize,
    pub tau2: f64,
    /// Linear: share of `tau^2` carried by the first `k_large` coefficients.
    /// Nonlinear: `eta`.
    pub sparsity: f64,
    /// Defaults to 5 (linear) or 6 (nonlinear).
    #[serde(default)]
    pub k_large: Option<usize>,
    pub covariate_dist: CovariateDist,
    pub estimators: Vec<EstimatorSpec>,
    pub seed: u64,
    #[serde(default)]
    pub unlabeled_n: Option<usize>,
    #[serde(default)]
    pub bandwidth: Option<usize>,
    /// Subtract the sample mean of `Y` before estimating.
    #[serde(default = "default_true")]
    pub center_response: bool,
    #[serde(default)]
    pub var_source: VarSource,
    #[serde(default = "default_bootstrap_m")]
    pub bootstrap_m: usize,
    /// Seeded 50/50 split for the selection estimator.
    #[serde(default)]
    pub split_selection: bool,
    #[serde(default)]
    pub resampling: Resampling,
}

impl ScenarioConfig {
    /// A cell with 100 replications of the naive estimator, `Exp(1) - 1`
    /// covariates, seed 0 and every optional setting at its default.
    pub fn new(framework: Framework, n: usize, p: usize, tau2: f64, sparsity: f64) -> Self {
        ScenarioConfig {
            framework,
            n,
            p,
            replications: 100,
            tau2,
            sparsity,
            k_large: None,
            covariate_dist: CovariateDist::ExpCentered,
            estimators: vec![EstimatorSpec::Naive],
            seed: 0,
            unlabeled_n: None,
            bandwidth: None,
            center_response: true,
            var_source: VarSource::AnalyticIndependent,
            bootstrap_m: default_bootstrap_m(),
            split_selection: false,
            resampling: Resampling::WithReplacement,
        }
    }

    pub fn k(&self) -> usize {
        self.k_large.unwrap_or(match self.framework {
            Framework::Linear => 5,
            Framework::Nonlinear => 6,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::param("n", "must be at least 3"));
        }
        if self.p < 2 {
            return Err(Error::param("p", "must be at least 2"));
        }
        if self.replications < 1 {
            return Err(Error::param("replications", "must be at least 1"));
        }
        if !(self.tau2 >= 0.0) || !self.tau2.is_finite() {
            return Err(Error::param("tau2", "must be a finite non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::param("sparsity", "must lie in [0, 1]"));
        }
        if self.k() >= self.p || self.k() == 0 {
            return Err(Error::param("k_large", format!("must lie in 1..p (p = {})", self.p)));
        }
        if self.estimators.is_empty() {
            return Err(Error::param("estimators", "list is empty"));
        }
        if let Some(nu) = self.unlabeled_n {
            let needed = if self.bandwidth.is_some() { 2 } else { self.p + 1 };
            if nu < needed {
                return Err(Error::param("unlabeled_n", format!("must be at least {needed}")));
            }
        }
        if self.bandwidth.is_some() && self.unlabeled_n.is_none() {
            return Err(Error::param("bandwidth", "only meaningful with unlabeled_n"));
        }
        if self.var_source == VarSource::EmpiricalUnlabeled && self.unlabeled_n.is_none() {
            return Err(Error::param("var_source", "empirical variance needs unlabeled_n"));
        }
        if self.bootstrap_m < 2 {
            return Err(Error::param("bootstrap_m", "must be at least 2"));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One generated replicate and its ground truth.
#[derive(Debug, Clone)]
pub struct Generated {
    pub data: LabeledDataset,
    /// Coefficients of the best linear predictor; `||beta||^2 = tau^2`.
    pub beta: DVector<f64>,
}

/// `rows x p` i.i.d. draws, filled row by row.
pub fn draw_covariates(dist: CovariateDist, rows: usize, p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(rows, p);
    for i in 0..rows {
        for j in 0..p {
            x[(i, j)] = dist.draw(rng);
        }
    }
    x
}

/// Coefficients of the linear framework: the first `k` share `sparsity * tau2`,
/// the rest share the remainder. All roots positive.
pub fn linear_beta(cfg: &ScenarioConfig) -> DVector<f64> {
    let (p, k) = (cfg.p, cfg.k());
    let big = cfg.sparsity * cfg.tau2 / k as f64;
    let small = (1.0 - cfg.sparsity) * cfg.tau2 / (p - k) as f64;
    DVector::from_fn(p, |j, _| if j < k { big.sqrt() } else { small.sqrt() })
}

pub fn gen_linear(cfg: &ScenarioConfig, replicate: u64) -> Result<Generated> {
    cfg.validate()?;
    let beta = linear_beta(cfg);
    let mut rng = stream(cfg.seed, Domain::Labeled, replicate);
    let x = draw_covariates(cfg.covariate_dist, cfg.n, cfg.p, &mut rng);
    let mut y = &x * &beta;
    for v in y.iter_mut() {
        *v += rng.sample::<f64, _>(StandardNormal);
    }
    Ok(Generated {
        data: LabeledDataset::new(x, y)?,
        beta,
    })
}

/// `(gamma_L, gamma_S)` for the nonlinear framework.
pub fn nonlinear_gammas(cfg: &ScenarioConfig) -> (f64, f64) {
    let (p, k) = (cfg.p as f64, cfg.k() as f64);
    let one_k = (1.0 + cfg.covariate_dist.kappa()).powi(2);
    let gl = (cfg.sparsity * cfg.tau2 / (k * one_k)).sqrt();
    let gs = (cfg.tau2 * (1.0 - cfg.sparsity) / ((p - k) * one_k)).sqrt();
    (gl, gs)
}

/// `Y = gamma_L sum_{j<K} (X_j + sin X_j) + gamma_S sum_{j>=K} (X_j + sin X_j) + xi`.
pub fn gen_nonlinear(cfg: &ScenarioConfig, replicate: u64) -> Result<Generated> {
    cfg.validate()?;
    let k = cfg.k();
    let (gl, gs) = nonlinear_gammas(cfg);
    let kappa = cfg.covariate_dist.kappa();
    let mut rng = stream(cfg.seed, Domain::Labeled, replicate);
    let x = draw_covariates(cfg.covariate_dist, cfg.n, cfg.p, &mut rng);
    let mut y = DVector::zeros(cfg.n);
    for i in 0..cfg.n {
        let mut s = 0.0;
        for j in 0..cfg.p {
            let v = x[(i, j)];
            s += if j < k { gl } else { gs } * (v + v.sin());
        }
        y[i] = s + rng.sample::<f64, _>(StandardNormal);
    }
    let beta = DVector::from_fn(cfg.p, |j, _| if j < k { gl } else { gs } * (1.0 + kappa));
    Ok(Generated {
        data: LabeledDataset::new(x, y)?,
        beta,
    })
}

pub fn generate(cfg: &ScenarioConfig, replicate: u64) -> Result<Generated> {
    match cfg.framework {
        Framework::Linear => gen_linear(cfg, replicate),
        Framework::Nonlinear => gen_nonlinear(cfg, replicate),
    }
}

/// Everything an estimator may need for one labeled sample.
pub struct EvalContext<'a> {
    /// Whitened (and, if requested, response-centered) data.
    pub data: &'a LabeledDataset,
    pub w: &'a WMatrix,
    pub beta: Option<&'a DVector<f64>>,
    pub unlabeled: Option<&'a UnlabeledDataset>,
    pub var_source: VarSource,
    pub bootstrap_m: usize,
    pub seed: u64,
    pub split_selection: bool,
    pub resampling: Resampling,
}

pub fn evaluate(spec: EstimatorSpec, ctx: &EvalContext<'_>) -> Result<Estimate> {
    let (d, w) = (ctx.data, ctx.w);
    let truth = || {
        ctx.beta
            .ok_or_else(|| Error::param("estimator", format!("{spec} needs the true coefficients")))
    };
    let ridge = || RidgeEstimator {
        lambda_grid: None,
        folds: 10.min(d.n()),
        seed: derive_seed(ctx.seed, Domain::CrossValidation, 0),
    };
    let boot = |est: &dyn InitialEstimator, selection: IndexChoice| -> Result<Estimate> {
        let plan = BootstrapPlan {
            m: ctx.bootstrap_m,
            seed: derive_seed(ctx.seed, Domain::Bootstrap, 0),
            selection,
            resampling: ctx.resampling,
        };
        Ok(empirical_improve(d, est, &plan, ctx.var_source, ctx.unlabeled)?.estimate)
    };
    match spec {
        EstimatorSpec::Naive => naive_tau2(w),
        EstimatorSpec::Ooe => zeroest::oracle_ooe(w, d, truth()?),
        EstimatorSpec::Single => zeroest::single_estimator(w, d, ctx.var_source, ctx.unlabeled),
        EstimatorSpec::Selection => {
            let split = ctx.split_selection.then(|| derive_seed(ctx.seed, Domain::Split, 0));
            zeroest::selection_estimator(w, d, split)
        }
        EstimatorSpec::SelectionSingle => zeroest::selection_single(w, d, ctx.var_source, ctx.unlabeled),
        EstimatorSpec::OracleSingle => {
            let beta = truth()?;
            let s: Vec<usize> = (0..d.p()).collect();
            let z = zeroest::pairwise_zero_stat(d, &s, ctx.var_source, ctx.unlabeled)?;
            zeroest::oracle_single(w, beta, &zeroest::theta_linear(beta, &s), &z)
        }
        EstimatorSpec::Dicker => Ok(Estimate::new(dicker_tau2(d), naive::Method::Dicker)),
        EstimatorSpec::Ridge => Ok(Estimate::new(ridge().estimate(d)?, naive::Method::Ridge)),
        EstimatorSpec::FullPsi => zeroest::full_psi_estimator(w, d),
        EstimatorSpec::Bootstrap => boot(&NaiveEstimator, IndexChoice::All),
        EstimatorSpec::BootstrapGap => boot(&NaiveEstimator, IndexChoice::Gap),
        EstimatorSpec::BootstrapRidge => boot(&ridge(), IndexChoice::All),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean: Option<f64>,
    pub bias: Option<f64>,
    pub se: Option<f64>,
    pub rmse: Option<f64>,
    pub rmse_se: Option<f64>,
    pub pct_change: Option<f64>,
    pub mse: Option<f64>,
    pub mse_pct_change: Option<f64>,
    /// Per-replicate values; `None` where the estimator failed.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub estimator: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub truth: f64,
    pub replications: usize,
    pub estimators: Vec<EstimatorSummary>,
    pub incomplete: bool,
    pub failures: Vec<ReplicateFailure>,
}

/// Delta-method standard error of a Monte Carlo RMSE.
pub fn rmse_se_delta(errors: &[f64]) -> Option<f64> {
    if errors.len() < 2 {
        return None;
    }
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let rmse = crate::stats::mean(&sq).sqrt();
    if !(rmse > 0.0) {
        return None;
    }
    Some(crate::stats::sd(&sq)? / (2.0 * rmse * (errors.len() as f64).sqrt()))
}

fn pct(new: Option<f64>, base: Option<f64>) -> Option<f64> {
    match (new, base) {
        (Some(v), Some(b)) if b > 0.0 => Some(100.0 * (v - b) / b),
        _ => None,
    }
}

/// Aggregate per-replicate values (outer index: estimator) against `truth`.
/// The first estimator is the baseline for the percentage changes.
pub fn summarize(
    names: &[String],
    truth: f64,
    values: Vec<Vec<Option<f64>>>,
    failures: Vec<ReplicateFailure>,
) -> ScenarioSummary {
    let replications = values.first().map_or(0, Vec::len);
    let mut estimators: Vec<EstimatorSummary> = names
        .iter()
        .zip(values)
        .map(|(name, vals)| {
            let ok: Vec<f64> = vals.iter().flatten().copied().collect();
            let errors: Vec<f64> = ok.iter().map(|v| v - truth).collect();
            let (mean, bias, mse) = if ok.is_empty() {
                (None, None, None)
            } else {
                let m = crate::stats::mean(&ok);
                let mse = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
                (Some(m), Some(m - truth), Some(mse))
            };
            EstimatorSummary {
                estimator: name.clone(),
                n_ok: ok.len(),
                n_failed: vals.len() - ok.len(),
                mean,
                bias,
                se: crate::stats::sd(&ok),
                rmse: mse.map(f64::sqrt),
                rmse_se: rmse_se_delta(&errors),
                pct_change: None,
                mse,
                mse_pct_change: None,
                values: vals,
            }
        })
        .collect();
    if let Some(first) = estimators.first() {
        let (base_rmse, base_mse) = (first.rmse, first.mse);
        for e in &mut estimators {
            e.pct_change = pct(e.rmse, base_rmse);
            e.mse_pct_change = pct(e.mse, base_mse);
        }
    }
    ScenarioSummary {
        truth,
        replications,
        incomplete: estimators.iter().any(|e| e.n_failed > 0),
        estimators,
        failures,
    }
}

impl ScenarioSummary {
    pub fn get(&self, name: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == name)
    }

    /// Table layout: one row per estimator.
    pub fn write_table_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["Estimator", "Mean", "SE", "RMSE", "RMSE_SE", "PctChange", "MSE", "MSE_PctChange", "Failed"])?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.estimators {
            wr.write_record([
                e.estimator.clone(),
                f(e.mean),
                f(e.se),
                f(e.rmse),
                f(e.rmse_se),
                f(e.pct_change),
                f(e.mse),
                f(e.mse_pct_change),
                e.n_failed.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Long layout of the raw replicate values, for auditing.
    pub fn write_replicates_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["replicate".to_string()];
        header.extend(self.estimators.iter().map(|e| e.estimator.clone()));
        wr.write_record(&header)?;
        for r in 0..self.replications {
            let mut row = vec![r.to_string()];
            row.extend(
                self.estimators
                    .iter()
                    .map(|e| e.values[r].map(|v| v.to_string()).unwrap_or_default()),
            );
            wr.write_record(&row)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn run_estimators(
    specs: &[EstimatorSpec],
    ctx: &EvalContext<'_>,
    replicate: usize,
) -> (Vec<Option<f64>>, Vec<ReplicateFailure>) {
    let mut vals = Vec::with_capacity(specs.len());
    let mut fails = Vec::new();
    for &spec in specs {
        match evaluate(spec, ctx) {
            Ok(e) if e.value.is_finite() => vals.push(Some(e.value)),
            Ok(e) => {
                vals.push(None);
                fails.push(ReplicateFailure {
                    replicate,
                    estimator: spec.to_string(),
                    message: format!("non-finite value {}", e.value),
                });
            }
            Err(err) => {
                vals.push(None);
                fails.push(ReplicateFailure {
                    replicate,
                    estimator: spec.to_string(),
                    message: err.to_string(),
                });
            }
        }
    }
    (vals, fails)
}

fn transpose(rows: Vec<Vec<Option<f64>>>, k: usize) -> Vec<Vec<Option<f64>>> {
    let mut out = vec![Vec::with_capacity(rows.len()); k];
    for row in rows {
        for (j, v) in row.into_iter().enumerate() {
            out[j].push(v);
        }
    }
    out
}

/// Prepared data for one replicate: whitened, centered, plus unlabeled rows
/// when the variance of `g` is taken from them.
fn prepare_replicate(cfg: &ScenarioConfig, replicate: u64) -> Result<(LabeledDataset, DVector<f64>, Option<UnlabeledDataset>)> {
    let g = generate(cfg, replicate)?;
    let (model, unl) = match cfg.unlabeled_n {
        None => (CovariateModel::identity(cfg.p), None),
        Some(nu) => {
            let mut rng = stream(cfg.seed, Domain::Unlabeled, replicate);
            let u = UnlabeledDataset::new(draw_covariates(cfg.covariate_dist, nu, cfg.p, &mut rng))?;
            let m = estimate_moments(&u, cfg.bandwidth)?;
            let uw = (cfg.var_source == VarSource::EmpiricalUnlabeled)
                .then(|| whiten_unlabeled(&m, &u))
                .transpose()?;
            (m, uw)
        }
    };
    let mut d = whiten(&model, &g.data)?;
    if cfg.center_response {
        d = d.center_response();
    }
    Ok((d, g.beta, unl))
}

/// Run every configured estimator on `cfg.replications` generated datasets.
/// Replicates run in parallel on the current rayon pool; the output does not
/// depend on the number of threads.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioSummary> {
    cfg.validate()?;
    let specs = &cfg.estimators;
    let results: Vec<(Vec<Option<f64>>, Vec<ReplicateFailure>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let prepared = prepare_replicate(cfg, r as u64).and_then(|(d, beta, u)| {
                let w = w_matrix(&d)?;
                Ok((d, beta, u, w))
            });
            match prepared {
                Ok((d, beta, u, w)) => {
                    let ctx = EvalContext {
                        data: &d,
                        w: &w,
                        beta: Some(&beta),
                        unlabeled: u.as_ref(),
                        var_source: cfg.var_source,
                        bootstrap_m: cfg.bootstrap_m,
                        seed: derive_seed(cfg.seed, Domain::Misc, r as u64),
                        split_selection: cfg.split_selection,
                        resampling: cfg.resampling,
                    };
                    run_estimators(specs, &ctx, r)
                }
                Err(e) => (
                    vec![None; specs.len()],
                    specs
                        .iter()
                        .map(|s| ReplicateFailure {
                            replicate: r,
                            estimator: s.to_string(),
                            message: e.to_string(),
                        })
                        .collect(),
                ),
            }
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (v, f) in results {
        rows.push(v);
        failures.extend(f);
    }
    let names: Vec<String> = specs.iter().map(|s| s.to_string()).collect();
    Ok(summarize(&names, cfg.tau2, transpose(rows, specs.len()), failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleConfig {
    pub n_sub: usize,
    pub reps: usize,
    pub estimators: Vec<EstimatorSpec>,
    pub seed: u64,
    #[serde(default)]
    pub bandwidth: Option<usize>,
    #[serde(default = "default_true")]
    pub center_response: bool,
    #[serde(default)]
    pub var_source: VarSource,
    #[serde(default = "default_bootstrap_m")]
    pub bootstrap_m: usize,
    #[serde(default)]
    pub resampling: Resampling,
}

/// `beta^T Sigma beta` from least squares with an intercept on the whole
/// dataset, with the plug-in covariance (divisor `N`).
pub fn full_data_tau2(d: &LabeledDataset) -> Result<f64> {
    let n = d.n() as f64;
    let mu = d.x().row_mean();
    let mut xc = d.x().clone();
    for (mut col, m) in xc.column_iter_mut().zip(mu.iter()) {
        col.add_scalar_mut(-m);
    }
    let ym = d.y().mean();
    let yc = d.y().map(|v| v - ym);
    let gram = xc.tr_mul(&xc);
    let keep = crate::data::independent_columns(&xc, 1e-9);
    if keep.len() < d.p() {
        return Err(Error::RankDeficient { rank: keep.len(), p: d.p() });
    }
    let chol = gram
        .clone()
        .cholesky()
        .ok_or(Error::RankDeficient { rank: keep.len(), p: d.p() })?;
    let beta = chol.solve(&xc.tr_mul(&yc));
    Ok(beta.dot(&(&gram * &beta)) / n)
}

/// Running sums of the full covariate block so the moments of the rows left
/// out of a subsample cost `O(n_sub p^2)` instead of `O(N p^2)`.
struct MomentSums {
    s1: DVector<f64>,
    s2: DMatrix<f64>,
    shift: DVector<f64>,
}

impl MomentSums {
    fn new(x: &DMatrix<f64>) -> Self {
        // shift by the full mean to keep the subtraction well conditioned
        let shift = x.row_mean().transpose();
        let mut xc = x.clone();
        for (mut col, m) in xc.column_iter_mut().zip(shift.iter()) {
            col.add_scalar_mut(-m);
        }
        MomentSums {
            s1: xc.row_sum().transpose(),
            s2: xc.tr_mul(&xc),
            shift,
        }
    }

    fn without(&self, x: &DMatrix<f64>, rows: &[usize], total: usize, bandwidth: Option<usize>) -> Result<CovariateModel> {
        let nu = total - rows.len();
        let needed = if bandwidth.is_some() { 2 } else { x.ncols() + 1 };
        if nu < needed {
            return Err(Error::TooFewObservations { needed, have: nu });
        }
        let mut xl = x.select_rows(rows);
        for (mut col, m) in xl.column_iter_mut().zip(self.shift.iter()) {
            col.add_scalar_mut(-m);
        }
        let s1 = &self.s1 - xl.row_sum().transpose();
        let s2 = &self.s2 - xl.tr_mul(&xl);
        let m = &s1 / nu as f64;
        let sigma = s2 / nu as f64 - &m * m.transpose();
        whitening::from_moments(m + &self.shift, sigma, bandwidth, nu)
    }
}

/// Repeatedly treat `n_sub` random rows as labeled and the rest as
/// unlabeled; compare every estimator against the full-data `tau^2`.
pub fn subsample_study(d: &LabeledDataset, cfg: &SubsampleConfig) -> Result<ScenarioSummary> {
    let total = d.n();
    if cfg.n_sub < 3 || cfg.n_sub > total {
        return Err(Error::param("n_sub", format!("must lie in 3..={total}")));
    }
    if cfg.reps < 1 {
        return Err(Error::param("reps", "must be at least 1"));
    }
    if let Some(bad) = cfg.estimators.iter().find(|e| e.needs_truth()) {
        return Err(Error::param("estimators", format!("{bad} needs true coefficients")));
    }
    let truth = full_data_tau2(d)?;
    let sums = MomentSums::new(d.x());
    type Row = (Vec<Option<f64>>, Vec<ReplicateFailure>);
    let results: Vec<Result<Row>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let rows = subsample_rows(total, cfg.n_sub, cfg.seed, r as u64);
            let model = sums.without(d.x(), &rows, total, cfg.bandwidth)?;
            let unl = if cfg.var_source == VarSource::EmpiricalUnlabeled {
                let mut mask = vec![true; total];
                rows.iter().for_each(|&i| mask[i] = false);
                let rest: Vec<usize> = (0..total).filter(|&i| mask[i]).collect();
                Some(whiten_unlabeled(&model, &d.unlabeled_rows(&rest)?)?)
            } else {
                None
            };
            let mut lab = whiten(&model, &d.select_rows(&rows))?;
            if cfg.center_response {
                lab = lab.center_response();
            }
            let w = w_matrix(&lab)?;
            let ctx = EvalContext {
                data: &lab,
                w: &w,
                beta: None,
                unlabeled: unl.as_ref(),
                var_source: cfg.var_source,
                bootstrap_m: cfg.bootstrap_m,
                seed: derive_seed(cfg.seed, Domain::Misc, r as u64),
                split_selection: false,
                resampling: cfg.resampling,
            };
            Ok(run_estimators(&cfg.estimators, &ctx, r))
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for res in results {
        let (v, f) = res?;
        rows.push(v);
        failures.extend(f);
    }
    let names: Vec<String> = cfg.estimators.iter().map(|s| s.to_string()).collect();
    Ok(summarize(&names, truth, transpose(rows, cfg.estimators.len()), failures))
}

fn subsample_rows(total: usize, n_sub: usize, seed: u64, rep: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    let mut rng = stream(seed, Domain::Subsample, rep);
    let (chosen, _) = idx.partial_shuffle(&mut rng, n_sub);
    chosen.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    Naive,
    Dicker,
    Ridge,
}

impl InitialKind {
    pub fn name(self) -> &'static str {
        match self {
            InitialKind::Naive => "naive",
            InitialKind::Dicker => "dicker",
            InitialKind::Ridge => "ridge",
        }
    }
}

impl std::str::FromStr for InitialKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [InitialKind::Naive, InitialKind::Dicker, InitialKind::Ridge]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::param("initial", format!("unknown initial estimator {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroKind {
    /// `Z` over all covariates.
    Single,
    /// `Z` over the gap-selected covariates.
    Selection,
}

impl ZeroKind {
    pub fn name(self) -> &'static str {
        match self {
            ZeroKind::Single => "single",
            ZeroKind::Selection => "selection",
        }
    }
}

impl std::str::FromStr for ZeroKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ZeroKind::Single, ZeroKind::Selection]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::param("zero", format!("unknown zero-estimator {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub initial: Vec<String>,
    pub zero: Vec<String>,
    /// `cells[i][z]`; `None` where either side had zero variance.
    pub cells: Vec<Vec<Option<f64>>>,
    pub reps: usize,
}

/// Pearson correlations between initial estimators and zero-estimators over
/// repeated subsamples.
pub fn correlation_study(
    d: &LabeledDataset,
    n_sub: usize,
    reps: usize,
    initial: &[InitialKind],
    zero: &[ZeroKind],
    seed: u64,
    bandwidth: Option<usize>,
) -> Result<CorrelationTable> {
    let total = d.n();
    if n_sub < 3 || n_sub > total {
        return Err(Error::param("n_sub", format!("must lie in 3..={total}")));
    }
    if reps < 3 {
        return Err(Error::param("reps", "must be at least 3"));
    }
    let sums = MomentSums::new(d.x());
    let per_rep: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rows = subsample_rows(total, n_sub, seed, r as u64);
            let model = sums.without(d.x(), &rows, total, bandwidth)?;
            let lab = whiten(&model, &d.select_rows(&rows))?.center_response();
            let w = w_matrix(&lab)?;
            let ivals = initial
                .iter()
                .map(|k| match k {
                    InitialKind::Naive => Ok(naive_tau2(&w)?.value),
                    InitialKind::Dicker => Ok(dicker_tau2(&lab)),
                    InitialKind::Ridge => RidgeEstimator {
                        lambda_grid: None,
                        folds: 10.min(n_sub),
                        seed: derive_seed(seed, Domain::CrossValidation, r as u64),
                    }
                    .estimate(&lab),
                })
                .collect::<Result<Vec<f64>>>()?;
            let zvals = zero
                .iter()
                .map(|k| {
                    let s = match k {
                        ZeroKind::Single => (0..lab.p()).collect(),
                        ZeroKind::Selection => gap_selection(beta_sq_hat_all(&w)?.as_slice())?.set,
                    };
                    Ok(pairwise_g(lab.x(), &s).mean())
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((ivals, zvals))
        })
        .collect();
    let mut ivals = vec![Vec::with_capacity(reps); initial.len()];
    let mut zvals = vec![Vec::with_capacity(reps); zero.len()];
    for res in per_rep {
        let (iv, zv) = res?;
        iv.into_iter().enumerate().for_each(|(k, v)| ivals[k].push(v));
        zv.into_iter().enumerate().for_each(|(k, v)| zvals[k].push(v));
    }
    let cells = ivals
        .iter()
        .map(|a| zvals.iter().map(|b| crate::stats::pearson(a, b)).collect())
        .collect();
    Ok(CorrelationTable {
        initial: initial.iter().map(|k| k.name().to_string()).collect(),
        zero: zero.iter().map(|k| k.name().to_string()).collect(),
        cells,
        reps,
    })
}

/// The synthetic stand-in for a real dataset: the nonlinear framework with
/// `p = 200`, `tau^2 = 2`, `eta = 0.5`, centered exponential covariates.
pub fn synthetic_dataset(n_total: usize, seed: u64) -> Result<LabeledDataset> {
    let cfg = ScenarioConfig {
        framework: Framework::Nonlinear,
        n: n_total,
        p: 200,
        replications: 1,
        tau2: 2.0,
        sparsity: 0.5,
        k_large: None,
        covariate_dist: CovariateDist::ExpCentered,
        estimators: vec![EstimatorSpec::Naive],
        seed,
        unlabeled_n: None,
        bandwidth: None,
        center_response: true,
        var_source: VarSource::AnalyticIndependent,
        bootstrap_m: 100,
        split_selection: false,
        resampling: Resampling::WithReplacement,
    };
    Ok(gen_nonlinear(&cfg, 0)?.data)
}
