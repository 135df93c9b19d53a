//! Bootstrap route to the single zero-estimator correction, usable with any
//! initial estimator of `tau^2`, plus the ridge plug-in estimator.

use std::io::Write;
use std::process::{Command, Stdio};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_csv, LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::naive::{self, beta_sq_hat_all, Estimate, Flag, Method};
use crate::rng::{stream, Domain};
use crate::zeroest::{gap_selection, pairwise_g, pairwise_zero_stat, VarSource};

/// An estimator of `tau^2` that can be re-run on resampled data.
pub trait InitialEstimator: Sync {
    fn name(&self) -> &str;
    fn estimate(&self, d: &LabeledDataset) -> Result<f64>;
}

/// Returns the same number on every input.
#[derive(Debug, Clone)]
pub struct ConstantEstimator(pub f64);

impl InitialEstimator for ConstantEstimator {
    fn name(&self) -> &str {
        "constant"
    }

    fn estimate(&self, _d: &LabeledDataset) -> Result<f64> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NaiveEstimator;

impl InitialEstimator for NaiveEstimator {
    fn name(&self) -> &str {
        "naive"
    }

    fn estimate(&self, d: &LabeledDataset) -> Result<f64> {
        Ok(naive::naive_tau2(&naive::w_matrix(d)?)?.value)
    }
}

#[derive(Debug, Clone)]
pub struct RidgeEstimator {
    /// Absolute penalties; `None` uses [`default_lambda_grid`].
    pub lambda_grid: Option<Vec<f64>>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for RidgeEstimator {
    fn default() -> Self {
        RidgeEstimator {
            lambda_grid: None,
            folds: 10,
            seed: 0,
        }
    }
}

impl InitialEstimator for RidgeEstimator {
    fn name(&self) -> &str {
        "ridge"
    }

    fn estimate(&self, d: &LabeledDataset) -> Result<f64> {
        let grid = match &self.lambda_grid {
            Some(g) => g.clone(),
            None => default_lambda_grid(d.x()),
        };
        ridge_tau2(d, &grid, self.folds, self.seed)
    }
}

/// An external program that reads the dataset as CSV on stdin (covariate
/// columns then `y`, with a header) and prints one number.
#[derive(Debug, Clone)]
pub struct CommandEstimator {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandEstimator {
    /// Split a command line on whitespace.
    pub fn parse(cmd: &str) -> Result<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::param("initial", "empty command"))?;
        Ok(CommandEstimator {
            program,
            args: parts.collect(),
        })
    }
}

impl InitialEstimator for CommandEstimator {
    fn name(&self) -> &str {
        &self.program
    }

    fn estimate(&self, d: &LabeledDataset) -> Result<f64> {
        let mut buf = Vec::new();
        write_csv(d, &mut buf)?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start {}: {e}", self.program)))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            stdin
                .write_all(&buf)
                .map_err(|e| Error::External(format!("writing to {}: {e}", self.program)))?;
        }
        let out = child
            .wait_with_output()
            .map_err(|e| Error::External(format!("waiting for {}: {e}", self.program)))?;
        if !out.status.success() {
            return Err(Error::External(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let v: f64 = text
            .trim()
            .parse()
            .map_err(|_| Error::External(format!("{} printed {:?}, expected a number", self.program, text.trim())))?;
        if !v.is_finite() {
            return Err(Error::External(format!("{} printed a non-finite value", self.program)));
        }
        Ok(v)
    }
}

/// Which covariates enter the zero-estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexChoice {
    All,
    /// Largest-gap rule on the naive `beta_j^2` estimates of the full sample.
    Gap,
    Fixed(Vec<usize>),
}

/// How replicate samples are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// `n` rows with replacement; `Var(Z*)` is taken as `Var(g) / n`.
    #[default]
    WithReplacement,
    /// `floor(n / 2)` distinct rows. Avoids the duplicated-row pairs that
    /// inflate the bootstrap covariance of a U-statistic with `Z*`.
    HalfSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub m: usize,
    pub seed: u64,
    pub selection: IndexChoice,
    #[serde(default)]
    pub resampling: Resampling,
}

impl BootstrapPlan {
    pub fn new(m: usize, seed: u64) -> Self {
        BootstrapPlan {
            m,
            seed,
            selection: IndexChoice::All,
            resampling: Resampling::WithReplacement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    pub estimate: Estimate,
    pub initial: f64,
    pub c_tilde: f64,
    pub covariance: f64,
    /// Standard error of the bootstrap covariance.
    pub covariance_se: f64,
    pub zero_value: f64,
}

/// `n` rows drawn uniformly with replacement from stream `(seed, index)`.
pub fn bootstrap_resample(d: &LabeledDataset, seed: u64, index: u64) -> LabeledDataset {
    let n = d.n();
    let mut rng = stream(seed, Domain::Bootstrap, index);
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    d.select_rows(&rows)
}

/// `floor(n / 2)` distinct rows drawn from stream `(seed, index)`.
pub fn half_sample(d: &LabeledDataset, seed: u64, index: u64) -> LabeledDataset {
    let n = d.n();
    let mut rng = stream(seed, Domain::Bootstrap, index);
    let mut rows: Vec<usize> = (0..n).collect();
    let (head, _) = rows.partial_shuffle(&mut rng, n / 2);
    d.select_rows(head)
}

fn resolve_set(d: &LabeledDataset, choice: &IndexChoice) -> Result<Vec<usize>> {
    match choice {
        IndexChoice::All => Ok((0..d.p()).collect()),
        IndexChoice::Fixed(s) => Ok(s.clone()),
        IndexChoice::Gap => {
            let w = naive::w_matrix(d)?;
            Ok(gap_selection(beta_sq_hat_all(&w)?.as_slice())?.set)
        }
    }
}

/// Improve `est` by `est(d) - c~ Z(d)` where `c~` is the bootstrap covariance
/// of `(est, Z)` divided by the known resampling variance of `Z`. When gap
/// selection keeps fewer than two covariates the initial value is returned,
/// flagged.
pub fn empirical_improve(
    d: &LabeledDataset,
    est: &dyn InitialEstimator,
    plan: &BootstrapPlan,
    source: VarSource,
    u: Option<&UnlabeledDataset>,
) -> Result<BootstrapOutcome> {
    if plan.m < 2 {
        return Err(Error::param("m", "need at least 2 bootstrap replications"));
    }
    if !d.whitened() {
        return Err(Error::NotWhitened);
    }
    if plan.resampling == Resampling::HalfSample && d.n() < 4 {
        return Err(Error::TooFewObservations { needed: 4, have: d.n() });
    }
    let s = resolve_set(d, &plan.selection)?;
    if plan.selection == IndexChoice::Gap && s.len() < 2 {
        let initial = est.estimate(d)?;
        let mut estimate = Estimate::new(initial, Method::Bootstrap).with_selection(s);
        estimate.flag(Flag::SelectionFallback);
        return Ok(BootstrapOutcome {
            estimate,
            initial,
            c_tilde: 0.0,
            covariance: 0.0,
            covariance_se: 0.0,
            zero_value: 0.0,
        });
    }
    let z = pairwise_zero_stat(d, &s, source, u)?;
    let initial = est.estimate(d)?;
    let pairs: Vec<(f64, f64)> = (0..plan.m as u64)
        .into_par_iter()
        .map(|b| {
            let r = match plan.resampling {
                Resampling::WithReplacement => bootstrap_resample(d, plan.seed, b),
                Resampling::HalfSample => half_sample(d, plan.seed, b),
            };
            let t = est.estimate(&r)?;
            Ok((t, pairwise_g(r.x(), &s).mean()))
        })
        .collect::<Result<_>>()?;
    // shifted by the first draw so that a constant estimator gives exactly zero
    let t0 = pairs[0].0;
    let (ts, zs): (Vec<f64>, Vec<f64>) = pairs.into_iter().map(|(t, z)| (t - t0, z)).unzip();
    let cov = crate::stats::covariance(&ts, &zs).unwrap_or(0.0);
    let (mt, mz) = (crate::stats::mean(&ts), crate::stats::mean(&zs));
    let prods: Vec<f64> = ts.iter().zip(&zs).map(|(t, z)| (t - mt) * (z - mz)).collect();
    let covariance_se = crate::stats::sd(&prods).unwrap_or(0.0) / (plan.m as f64).sqrt();
    let n = d.n() as f64;
    let var_z = match plan.resampling {
        Resampling::WithReplacement => z.var_g / n,
        Resampling::HalfSample => {
            let m = (d.n() / 2) as f64;
            z.var_g * (n - m) / (m * (n - 1.0))
        }
    };
    let c_tilde = cov / var_z;
    let mut estimate = Estimate::new(initial - c_tilde * z.value, Method::Bootstrap);
    if plan.selection != IndexChoice::All {
        estimate = estimate.with_selection(s);
    }
    Ok(BootstrapOutcome {
        estimate,
        initial,
        c_tilde,
        covariance: cov,
        covariance_se,
        zero_value: z.value,
    })
}

/// 20 log-spaced penalties over `[1e-3, 1e3] * ||X||_F^2 / (n p)`.
pub fn default_lambda_grid(x: &DMatrix<f64>) -> Vec<f64> {
    let scale = x.norm_squared() / (x.nrows() * x.ncols()) as f64;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    (0..20)
        .map(|k| scale * 10f64.powf(-3.0 + 6.0 * k as f64 / 19.0))
        .collect()
}

/// Eigendecomposition of the smaller of `X X^T` and `X^T X`, reused across
/// the penalty grid.
struct RidgePath {
    x: DMatrix<f64>,
    vecs: DMatrix<f64>,
    vals: DVector<f64>,
    dual: bool,
}

impl RidgePath {
    fn new(x: DMatrix<f64>) -> Self {
        let dual = x.nrows() <= x.ncols();
        let gram = if dual { &x * x.transpose() } else { x.tr_mul(&x) };
        let eig = gram.symmetric_eigen();
        RidgePath {
            x,
            vecs: eig.eigenvectors,
            vals: eig.eigenvalues.map(|v| v.max(0.0)),
            dual,
        }
    }

    /// `(X^T X + lambda I)^{-1} X^T y`, or the equivalent `X^T (X X^T + lambda I)^{-1} y`.
    fn coef(&self, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let rhs = if self.dual { y.clone() } else { self.x.tr_mul(y) };
        let mut a = self.vecs.tr_mul(&rhs);
        for (v, e) in a.iter_mut().zip(self.vals.iter()) {
            *v /= e + lambda;
        }
        let sol = &self.vecs * a;
        if self.dual {
            self.x.tr_mul(&sol)
        } else {
            sol
        }
    }
}

/// Squared norm of the ridge coefficients at the CV-selected penalty.
pub fn ridge_tau2(d: &LabeledDataset, lambda_grid: &[f64], folds: usize, seed: u64) -> Result<f64> {
    if lambda_grid.is_empty() || lambda_grid.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::param("lambda_grid", "penalties must be positive"));
    }
    let n = d.n();
    if folds < 2 || folds > n {
        return Err(Error::param("folds", format!("need 2 <= folds <= n = {n}")));
    }
    let lambda = if lambda_grid.len() == 1 {
        lambda_grid[0]
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, Domain::CrossValidation, 0));
        let mut err = vec![0.0; lambda_grid.len()];
        for f in 0..folds {
            let test: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
            let train: Vec<usize> = order
                .iter()
                .enumerate()
                .filter(|(k, _)| k % folds != f)
                .map(|(_, &i)| i)
                .collect();
            let tr = d.select_rows(&train);
            let te = d.select_rows(&test);
            let path = RidgePath::new(tr.x().clone());
            for (e, &l) in err.iter_mut().zip(lambda_grid) {
                let b = path.coef(tr.y(), l);
                *e += (te.y() - te.x() * b).norm_squared();
            }
        }
        let best = err
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        lambda_grid[best]
    };
    let path = RidgePath::new(d.x().clone());
    Ok(path.coef(d.y(), lambda).norm_squared())
}
