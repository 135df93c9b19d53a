//! Zero-estimator corrections to the naive estimator.
//!
//! Two families are provided. The single-term correction subtracts a fitted
//! multiple of `Z = (1/n) sum_i g(X_i)` with `g(x) = sum_{j<j' in S} x_j x_j'`.
//! The selection correction subtracts `2 sum_{j,j' in S} psi_jj'-hat`, where
//! `S` is chosen by the largest-gap rule on the `beta_j^2` estimates.
//!
//! Sign convention: improved estimators are always `tau^2-hat - c * Z`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::naive::{self, beta_sq_hat_all, naive_tau2, Estimate, Flag, Method, WMatrix};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarSource {
    /// `|S| (|S| - 1) / 2`, exact for independent standardized columns.
    #[default]
    AnalyticIndependent,
    /// Sample variance of `g` over whitened unlabeled rows.
    EmpiricalUnlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroStat {
    pub value: f64,
    pub index_set: Vec<usize>,
    pub var_g: f64,
    pub var_source: VarSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    Gap,
    All,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub set: Vec<usize>,
    pub procedure: Procedure,
    pub split_seed: Option<u64>,
}

impl SelectionResult {
    pub fn all(p: usize) -> Self {
        SelectionResult {
            set: (0..p).collect(),
            procedure: Procedure::All,
            split_seed: None,
        }
    }

    /// A user-supplied set; indices are sorted and must be distinct.
    pub fn external(mut set: Vec<usize>, p: usize) -> Result<Self> {
        set.sort_unstable();
        check_set(&set, p)?;
        Ok(SelectionResult {
            set,
            procedure: Procedure::External,
            split_seed: None,
        })
    }
}

/// Anything that maps a dataset to a covariate subset, e.g. a lasso fit
/// living outside the crate.
pub trait SelectionProcedure {
    fn select(&self, d: &LabeledDataset) -> Result<SelectionResult>;
}

/// The largest-gap rule applied to `beta_j^2-hat` of the given dataset.
#[derive(Debug, Clone, Copy, Default)]
pub struct GapSelector;

impl SelectionProcedure for GapSelector {
    fn select(&self, d: &LabeledDataset) -> Result<SelectionResult> {
        let w = naive::w_matrix(d)?;
        gap_selection(beta_sq_hat_all(&w)?.as_slice())
    }
}

impl<F> SelectionProcedure for F
where
    F: Fn(&LabeledDataset) -> Result<Vec<usize>>,
{
    fn select(&self, d: &LabeledDataset) -> Result<SelectionResult> {
        SelectionResult::external(self(d)?, d.p())
    }
}

fn check_set(s: &[usize], p: usize) -> Result<()> {
    for (k, &j) in s.iter().enumerate() {
        if j >= p {
            return Err(Error::IndexOutOfRange { index: j, len: p });
        }
        if s[..k].contains(&j) {
            return Err(Error::param("index_set", format!("index {j} repeated")));
        }
    }
    Ok(())
}

fn require_whitened(d: &LabeledDataset) -> Result<()> {
    if d.whitened() {
        Ok(())
    } else {
        Err(Error::NotWhitened)
    }
}

/// Per-row `g(x_i) = ((sum_S x)^2 - sum_S x^2) / 2`.
pub fn pairwise_g(x: &DMatrix<f64>, s: &[usize]) -> DVector<f64> {
    DVector::from_iterator(
        x.nrows(),
        x.row_iter().map(|r| {
            let (sum, sq) = s.iter().fold((0.0, 0.0), |(a, b), &j| {
                let v = r[j];
                (a + v, b + v * v)
            });
            (sum * sum - sq) / 2.0
        }),
    )
}

pub fn var_pairwise_zero(
    s: &[usize],
    p: usize,
    source: VarSource,
    u: Option<&UnlabeledDataset>,
) -> Result<f64> {
    if s.len() < 2 {
        return Err(Error::DegenerateZeroEstimator(s.len()));
    }
    check_set(s, p)?;
    match source {
        VarSource::AnalyticIndependent => {
            let k = s.len() as f64;
            Ok(k * (k - 1.0) / 2.0)
        }
        VarSource::EmpiricalUnlabeled => {
            let u = u.ok_or_else(|| Error::param("var_source", "empirical variance needs unlabeled data"))?;
            if !u.whitened() {
                return Err(Error::NotWhitened);
            }
            if u.p() != p {
                return Err(Error::DimensionMismatch { expected: p, got: u.p() });
            }
            let g = pairwise_g(u.x(), s);
            let v = crate::stats::variance(g.as_slice()).unwrap_or(0.0);
            if !(v > 0.0) {
                return Err(Error::DegenerateCovariance("unlabeled g has zero variance".into()));
            }
            Ok(v)
        }
    }
}

pub fn pairwise_zero_stat(
    d: &LabeledDataset,
    s: &[usize],
    source: VarSource,
    u: Option<&UnlabeledDataset>,
) -> Result<ZeroStat> {
    require_whitened(d)?;
    let var_g = var_pairwise_zero(s, d.p(), source, u)?;
    let g = pairwise_g(d.x(), s);
    Ok(ZeroStat {
        value: g.mean(),
        index_set: s.to_vec(),
        var_g,
        var_source: source,
    })
}

/// `(2 / (n (n - 1))) sum_{i1 != i2} W_i1 . W_i2 g_i2`.
pub fn cross_numerator(w: &WMatrix, g: &DVector<f64>) -> Result<f64> {
    let n = w.n();
    if n < 2 {
        return Err(Error::TooFewObservations { needed: 2, have: n });
    }
    if g.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: g.len() });
    }
    let wg = w.w().tr_mul(g);
    let full = w.col_sums().dot(&wg);
    let diag = w.row_sq_norms().dot(g);
    let nf = n as f64;
    Ok(2.0 * (full - diag) / (nf * (nf - 1.0)))
}

/// Estimated coefficient for an arbitrary per-row zero-estimator `g` with
/// one-observation variance `var_g`.
pub fn c_hat_from_g(w: &WMatrix, g: &DVector<f64>, var_g: f64) -> Result<f64> {
    Ok(cross_numerator(w, g)? / var_g)
}

pub fn c_hat(w: &WMatrix, d: &LabeledDataset, z: &ZeroStat) -> Result<f64> {
    require_whitened(d)?;
    c_hat_from_g(w, &pairwise_g(d.x(), &z.index_set), z.var_g)
}

pub fn improve_single(tau2: &Estimate, c: f64, z: &ZeroStat, p: usize) -> Estimate {
    let method = if z.index_set.len() == p {
        Method::Single
    } else {
        Method::SelectionSingle
    };
    Estimate::new(tau2.value - c * z.value, method).with_selection(z.index_set.clone())
}

/// Largest-gap rule: keep every coefficient at or above the upper edge of
/// the largest gap between consecutive sorted values.
pub fn gap_selection(beta_sq: &[f64]) -> Result<SelectionResult> {
    let p = beta_sq.len();
    if p < 2 {
        return Err(Error::param("beta_sq", "gap selection needs p >= 2"));
    }
    let mut sorted = beta_sq.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = 1;
    let mut best_gap = sorted[1] - sorted[0];
    for j in 2..p {
        let gap = sorted[j] - sorted[j - 1];
        if gap > best_gap {
            best = j;
            best_gap = gap;
        }
    }
    let threshold = sorted[best];
    Ok(SelectionResult {
        set: (0..p).filter(|&j| beta_sq[j] >= threshold).collect(),
        procedure: Procedure::Gap,
        split_seed: None,
    })
}

/// Order-3 U-statistic
/// `psi_jk = sum_{distinct i1,i2,i3} W_i1j W_i2k (X_i3j X_i3k - 1{j=k}) / (n (n-1) (n-2))`.
pub fn psi_hat(w: &WMatrix, d: &LabeledDataset, j: usize, k: usize) -> Result<f64> {
    require_whitened(d)?;
    let n = w.n();
    if n < 3 {
        return Err(Error::TooFewObservations { needed: 3, have: n });
    }
    for idx in [j, k] {
        if idx >= w.p() {
            return Err(Error::IndexOutOfRange { index: idx, len: w.p() });
        }
    }
    // fixed order so that psi(j, k) and psi(k, j) round identically
    let (j, k) = (j.min(k), j.max(k));
    let delta = if j == k { 1.0 } else { 0.0 };
    let a = w.w().column(j);
    let b = w.w().column(k);
    let x = d.x();
    let (mut sa, mut sb, mut sc) = (0.0, 0.0, 0.0);
    let (mut sab, mut sac, mut sbc, mut sabc) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let c = x[(i, j)] * x[(i, k)] - delta;
        sa += a[i];
        sb += b[i];
        sc += c;
        sab += a[i] * b[i];
        sac += a[i] * c;
        sbc += b[i] * c;
        sabc += a[i] * b[i] * c;
    }
    let nf = n as f64;
    Ok((sa * sb * sc - sab * sc - sac * sb - sbc * sa + 2.0 * sabc) / (nf * (nf - 1.0) * (nf - 2.0)))
}

/// `sum_{j,k in S} psi_jk-hat` without the per-pair loop: every inclusion-
/// exclusion term contracts to `|S| x |S|` Gram matrices or row scalars.
pub fn psi_sum(w: &WMatrix, d: &LabeledDataset, s: &[usize]) -> Result<f64> {
    require_whitened(d)?;
    check_set(s, d.p())?;
    let n = w.n();
    if n < 3 {
        return Err(Error::TooFewObservations { needed: 3, have: n });
    }
    if s.is_empty() {
        return Ok(0.0);
    }
    let nf = n as f64;
    let v = d.x().select_columns(s);
    let u = w.w().select_columns(s);
    let su = u.row_sum().transpose();
    let vtv = v.tr_mul(&v);
    let utu = u.tr_mul(&u);
    // full product: s^T (V^T V - n I) s
    let t_full = su.dot(&(&vtv * &su)) - nf * su.norm_squared();
    // a and b collide: <U^T U, V^T V - n I>
    let t_ab = utu.component_mul(&vtv).sum() - nf * utu.trace();
    // a and c collide (equal to b and c by symmetry)
    let mut t_ac = 0.0;
    let mut t_abc = 0.0;
    for i in 0..n {
        let ui = u.row(i);
        let vi = v.row(i);
        let uv = ui.dot(&vi);
        t_ac += uv * vi.dot(&su.transpose()) - ui.dot(&su.transpose());
        t_abc += uv * uv - ui.norm_squared();
    }
    Ok((t_full - t_ab - 2.0 * t_ac + 2.0 * t_abc) / (nf * (nf - 1.0) * (nf - 2.0)))
}

/// `tau^2-hat - 2 sum_{j,k in S} psi_jk-hat` for a given set.
pub fn t_selection_linear(w: &WMatrix, d: &LabeledDataset, s: &SelectionResult) -> Result<Estimate> {
    let tau2 = naive_tau2(w)?;
    let corr = psi_sum(w, d, &s.set)?;
    Ok(Estimate::new(tau2.value - 2.0 * corr, Method::Selection).with_selection(s.set.clone()))
}

/// Seeded 50/50 row split: (selection half, evaluation half).
pub fn split_rows(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Domain::Split, 0));
    let second = idx.split_off(n / 2);
    (idx, second)
}

/// Gap selection followed by the psi correction. With a split seed, the set
/// is chosen on one half and the correction evaluated on the other; the
/// naive term always uses the full sample.
pub fn selection_estimator(w: &WMatrix, d: &LabeledDataset, split_seed: Option<u64>) -> Result<Estimate> {
    match split_seed {
        None => {
            let sel = gap_selection(beta_sq_hat_all(w)?.as_slice())?;
            t_selection_linear(w, d, &sel)
        }
        Some(seed) => {
            let (a, b) = split_rows(d.n(), seed);
            let da = d.select_rows(&a);
            let db = d.select_rows(&b);
            let mut sel = GapSelector.select(&da)?;
            sel.split_seed = Some(seed);
            let wb = naive::w_matrix(&db)?;
            let tau2 = naive_tau2(w)?;
            let corr = psi_sum(&wb, &db, &sel.set)?;
            Ok(Estimate::new(tau2.value - 2.0 * corr, Method::Selection).with_selection(sel.set))
        }
    }
}

/// Gap selection, then a single pairwise zero-estimator over the selected
/// set. Falls back to the naive value (flagged) when fewer than two
/// covariates are selected.
pub fn selection_single(
    w: &WMatrix,
    d: &LabeledDataset,
    source: VarSource,
    u: Option<&UnlabeledDataset>,
) -> Result<Estimate> {
    let tau2 = naive_tau2(w)?;
    let sel = gap_selection(beta_sq_hat_all(w)?.as_slice())?;
    if sel.set.len() < 2 {
        let mut e = Estimate::new(tau2.value, Method::SelectionSingle).with_selection(sel.set);
        e.flag(Flag::SelectionFallback);
        return Ok(e);
    }
    let z = pairwise_zero_stat(d, &sel.set, source, u)?;
    let c = c_hat(w, d, &z)?;
    let mut e = improve_single(&tau2, c, &z, d.p());
    e.method = Method::SelectionSingle;
    Ok(e)
}

/// Single pairwise zero-estimator over all `p` covariates.
pub fn single_estimator(
    w: &WMatrix,
    d: &LabeledDataset,
    source: VarSource,
    u: Option<&UnlabeledDataset>,
) -> Result<Estimate> {
    let tau2 = naive_tau2(w)?;
    let s: Vec<usize> = (0..d.p()).collect();
    let z = pairwise_zero_stat(d, &s, source, u)?;
    let c = c_hat(w, d, &z)?;
    let mut e = improve_single(&tau2, c, &z, d.p());
    e.method = Method::Single;
    Ok(e)
}

/// The estimator that plugs in all `p^2` psi terms. Kept for benchmarking;
/// its variance grows with `p^2 / n^3`.
pub fn full_psi_estimator(w: &WMatrix, d: &LabeledDataset) -> Result<Estimate> {
    let mut e = t_selection_linear(w, d, &SelectionResult::all(d.p()))?;
    e.method = Method::FullPsi;
    e.selection_set = None;
    Ok(e)
}

/// Optimal oracle estimator given the true coefficients:
/// `tau^2-hat - 2 [(1/n) sum_i (beta . X_i)^2 - ||beta||^2]`.
pub fn oracle_ooe(w: &WMatrix, d: &LabeledDataset, beta: &DVector<f64>) -> Result<Estimate> {
    require_whitened(d)?;
    if beta.len() != d.p() {
        return Err(Error::DimensionMismatch { expected: d.p(), got: beta.len() });
    }
    let tau2 = naive_tau2(w)?;
    let xb = d.x() * beta;
    let h = xb.norm_squared() / d.n() as f64 - beta.norm_squared();
    Ok(Estimate::new(tau2.value - 2.0 * h, Method::Oracle))
}

/// Single zero-estimator with the true coefficient `c* = 2 beta . theta / Var(g)`.
pub fn oracle_single(
    w: &WMatrix,
    beta: &DVector<f64>,
    theta: &DVector<f64>,
    z: &ZeroStat,
) -> Result<Estimate> {
    if beta.len() != theta.len() || beta.len() != w.p() {
        return Err(Error::DimensionMismatch { expected: w.p(), got: theta.len() });
    }
    let tau2 = naive_tau2(w)?;
    let c = 2.0 * beta.dot(theta) / z.var_g;
    Ok(Estimate::new(tau2.value - c * z.value, Method::OracleSingle).with_selection(z.index_set.clone()))
}

/// `theta_j = E(W_j g)` under a linear model with independent standardized
/// covariates: `sum_{k in S, k != j} beta_k` for `j` in `S`, else 0.
pub fn theta_linear(beta: &DVector<f64>, s: &[usize]) -> DVector<f64> {
    let total: f64 = s.iter().map(|&k| beta[k]).sum();
    let mut theta = DVector::zeros(beta.len());
    for &j in s {
        theta[j] = total - beta[j];
    }
    theta
}

/// Variance estimate for the selection estimator. Gaussian form when no
/// fourth moments are given, distribution-free form otherwise.
pub fn var_selection_hat(
    var_naive: f64,
    beta_sq_sel: &[f64],
    n: usize,
    fourth_moments: Option<&[f64]>,
) -> Result<f64> {
    let nf = n as f64;
    let tb: f64 = beta_sq_sel.iter().sum();
    match fourth_moments {
        None => Ok(var_naive - 8.0 / nf * tb * tb),
        Some(m4) => {
            if m4.len() != beta_sq_sel.len() {
                return Err(Error::DimensionMismatch { expected: beta_sq_sel.len(), got: m4.len() });
            }
            let sq: f64 = beta_sq_sel.iter().map(|b| b * b).sum();
            let diag: f64 = beta_sq_sel.iter().zip(m4).map(|(b, m)| b * b * (m - 1.0)).sum();
            Ok(var_naive - 4.0 / nf * (diag + 2.0 * (tb * tb - sq)))
        }
    }
}

/// Variance estimate for the single-term estimator:
/// `var_naive - numerator^2 / (n Var(g))`.
pub fn var_single_hat(var_naive: f64, w: &WMatrix, d: &LabeledDataset, z: &ZeroStat) -> Result<f64> {
    require_whitened(d)?;
    let num = cross_numerator(w, &pairwise_g(d.x(), &z.index_set))?;
    Ok(var_naive - num * num / (w.n() as f64 * z.var_g))
}

/// Covariate laws with known moments, for the monomial zero-estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Law {
    Gaussian,
    /// `Exp(1) - 1`.
    CenteredExponential,
}

impl Law {
    /// `E(X^k)`.
    pub fn moment(self, k: u32) -> f64 {
        match self {
            Law::Gaussian => {
                if k % 2 == 1 {
                    0.0
                } else {
                    (1..k).step_by(2).map(|v| v as f64).product()
                }
            }
            // central moments of Exp(1): the subfactorials
            Law::CenteredExponential => {
                let mut d = [1.0f64, 0.0];
                for m in 2..=k as usize {
                    let next = (m as f64 - 1.0) * (d[0] + d[1]);
                    d = [d[1], next];
                }
                if k == 0 { 1.0 } else { d[1] }
            }
        }
    }
}

/// Per-row monomial zero-estimator `x_1^k1 x_2^k2 - E(X_1^k1) E(X_2^k2)`
/// for `p = 2` with independent coordinates drawn from `law` (`p = 1` when
/// `k2 = 0`).
pub fn monomial_g(x: &DMatrix<f64>, k1: u32, k2: u32, law: Law) -> Result<DVector<f64>> {
    if x.ncols() > 2 || (k2 > 0 && x.ncols() < 2) {
        return Err(Error::param("p", "monomial zero-estimators need p <= 2"));
    }
    let e = law.moment(k1) * law.moment(k2);
    Ok(DVector::from_iterator(
        x.nrows(),
        x.row_iter().map(|r| {
            let b = if k2 > 0 { r[1].powi(k2 as i32) } else { 1.0 };
            r[0].powi(k1 as i32) * b - e
        }),
    ))
}
