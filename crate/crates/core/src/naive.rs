//! The naive U-statistic estimators of `tau^2` and `sigma^2`, the Dicker
//! form, and the two variance estimators for `tau^2-hat`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// `W[i, j] = X[i, j] * Y[i]` with cached column sums and row norms.
#[derive(Debug, Clone)]
pub struct WMatrix {
    w: DMatrix<f64>,
    col_sums: DVector<f64>,
    row_sq_norms: DVector<f64>,
}

impl WMatrix {
    pub fn from_parts(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        let mut w = x.clone();
        for (i, mut row) in w.row_iter_mut().enumerate() {
            row *= y[i];
        }
        let col_sums = w.row_sum().transpose();
        let row_sq_norms = DVector::from_iterator(w.nrows(), w.row_iter().map(|r| r.norm_squared()));
        Ok(WMatrix { w, col_sums, row_sq_norms })
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn col_sums(&self) -> &DVector<f64> {
        &self.col_sums
    }

    pub fn row_sq_norms(&self) -> &DVector<f64> {
        &self.row_sq_norms
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    fn pairs(&self) -> f64 {
        let n = self.n() as f64;
        n * (n - 1.0)
    }
}

/// Build `W` from a whitened dataset.
pub fn w_matrix(d: &LabeledDataset) -> Result<WMatrix> {
    if !d.whitened() {
        return Err(Error::NotWhitened);
    }
    WMatrix::from_parts(d.x(), d.y())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Sigma2,
    Dicker,
    Oracle,
    OracleSingle,
    Single,
    SelectionSingle,
    Selection,
    FullPsi,
    Bootstrap,
    Ridge,
    Constant,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// The raw variance estimate was negative and has been clamped to zero.
    NegativeVariance,
    /// The point estimate itself is negative.
    NegativeValue,
    /// Selection produced fewer than two covariates; the uncorrected value was
    /// used.
    SelectionFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub variance_hat: Option<f64>,
    pub raw_variance_hat: Option<f64>,
    pub method: Method,
    pub selection_set: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<Flag>,
}

impl Estimate {
    pub fn new(value: f64, method: Method) -> Self {
        let mut e = Estimate {
            value,
            variance_hat: None,
            raw_variance_hat: None,
            method,
            selection_set: None,
            flags: Vec::new(),
        };
        if value < 0.0 {
            e.flag(Flag::NegativeValue);
        }
        e
    }

    /// Attach a variance estimate, keeping the raw value and clamping at 0.
    pub fn with_variance(mut self, raw: f64) -> Self {
        self.raw_variance_hat = Some(raw);
        if raw < 0.0 {
            self.variance_hat = Some(0.0);
            self.flag(Flag::NegativeVariance);
        } else {
            self.variance_hat = Some(raw);
        }
        self
    }

    pub fn with_selection(mut self, set: Vec<usize>) -> Self {
        self.selection_set = Some(set);
        self
    }

    pub fn flag(&mut self, f: Flag) {
        if !self.flags.contains(&f) {
            self.flags.push(f);
        }
    }

    pub fn has_flag(&self, f: Flag) -> bool {
        self.flags.contains(&f)
    }

    /// `value +- z * sqrt(variance_hat)`.
    pub fn interval(&self, z: f64) -> Option<(f64, f64)> {
        let h = z * self.variance_hat?.sqrt();
        Some((self.value - h, self.value + h))
    }
}

fn need(n: usize, needed: usize) -> Result<()> {
    if n < needed {
        return Err(Error::TooFewObservations { needed, have: n });
    }
    Ok(())
}

/// Unbiased estimate of `beta_j^2` (column `j`, zero-based).
pub fn beta_sq_hat(w: &WMatrix, j: usize) -> Result<f64> {
    need(w.n(), 2)?;
    if j >= w.p() {
        return Err(Error::IndexOutOfRange { index: j, len: w.p() });
    }
    let cs = w.col_sums[j];
    let diag = w.w.column(j).norm_squared();
    Ok((cs * cs - diag) / w.pairs())
}

/// All `p` coefficient estimates at once.
pub fn beta_sq_hat_all(w: &WMatrix) -> Result<DVector<f64>> {
    need(w.n(), 2)?;
    let pairs = w.pairs();
    Ok(DVector::from_iterator(
        w.p(),
        w.w.column_iter()
            .zip(w.col_sums.iter())
            .map(|(c, s)| (s * s - c.norm_squared()) / pairs),
    ))
}

fn tau2_value(w: &WMatrix) -> f64 {
    (w.col_sums.norm_squared() - w.row_sq_norms.sum()) / w.pairs()
}

pub fn naive_tau2(w: &WMatrix) -> Result<Estimate> {
    need(w.n(), 2)?;
    Ok(Estimate::new(tau2_value(w), Method::Naive))
}

/// Sample variance of the response (`n - 1` divisor).
pub fn sigma_y2_hat(y: &DVector<f64>) -> Result<f64> {
    need(y.len(), 2)?;
    let m = y.mean();
    Ok(y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (y.len() - 1) as f64)
}

/// `sigma^2-hat = sigma_Y^2-hat - tau^2-hat`; not clamped.
pub fn sigma2_hat(d: &LabeledDataset, tau2: &Estimate) -> Result<Estimate> {
    let sy2 = sigma_y2_hat(d.y())?;
    Ok(Estimate::new(sy2 - tau2.value, Method::Sigma2))
}

/// `(||X^T Y||^2 - p ||Y||^2) / (n (n + 1))`.
pub fn dicker_tau2(d: &LabeledDataset) -> f64 {
    let n = d.n() as f64;
    let xty = d.x().tr_mul(d.y());
    (xty.norm_squared() - d.p() as f64 * d.y().norm_squared()) / (n * (n + 1.0))
}

/// Gaussian-covariate closed form for `Var(tau^2-hat)`.
pub fn var_naive_gaussian_hat(tau2: f64, sigma_y2: f64, n: usize, p: usize) -> f64 {
    let nf = n as f64;
    let (t2, s2) = (tau2, sigma_y2);
    (4.0 / nf)
        * (((nf - 2.0) / (nf - 1.0)) * (s2 * t2 + t2 * t2)
            + (1.0 / (2.0 * (nf - 1.0))) * (p as f64 * s2 * s2 + 4.0 * s2 * t2 + 3.0 * t2 * t2))
}

/// U-statistic estimates of `beta^T A beta`, `||A||_F^2` and `||beta||^4`,
/// where `A = E(W W^T)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UstatComponents {
    pub b_a_b: f64,
    pub frob_a: f64,
    pub beta4: f64,
}

/// Goes through the `n x n` Gram matrix `G = W W^T`: with `r_m` the
/// off-diagonal row sum of `G`, the ordered distinct-triple sum is
/// `sum_m (r_m^2 - sum_{i != m} G_im^2)`.
pub fn ustat_components(w: &WMatrix) -> Result<UstatComponents> {
    let n = w.n();
    need(n, 3)?;
    let nf = n as f64;
    let g = &w.w * w.w.transpose();
    let ws = &w.w * &w.col_sums;
    let mut triple = 0.0;
    let mut frob_off = 0.0;
    for m in 0..n {
        let gmm = g[(m, m)];
        let r = ws[m] - gmm;
        let sq_off = g.column(m).norm_squared() - gmm * gmm;
        triple += r * r - sq_off;
        frob_off += sq_off;
    }
    let t = tau2_value(w);
    Ok(UstatComponents {
        b_a_b: triple / (nf * (nf - 1.0) * (nf - 2.0)),
        frob_a: frob_off / (nf * (nf - 1.0)),
        beta4: t * t,
    })
}

/// Distribution-free plug-in for `Var(tau^2-hat)`.
pub fn var_naive_ustat_hat(w: &WMatrix) -> Result<f64> {
    let c = ustat_components(w)?;
    let nf = w.n() as f64;
    Ok(4.0 * (nf - 2.0) / (nf * (nf - 1.0)) * (c.b_a_b - c.beta4)
        + 2.0 / (nf * (nf - 1.0)) * (c.frob_a - c.beta4))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wm(rows: usize, cols: usize, vals: &[f64]) -> WMatrix {
        let x = DMatrix::from_row_slice(rows, cols, vals);
        WMatrix::from_parts(&x, &DVector::from_element(rows, 1.0)).unwrap()
    }

    #[test]
    fn small_cases() {
        let w = wm(2, 1, &[1.0, 2.0]);
        assert_eq!(beta_sq_hat(&w, 0).unwrap(), 2.0);
        assert_eq!(naive_tau2(&w).unwrap().value, 2.0);
        assert!(beta_sq_hat(&w, 1).is_err());
    }

    #[test]
    fn three_ones() {
        let w = wm(3, 1, &[1.0, 1.0, 1.0]);
        let c = ustat_components(&w).unwrap();
        assert_eq!((c.b_a_b, c.frob_a, c.beta4), (1.0, 1.0, 1.0));
        assert!(ustat_components(&wm(2, 1, &[1.0, 1.0])).is_err());
    }

    #[test]
    fn gaussian_variance_formula() {
        let v = var_naive_gaussian_hat(1.0, 2.0, 300, 300);
        assert!((v - 0.0669).abs() < 5e-4, "{v}");
        assert_eq!(var_naive_gaussian_hat(0.0, 0.0, 10, 10), 0.0);
    }

    #[test]
    fn dicker_single_point() {
        let d = LabeledDataset::new(
            DMatrix::from_element(2, 1, 1.0),
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        // rows (1, y=1) and (1, y=0): X^T Y = 1, ||Y||^2 = 1
        assert_eq!(dicker_tau2(&d), 0.0);
    }

    #[test]
    fn negative_variance_is_clamped_and_kept() {
        let e = Estimate::new(1.0, Method::Naive).with_variance(-0.5);
        assert_eq!(e.variance_hat, Some(0.0));
        assert_eq!(e.raw_variance_hat, Some(-0.5));
        assert!(e.has_flag(Flag::NegativeVariance));
    }

    #[test]
    fn raw_data_is_rejected() {
        let d = LabeledDataset::new(DMatrix::from_element(3, 1, 1.0), DVector::zeros(3)).unwrap();
        assert!(matches!(w_matrix(&d), Err(Error::NotWhitened)));
        assert!(w_matrix(&d.assume_whitened()).is_ok());
    }
}
