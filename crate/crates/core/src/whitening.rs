//! Covariate moments and the whitening transform `x -> Sigma^{-1/2} (x - mu)`.
//!
//! Moments are either known analytically (the infinite-unlabeled-sample
//! setting) or estimated from an unlabeled sample, optionally as a
//! `b`-banded covariance. After whitening, every estimator in the crate may
//! assume `E(X) = 0` and `Cov(X) = I`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};

/// Relative eigenvalue floor used before inverting.
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MomentSource {
    Known,
    Estimated { n: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateModel {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    sigma_inv_sqrt: DMatrix<f64>,
    bandwidth: Option<usize>,
    source: MomentSource,
    floored_eigenvalues: usize,
    identity: bool,
}

impl CovariateModel {
    /// Standardized covariates: `mu = 0`, `Sigma = I`.
    pub fn identity(p: usize) -> Self {
        CovariateModel {
            mu: DVector::zeros(p),
            sigma: DMatrix::identity(p, p),
            sigma_inv_sqrt: DMatrix::identity(p, p),
            bandwidth: None,
            source: MomentSource::Known,
            floored_eigenvalues: 0,
            identity: true,
        }
    }

    /// Analytic moments of a known covariate law.
    pub fn known(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                got: sigma.nrows(),
            });
        }
        let sigma_inv_sqrt = inv_sqrt(&sigma)?;
        let identity = mu.iter().all(|&v| v == 0.0) && sigma == DMatrix::identity(mu.len(), mu.len());
        Ok(CovariateModel {
            mu,
            sigma,
            sigma_inv_sqrt,
            bandwidth: None,
            source: MomentSource::Known,
            floored_eigenvalues: 0,
            identity,
        })
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sigma_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.sigma_inv_sqrt
    }

    pub fn bandwidth(&self) -> Option<usize> {
        self.bandwidth
    }

    pub fn source(&self) -> MomentSource {
        self.source
    }

    /// Number of eigenvalues raised to the floor before inversion.
    pub fn floored_eigenvalues(&self) -> usize {
        self.floored_eigenvalues
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(s)?;
        doc.into_model()
    }
}

/// `Sigma^{-1/2}` from the symmetric eigendecomposition. Fails when an
/// eigenvalue is below `EIGEN_FLOOR * lambda_max`.
pub fn inv_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, floored) = inv_sqrt_floored(sigma)?;
    if floored > 0 {
        return Err(Error::DegenerateCovariance(format!(
            "{floored} eigenvalue(s) below {EIGEN_FLOOR:e} x largest"
        )));
    }
    Ok(m)
}

/// Like [`inv_sqrt`] but raises small eigenvalues to the floor instead of
/// failing; returns how many were raised.
pub fn inv_sqrt_floored(sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    if !sigma.is_square() {
        return Err(Error::DimensionMismatch {
            expected: sigma.nrows(),
            got: sigma.ncols(),
        });
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) || !lmax.is_finite() {
        return Err(Error::DegenerateCovariance(format!(
            "largest eigenvalue is {lmax}"
        )));
    }
    let floor = EIGEN_FLOOR * lmax;
    let mut floored = 0;
    let scale = eig.eigenvalues.map(|l| {
        if l < floor {
            floored += 1;
            floor.powf(-0.5)
        } else {
            l.powf(-0.5)
        }
    });
    let v = &eig.eigenvectors;
    let mut vs = v.clone();
    for (mut col, s) in vs.column_iter_mut().zip(scale.iter()) {
        col *= *s;
    }
    let out = vs * v.transpose();
    Ok(((&out + out.transpose()) * 0.5, floored))
}

/// Plug-in mean and covariance (divisor `N`) of an unlabeled sample. With a
/// bandwidth `b`, entries with `|j - j'| > b` are exactly zero and the
/// inverse square root is taken after flooring; without one, a covariance
/// below the eigenvalue floor is an error.
pub fn estimate_moments(u: &UnlabeledDataset, bandwidth: Option<usize>) -> Result<CovariateModel> {
    let (n, p) = (u.n(), u.p());
    let mu = u.x().row_mean().transpose();
    let mut centered = u.x().clone();
    for (mut col, m) in centered.column_iter_mut().zip(mu.iter()) {
        col.add_scalar_mut(-m);
    }
    let sigma = match bandwidth {
        None => {
            if n < p + 1 {
                return Err(Error::TooFewObservations { needed: p + 1, have: n });
            }
            let mut s = centered.tr_mul(&centered);
            s /= n as f64;
            s
        }
        Some(b) => {
            let mut s = DMatrix::zeros(p, p);
            for j in 0..p {
                for k in j..p.min(j + b + 1) {
                    let v = centered.column(j).dot(&centered.column(k)) / n as f64;
                    s[(j, k)] = v;
                    s[(k, j)] = v;
                }
            }
            s
        }
    };
    from_moments(mu, sigma, bandwidth, n)
}

/// Model from moments already estimated from `n` unlabeled rows. With a
/// bandwidth, entries outside the band are zeroed and small eigenvalues are
/// floored.
pub fn from_moments(
    mu: DVector<f64>,
    mut sigma: DMatrix<f64>,
    bandwidth: Option<usize>,
    n: usize,
) -> Result<CovariateModel> {
    let p = mu.len();
    if sigma.nrows() != p || sigma.ncols() != p {
        return Err(Error::DimensionMismatch { expected: p, got: sigma.nrows() });
    }
    if let Some(b) = bandwidth {
        for j in 0..p {
            for k in 0..p {
                if j.abs_diff(k) > b {
                    sigma[(j, k)] = 0.0;
                }
            }
        }
    }
    let (sigma_inv_sqrt, floored) = match bandwidth {
        None => (inv_sqrt(&sigma)?, 0),
        Some(_) => inv_sqrt_floored(&sigma)?,
    };
    Ok(CovariateModel {
        mu,
        sigma,
        sigma_inv_sqrt,
        bandwidth,
        source: MomentSource::Estimated { n },
        floored_eigenvalues: floored,
        identity: false,
    })
}

fn whiten_matrix(m: &CovariateModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != m.p() {
        return Err(Error::DimensionMismatch {
            expected: m.p(),
            got: x.ncols(),
        });
    }
    if m.identity {
        return Ok(x.clone());
    }
    let mut c = x.clone();
    for (mut col, mu) in c.column_iter_mut().zip(m.mu.iter()) {
        col.add_scalar_mut(-mu);
    }
    Ok(c * &m.sigma_inv_sqrt)
}

/// Replace every covariate row `x` by `Sigma^{-1/2} (x - mu)`.
pub fn whiten(m: &CovariateModel, d: &LabeledDataset) -> Result<LabeledDataset> {
    Ok(d.replace_x(whiten_matrix(m, d.x())?, true))
}

pub fn whiten_unlabeled(m: &CovariateModel, u: &UnlabeledDataset) -> Result<UnlabeledDataset> {
    Ok(UnlabeledDataset::from_parts_unchecked(
        whiten_matrix(m, u.x())?,
        true,
    ))
}

const MODEL_FORMAT: &str = "zest-covariate-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "layout")]
enum SigmaDoc {
    /// Row-major dense matrix.
    Dense { rows: Vec<Vec<f64>> },
    /// `diagonals[d][j] = Sigma[j, j + d]` for `d = 0..=b`.
    Banded { diagonals: Vec<Vec<f64>> },
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    p: usize,
    mu: Vec<f64>,
    sigma: SigmaDoc,
    bandwidth: Option<usize>,
    source: MomentSource,
}

impl From<&CovariateModel> for ModelDoc {
    fn from(m: &CovariateModel) -> Self {
        let p = m.p();
        let sigma = match m.bandwidth {
            Some(b) => SigmaDoc::Banded {
                diagonals: (0..=b.min(p.saturating_sub(1)))
                    .map(|d| (0..p - d).map(|j| m.sigma[(j, j + d)]).collect())
                    .collect(),
            },
            None => SigmaDoc::Dense {
                rows: (0..p)
                    .map(|i| m.sigma.row(i).iter().copied().collect())
                    .collect(),
            },
        };
        ModelDoc {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            p,
            mu: m.mu.iter().copied().collect(),
            sigma,
            bandwidth: m.bandwidth,
            source: m.source,
        }
    }
}

impl ModelDoc {
    fn into_model(self) -> Result<CovariateModel> {
        if self.format != MODEL_FORMAT {
            return Err(Error::param("format", format!("expected {MODEL_FORMAT:?}")));
        }
        if self.version != MODEL_VERSION {
            return Err(Error::param("version", format!("unsupported {}", self.version)));
        }
        let p = self.p;
        if self.mu.len() != p {
            return Err(Error::DimensionMismatch { expected: p, got: self.mu.len() });
        }
        let sigma = match self.sigma {
            SigmaDoc::Dense { rows } => {
                if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                    return Err(Error::param("sigma", "dense sigma must be p x p"));
                }
                DMatrix::from_fn(p, p, |i, j| rows[i][j])
            }
            SigmaDoc::Banded { diagonals } => {
                let mut s = DMatrix::zeros(p, p);
                for (d, diag) in diagonals.iter().enumerate() {
                    if diag.len() != p.saturating_sub(d) {
                        return Err(Error::param("sigma", format!("diagonal {d} has wrong length")));
                    }
                    for (j, &v) in diag.iter().enumerate() {
                        s[(j, j + d)] = v;
                        s[(j + d, j)] = v;
                    }
                }
                s
            }
        };
        let mu = DVector::from_vec(self.mu);
        match (self.source, self.bandwidth) {
            (MomentSource::Known, None) => CovariateModel::known(mu, sigma),
            (source, bandwidth) => {
                let (sigma_inv_sqrt, floored) = if bandwidth.is_some() {
                    inv_sqrt_floored(&sigma)?
                } else {
                    (inv_sqrt(&sigma)?, 0)
                };
                Ok(CovariateModel {
                    mu,
                    sigma,
                    sigma_inv_sqrt,
                    bandwidth,
                    source,
                    floored_eigenvalues: floored,
                    identity: false,
                })
            }
        }
    }
}
