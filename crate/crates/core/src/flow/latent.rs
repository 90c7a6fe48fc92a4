//! Trainable latent distribution: multivariate Gaussian or Student-t with
//! variational mean, covariance factor and (for Student-t) degrees of freedom.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentFamily {
    Gaussian,
    StudentT,
}

/// How the covariance matrix is rebuilt from the `latent.cov_factor` group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceParam {
    /// Σ = L Lᵀ, L lower triangular with log-parameterized diagonal.
    CholeskyLower,
    /// Σ = 1 + A Aᵀ with A a full d×d matrix.
    IdentityPlusAat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub family: LatentFamily,
    pub dim: usize,
    pub covariance: CovarianceParam,
}

impl LatentSpec {
    pub fn cov_factor_len(&self) -> usize {
        match self.covariance {
            CovarianceParam::CholeskyLower => self.dim * (self.dim + 1) / 2,
            CovarianceParam::IdentityPlusAat => self.dim * self.dim,
        }
    }

    pub fn has_nu(&self) -> bool {
        self.family == LatentFamily::StudentT
    }

    pub fn param_count(&self) -> usize {
        self.dim + self.cov_factor_len() + usize::from(self.has_nu())
    }
}

/// Initial distribution encoded into the latent parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentInit {
    pub mean: Vec<f64>,
    /// Row-major d×d covariance.
    pub covariance: Vec<f64>,
    pub nu: Option<f64>,
}

impl LatentInit {
    pub fn standard(dim: usize) -> Self {
        Self::isotropic(vec![0.0; dim], 1.0, None)
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64, nu: Option<f64>) -> Self {
        let d = mean.len();
        let mut covariance = vec![0.0; d * d];
        for i in 0..d {
            covariance[i * d + i] = variance;
        }
        Self {
            mean,
            covariance,
            nu,
        }
    }

    /// Latent parameter block `[mu | cov_factor | nu_raw]` for `spec`.
    pub fn encode(&self, spec: &LatentSpec) -> Result<Vec<f64>> {
        let d = spec.dim;
        if self.mean.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.mean.len(),
            });
        }
        if self.covariance.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: self.covariance.len(),
            });
        }
        let sigma = DMatrix::from_row_slice(d, d, &self.covariance);
        if (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax().max(1.0) {
            return Err(Error::Precondition("initial covariance not symmetric".into()));
        }
        let mut out = self.mean.clone();
        match spec.covariance {
            CovarianceParam::CholeskyLower => {
                let l = sigma
                    .cholesky()
                    .ok_or_else(|| Error::Precondition("initial covariance not positive definite".into()))?
                    .l();
                for i in 0..d {
                    for j in 0..=i {
                        out.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
                    }
                }
            }
            CovarianceParam::IdentityPlusAat => {
                let excess = sigma - DMatrix::<f64>::identity(d, d);
                let eig = excess.symmetric_eigen();
                if eig.eigenvalues.min() < -1e-12 {
                    return Err(Error::Precondition(
                        "identity-plus-AAᵀ covariance requires Σ - 1 positive semi-definite".into(),
                    ));
                }
                let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                let a = &eig.eigenvectors
                    * DMatrix::from_diagonal(&sqrt_vals)
                    * eig.eigenvectors.transpose();
                for i in 0..d {
                    for j in 0..d {
                        out.push(a[(i, j)]);
                    }
                }
            }
        }
        match (spec.family, self.nu) {
            (LatentFamily::StudentT, Some(nu)) if nu > 0.0 && nu.is_finite() => out.push(nu.ln()),
            (LatentFamily::StudentT, _) => {
                return Err(Error::Precondition(
                    "Student-t latent requires a finite nu > 0".into(),
                ))
            }
            (LatentFamily::Gaussian, None) => {}
            (LatentFamily::Gaussian, Some(_)) => {
                return Err(Error::Precondition("Gaussian latent has no nu parameter".into()))
            }
        }
        Ok(out)
    }
}

/// Latent quantities that depend only on θ, rebuilt after every parameter write.
#[derive(Debug, Clone)]
pub(crate) struct LatentState {
    spec: LatentSpec,
    mu: Vec<f64>,
    /// The raw factor matrix (A or L), row-major.
    factor: Vec<f64>,
    /// Lower Cholesky factor of Σ, row-major.
    chol: Vec<f64>,
    /// Σ⁻¹, row-major.
    sigma_inv: Vec<f64>,
    /// Σ⁻¹ · factor, row-major.
    sigma_inv_factor: Vec<f64>,
    nu: Option<f64>,
    log_norm: f64,
}

/// Per-point latent evaluation, reused by the derivative routines.
#[derive(Debug, Clone)]
pub(crate) struct LatentEval {
    pub log_prob: f64,
    /// w = Σ⁻¹ (z − μ)
    pub w: Vec<f64>,
    /// q = (z − μ)ᵀ Σ⁻¹ (z − μ)
    pub q: f64,
    /// Score weight: 1 for Gaussian, (ν + d)/(ν + q) for Student-t.
    pub c: f64,
}

impl LatentState {
    pub fn new(spec: LatentSpec, params: &[f64]) -> Result<Self> {
        let d = spec.dim;
        if params.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        let mu = params[..d].to_vec();
        let raw = &params[d..d + spec.cov_factor_len()];
        let mut factor = vec![0.0; d * d];
        let sigma = match spec.covariance {
            CovarianceParam::CholeskyLower => {
                let mut k = 0;
                for i in 0..d {
                    for j in 0..=i {
                        factor[i * d + j] = if i == j { raw[k].exp() } else { raw[k] };
                        k += 1;
                    }
                }
                let l = DMatrix::from_row_slice(d, d, &factor);
                &l * l.transpose()
            }
            CovarianceParam::IdentityPlusAat => {
                factor.copy_from_slice(raw);
                let a = DMatrix::from_row_slice(d, d, &factor);
                DMatrix::<f64>::identity(d, d) + &a * a.transpose()
            }
        };
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Precondition("latent covariance not positive definite".into()))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let sigma_inv = chol.inverse();
        let sigma_inv = (&sigma_inv + sigma_inv.transpose()) * 0.5;
        let f = DMatrix::from_row_slice(d, d, &factor);
        let sigma_inv_factor = &sigma_inv * f;

        let nu = if spec.has_nu() {
            let nu = params[d + spec.cov_factor_len()].exp();
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(Error::NonFinite("latent nu"));
            }
            Some(nu)
        } else {
            None
        };
        let df = d as f64;
        let log_norm = match nu {
            None => -0.5 * df * (2.0 * PI).ln() - 0.5 * log_det,
            Some(nu) => {
                ln_gamma(0.5 * (nu + df)) - ln_gamma(0.5 * nu)
                    - 0.5 * df * (nu * PI).ln()
                    - 0.5 * log_det
            }
        };
        let state = Self {
            spec,
            mu,
            factor,
            chol: row_major(&l),
            sigma_inv: row_major(&sigma_inv),
            sigma_inv_factor: row_major(&sigma_inv_factor),
            nu,
            log_norm,
        };
        if !state.log_norm.is_finite() || state.sigma_inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent covariance"));
        }
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn nu(&self) -> Option<f64> {
        self.nu
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    /// Σ reconstructed from the Cholesky factor, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let l = DMatrix::from_row_slice(d, d, &self.chol);
        row_major(&(&l * l.transpose()))
    }

    pub fn eval(&self, z: &[f64]) -> LatentEval {
        let d = self.dim();
        let mut w = vec![0.0; d];
        let mut q = 0.0;
        for i in 0..d {
            let row = &self.sigma_inv[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += row[j] * (z[j] - self.mu[j]);
            }
            w[i] = acc;
            q += acc * (z[i] - self.mu[i]);
        }
        let q = q.max(0.0);
        let (log_prob, c) = match self.nu {
            None => (self.log_norm - 0.5 * q, 1.0),
            Some(nu) => {
                let df = d as f64;
                (
                    self.log_norm - 0.5 * (nu + df) * (q / nu).ln_1p(),
                    (nu + df) / (nu + q),
                )
            }
        };
        LatentEval { log_prob, w, q, c }
    }

    pub fn log_prob(&self, z: &[f64]) -> f64 {
        self.eval(z).log_prob
    }

    /// ∇_z log π.
    pub fn grad_z(&self, e: &LatentEval) -> Vec<f64> {
        e.w.iter().map(|w| -e.c * w).collect()
    }

    /// ∇²_z log π, row-major.
    pub fn hess_z(&self, e: &LatentEval) -> Vec<f64> {
        let d = self.dim();
        let mut h: Vec<f64> = self.sigma_inv.iter().map(|s| -e.c * s).collect();
        if let Some(nu) = self.nu {
            let k = 2.0 * e.c / (nu + e.q);
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] += k * e.w[i] * e.w[j];
                }
            }
        }
        h
    }

    /// Writes ∂ log π / ∂(latent params) into `out` (length `param_count`).
    pub fn param_grad(&self, e: &LatentEval, out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            out[i] = e.c * e.w[i];
        }
        // ∂/∂F = 2 G F with G = ½(c w wᵀ − Σ⁻¹), F the raw factor.
        let mut ftw = vec![0.0; d];
        for j in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                acc += self.factor[i * d + j] * e.w[i];
            }
            ftw[j] = acc;
        }
        let grad_f = |i: usize, j: usize| e.c * e.w[i] * ftw[j] - self.sigma_inv_factor[i * d + j];
        let cov = &mut out[d..d + self.spec.cov_factor_len()];
        match self.spec.covariance {
            CovarianceParam::IdentityPlusAat => {
                for i in 0..d {
                    for j in 0..d {
                        cov[i * d + j] = grad_f(i, j);
                    }
                }
            }
            CovarianceParam::CholeskyLower => {
                let mut k = 0;
                for i in 0..d {
                    for j in 0..=i {
                        cov[k] = if i == j {
                            grad_f(i, i) * self.factor[i * d + i]
                        } else {
                            grad_f(i, j)
                        };
                        k += 1;
                    }
                }
            }
        }
        if let Some(nu) = self.nu {
            let df = d as f64;
            let dnu = 0.5 * digamma(0.5 * (nu + df)) - 0.5 * digamma(0.5 * nu) - 0.5 * df / nu
                - 0.5 * (e.q / nu).ln_1p()
                + 0.5 * (nu + df) * e.q / (nu * (nu + e.q));
            out[d + self.spec.cov_factor_len()] = nu * dnu;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let scale = match self.nu {
            None => 1.0,
            Some(nu) => {
                let chi2: f64 = ChiSquared::new(nu)
                    .expect("nu validated positive")
                    .sample(rng);
                (nu / chi2).sqrt()
            }
        };
        (0..d)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += self.chol[i * d + j] * eps[j];
                }
                self.mu[i] + scale * acc
            })
            .collect()
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}
