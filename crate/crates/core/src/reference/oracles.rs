//! Closed-form Gaussian solutions.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use statrs::function::gamma::gamma_lr;

use crate::error::{ensure_dim, Error, Result};
use crate::pde::PhaseSpaceParams;

/// `d/2 · ln(2πe) + ½ ln det Σ`.
pub fn gaussian_entropy(d: usize, log_det: f64) -> f64 {
    0.5 * d as f64 * (1.0 + (2.0 * PI).ln()) + 0.5 * log_det
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: Vec<f64>,
    /// Row-major d × d.
    pub covariance: Vec<f64>,
    pub entropy: f64,
}

/// Heat flow of a Gaussian: `Σ(t) = Σ₀ + 2Dt·I`, mean unchanged.
pub fn gaussian_heat_oracle(sigma0: &[f64], mu0: &[f64], diffusion: f64, t: f64) -> Result<GaussianState> {
    let d = mu0.len();
    ensure_dim(d * d, sigma0.len())?;
    let mut cov = sigma0.to_vec();
    for i in 0..d {
        cov[i * d + i] += 2.0 * diffusion * t;
    }
    let chol = DMatrix::from_row_slice(d, d, &cov)
        .cholesky()
        .ok_or_else(|| Error::Precondition("covariance must be positive definite".into()))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(GaussianState {
        mean: mu0.to_vec(),
        covariance: cov,
        entropy: gaussian_entropy(d, log_det),
    })
}

/// Thermal steady state of the uncoupled chain at a single temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    /// Diagonal of Σ: `k_B T/(mω²)` for positions, `m k_B T` for momenta.
    pub variances: Vec<f64>,
    pub entropy: f64,
}

impl GibbsState {
    /// `P(|x| ≤ r)` for an isotropic steady state: `P(χ²_d ≤ r²/σ²)`.
    pub fn ball_prob(&self, r: f64) -> Result<f64> {
        let var = self.variances[0];
        if self.variances.iter().any(|v| (v - var).abs() > 1e-12 * var) {
            return Err(Error::NotApplicable("ball probability needs equal variances in every coordinate"));
        }
        if !(r >= 0.0) {
            return Err(Error::Precondition("radius must be non-negative".into()));
        }
        if r == 0.0 {
            return Ok(0.0);
        }
        if r.is_infinite() {
            return Ok(1.0);
        }
        Ok(gamma_lr(0.5 * self.variances.len() as f64, 0.5 * r * r / var))
    }
}

pub fn gibbs_oracle(params: &PhaseSpaceParams) -> Result<GibbsState> {
    params.validate()?;
    if params.coupling != 0.0 {
        return Err(Error::NotApplicable("steady state is closed-form only for uncoupled oscillators"));
    }
    let t = params.temps[0];
    if params.temps.iter().any(|v| *v != t) {
        return Err(Error::NotApplicable("steady state is closed-form only for a single bath temperature"));
    }
    if t <= 0.0 || params.gamma <= 0.0 {
        return Err(Error::NotApplicable("a thermal steady state needs positive temperature and damping"));
    }
    let n = params.n_osc();
    let vx = t / (params.mass * params.omega * params.omega);
    let vp = params.mass * t;
    let mut variances = vec![vx; n];
    variances.extend(std::iter::repeat_n(vp, n));
    let log_det = n as f64 * (vx.ln() + vp.ln());
    Ok(GibbsState {
        entropy: gaussian_entropy(2 * n, log_det),
        variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(d: usize) -> Vec<f64> {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        m
    }

    #[test]
    fn heat_entropies() {
        let e0 = gaussian_heat_oracle(&eye(8), &[0.0; 8], 1.0, 0.0).unwrap();
        assert!((e0.entropy - 4.0 * (1.0 + (2.0 * PI).ln())).abs() < 1e-12);
        assert!((e0.entropy - 11.3515).abs() < 1e-4);
        assert_eq!(e0.covariance, eye(8));
        let e2 = gaussian_heat_oracle(&eye(8), &[0.0; 8], 1.0, 2.0).unwrap();
        assert!((e2.entropy - 4.0 * (1.0 + (2.0 * PI).ln() + 5f64.ln())).abs() < 1e-12);
        assert!((e2.entropy - 17.7893).abs() < 1e-4);
        assert!(gaussian_heat_oracle(&[-1.0], &[0.0], 0.0, 0.0).is_err());
    }

    fn chain(k: f64, temps: Vec<f64>) -> PhaseSpaceParams {
        PhaseSpaceParams {
            mass: 1.0,
            omega: 1.0,
            coupling: k,
            gamma: 1.0,
            temps,
        }
    }

    #[test]
    fn gibbs_values() {
        let g = gibbs_oracle(&chain(0.0, vec![10.0; 3])).unwrap();
        assert!((g.entropy - 3.0 * (1.0 + (2.0 * PI).ln() + 10f64.ln())).abs() < 1e-12);
        assert!((g.entropy - 15.4214).abs() < 1e-4);
        let p = g.ball_prob(10.0).unwrap();
        let closed = 1.0 - (-5f64).exp() * (1.0 + 5.0 + 12.5);
        assert!((p - closed).abs() < 1e-12);
        assert!((p - 0.875348).abs() < 1e-6);
        assert_eq!(g.ball_prob(0.0).unwrap(), 0.0);
        assert_eq!(g.ball_prob(f64::INFINITY).unwrap(), 1.0);
        assert!((g.ball_prob(1e3).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gibbs_refuses_coupled_or_mixed_baths() {
        assert!(matches!(gibbs_oracle(&chain(1.0, vec![10.0; 3])), Err(Error::NotApplicable(_))));
        assert!(matches!(
            gibbs_oracle(&chain(0.0, vec![10.0, 3.0, 1.0])),
            Err(Error::NotApplicable(_))
        ));
        let mut anisotropic = chain(0.0, vec![2.0; 2]);
        anisotropic.mass = 2.0;
        let g = gibbs_oracle(&anisotropic).unwrap();
        assert!(g.ball_prob(1.0).is_err());
    }
}
