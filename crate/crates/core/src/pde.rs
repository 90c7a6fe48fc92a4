//! Fokker-Planck right-hand sides in logarithmic form.
//!
//! For `∂_t p = −∇·(μ p) + Σ_ij ∂_i ∂_j (D_ij p)` with constant `D`,
//!
//! ```text
//! ∂_t log p = −∇·μ − μ·∇log p + Σ_ij D_ij (∂_i∂_j log p + ∂_i log p ∂_j log p).
//! ```

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff;
use crate::error::{ensure_dim, Error, Result};
use crate::flow::DensityModel;

/// A user-supplied drift field with its analytic divergence.
pub trait DriftField: Send + Sync {
    fn drift(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn divergence(&self, x: &[f64], t: f64) -> f64;
}

/// Coupled damped oscillators in contact with heat baths.
///
/// State layout is `(x_1..x_N, p_1..p_N)`; `temps[i]` is `k_B T_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpaceParams {
    pub mass: f64,
    pub omega: f64,
    pub coupling: f64,
    pub gamma: f64,
    pub temps: Vec<f64>,
}

impl PhaseSpaceParams {
    pub fn n_osc(&self) -> usize {
        self.temps.len()
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Precondition(format!("{name} must be positive and finite")))
            }
        };
        pos(self.mass, "mass")?;
        pos(self.omega, "omega")?;
        if !(self.coupling >= 0.0 && self.coupling.is_finite()) {
            return Err(Error::Precondition("coupling must be non-negative".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Precondition("gamma must be non-negative".into()));
        }
        if self.temps.is_empty() || self.temps.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::Precondition(
                "temperatures must be a non-empty list of non-negative values".into(),
            ));
        }
        Ok(())
    }

    /// `H = Σ ½(mω² x_i² + p_i²/m) + k Σ (x_i − x_{(i+1) mod N})²`.
    pub fn hamiltonian(&self, x: &[f64], p: &[f64]) -> Result<f64> {
        let n = self.n_osc();
        ensure_dim(n, x.len())?;
        ensure_dim(n, p.len())?;
        let mw2 = self.mass * self.omega * self.omega;
        let mut h = 0.0;
        for i in 0..n {
            h += 0.5 * (mw2 * x[i] * x[i] + p[i] * p[i] / self.mass);
            let dx = x[i] - x[(i + 1) % n];
            h += self.coupling * dx * dx;
        }
        Ok(h)
    }

    /// `(∂H/∂x, ∂H/∂p)`.
    pub fn hamiltonian_grad(&self, x: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.n_osc();
        ensure_dim(n, x.len())?;
        ensure_dim(n, p.len())?;
        let mut dx = vec![0.0; n];
        self.grad_x_into(x, &mut dx);
        Ok((dx, p.iter().map(|v| v / self.mass).collect()))
    }

    fn grad_x_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n_osc();
        let mw2 = self.mass * self.omega * self.omega;
        for i in 0..n {
            let next = x[(i + 1) % n];
            let prev = x[(i + n - 1) % n];
            out[i] = mw2 * x[i] + 2.0 * self.coupling * (2.0 * x[i] - next - prev);
        }
    }

    /// Phase-space drift `(∂_p H, −γ p − ∂_x H)` written into `out`.
    pub fn drift_into(&self, state: &[f64], out: &mut [f64]) {
        let n = self.n_osc();
        let (x, p) = state.split_at(n);
        let (ox, op) = out.split_at_mut(n);
        self.grad_x_into(x, op);
        for i in 0..n {
            ox[i] = p[i] / self.mass;
            op[i] = -self.gamma * p[i] - op[i];
        }
    }

    /// Diagonal of D: zero on positions, `γ m k_B T_i` on momenta.
    pub fn diffusion_diagonal(&self) -> Vec<f64> {
        let n = self.n_osc();
        let mut diag = vec![0.0; 2 * n];
        for (i, t) in self.temps.iter().enumerate() {
            diag[n + i] = self.gamma * self.mass * t;
        }
        diag
    }
}

#[derive(Clone)]
pub enum Drift {
    Zero,
    PhaseSpace(PhaseSpaceParams),
    Custom(Arc<dyn DriftField>),
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Zero => f.write_str("Zero"),
            Drift::PhaseSpace(p) => f.debug_tuple("PhaseSpace").field(p).finish(),
            Drift::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Drift field, its divergence and a constant diffusion matrix.
#[derive(Debug, Clone)]
pub struct FokkerPlanckProblem {
    dim: usize,
    drift: Drift,
    /// Row-major d × d.
    diffusion: Vec<f64>,
}

impl FokkerPlanckProblem {
    pub fn new(dim: usize, drift: Drift, diffusion: Vec<f64>) -> Result<Self> {
        ensure_dim(dim * dim, diffusion.len())?;
        let m = DMatrix::from_row_slice(dim, dim, &diffusion);
        let scale = m.amax().max(1.0);
        if (&m - m.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Precondition("diffusion matrix must be symmetric".into()));
        }
        if dim > 0 && m.symmetric_eigen().eigenvalues.min() < -1e-12 * scale {
            return Err(Error::Precondition(
                "diffusion matrix must be positive semi-definite".into(),
            ));
        }
        if let Drift::PhaseSpace(p) = &drift {
            p.validate()?;
            ensure_dim(2 * p.n_osc(), dim)?;
        }
        Ok(Self {
            dim,
            drift,
            diffusion,
        })
    }

    /// `∂_t p = D Δp` in `dim` dimensions.
    pub fn heat(dim: usize, diffusion: f64) -> Result<Self> {
        if !(diffusion >= 0.0 && diffusion.is_finite()) {
            return Err(Error::Precondition("diffusion constant must be non-negative".into()));
        }
        let mut d = vec![0.0; dim * dim];
        for i in 0..dim {
            d[i * dim + i] = diffusion;
        }
        Self::new(dim, Drift::Zero, d)
    }

    pub fn phase_space(params: PhaseSpaceParams) -> Result<Self> {
        params.validate()?;
        let dim = 2 * params.n_osc();
        let mut d = vec![0.0; dim * dim];
        for (i, v) in params.diffusion_diagonal().into_iter().enumerate() {
            d[i * dim + i] = v;
        }
        Self::new(dim, Drift::PhaseSpace(params), d)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn diffusion(&self) -> &[f64] {
        &self.diffusion
    }

    pub fn drift_kind(&self) -> &Drift {
        &self.drift
    }

    pub fn phase_space_params(&self) -> Option<&PhaseSpaceParams> {
        match &self.drift {
            Drift::PhaseSpace(p) => Some(p),
            _ => None,
        }
    }

    pub fn drift_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match &self.drift {
            Drift::Zero => out.fill(0.0),
            Drift::PhaseSpace(p) => p.drift_into(x, out),
            Drift::Custom(f) => f.drift(x, t, out),
        }
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, t, &mut out);
        out
    }

    pub fn drift_divergence(&self, x: &[f64], t: f64) -> f64 {
        match &self.drift {
            Drift::Zero => 0.0,
            Drift::PhaseSpace(p) => -p.gamma * p.n_osc() as f64,
            Drift::Custom(f) => f.divergence(x, t),
        }
    }

    /// `∂_t log p` from precomputed spatial derivatives of `log p` at `x`.
    pub fn dt_log_from_derivatives(&self, x: &[f64], t: f64, grad: &[f64], hess: &[f64]) -> f64 {
        let d = self.dim;
        let mut mu = vec![0.0; d];
        self.drift_into(x, t, &mut mu);
        let mut acc = -self.drift_divergence(x, t);
        for i in 0..d {
            acc -= mu[i] * grad[i];
        }
        for i in 0..d {
            for j in 0..d {
                let dij = self.diffusion[i * d + j];
                if dij != 0.0 {
                    acc += dij * (hess[i * d + j] + grad[i] * grad[j]);
                }
            }
        }
        acc
    }

    /// `∂_t log p_θ(x)` dictated by the PDE for the current model density.
    pub fn dt_log_prob(&self, model: &DensityModel, x: &[f64], t: f64) -> Result<f64> {
        ensure_dim(self.dim, model.dim())?;
        let (grad, hess) = diff::spatial_derivatives(model, x)?;
        let v = self.dt_log_from_derivatives(x, t, &grad, &hess);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("time derivative of log density"))
        }
    }

    /// Largest deviation between the analytic divergence and a central
    /// difference of the drift over `n` random points in `[-scale, scale]^d`.
    pub fn divergence_self_check<R: Rng + ?Sized>(&self, n: usize, scale: f64, rng: &mut R) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut up = vec![0.0; self.dim];
        let mut down = vec![0.0; self.dim];
        for _ in 0..n {
            let x: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-scale..scale)).collect();
            let t = rng.random_range(0.0..1.0);
            let mut fd = 0.0;
            let mut y = x.clone();
            for i in 0..self.dim {
                y[i] = x[i] + h;
                self.drift_into(&y, t, &mut up);
                y[i] = x[i] - h;
                self.drift_into(&y, t, &mut down);
                y[i] = x[i];
                fd += (up[i] - down[i]) / (2.0 * h);
            }
            worst = worst.max((fd - self.drift_divergence(&x, t)).abs());
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{CovarianceParam, DensityModel, LatentFamily, LatentInit, LatentSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(k: f64, gamma: f64, temps: Vec<f64>) -> PhaseSpaceParams {
        PhaseSpaceParams {
            mass: 1.0,
            omega: 1.0,
            coupling: k,
            gamma,
            temps,
        }
    }

    fn identity_gaussian(d: usize) -> DensityModel {
        DensityModel::init_identity(
            LatentSpec {
                family: LatentFamily::Gaussian,
                dim: d,
                covariance: CovarianceParam::CholeskyLower,
            },
            &LatentInit::standard(d),
            vec![],
            0,
        )
        .unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let p = params(0.0, 1.0, vec![1.0; 3]);
        assert_eq!(p.hamiltonian(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 1.0);
        let p = params(1.0, 1.0, vec![1.0; 3]);
        assert_eq!(p.hamiltonian(&[1.0, 0.0, 0.0], &[0.0; 3]).unwrap(), 2.5);
        let (_, dp) = p.hamiltonian_grad(&[0.0; 3], &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(dp, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn hamiltonian_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..5 {
            let p = PhaseSpaceParams {
                mass: 1.3,
                omega: 0.7,
                coupling: 0.9,
                gamma: 1.0,
                temps: vec![1.0; n],
            };
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (gx, gp) = p.hamiltonian_grad(&x, &q).unwrap();
            let h = 1e-6;
            for i in 0..n {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (p.hamiltonian(&xp, &q).unwrap() - p.hamiltonian(&xm, &q).unwrap()) / (2.0 * h);
                assert!((fd - gx[i]).abs() < 1e-8, "n={n} i={i}");
                let mut qp = q.clone();
                qp[i] += h;
                let mut qm = q.clone();
                qm[i] -= h;
                let fd = (p.hamiltonian(&x, &qp).unwrap() - p.hamiltonian(&x, &qm).unwrap()) / (2.0 * h);
                assert!((fd - gp[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn phase_space_divergence_is_analytic() {
        let prob = FokkerPlanckProblem::phase_space(params(1.0, 0.7, vec![10.0, 3.0, 1.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(prob.divergence_self_check(50, 3.0, &mut rng) < 1e-6);
        let diag = prob.phase_space_params().unwrap().diffusion_diagonal();
        for (a, b) in diag.iter().zip([0.0, 0.0, 0.0, 7.0, 2.1, 0.7]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn heat_dt_log_prob_for_standard_gaussian() {
        let model = identity_gaussian(8);
        let heat = FokkerPlanckProblem::heat(8, 1.0).unwrap();
        assert!((heat.dt_log_prob(&model, &[0.0; 8], 0.0).unwrap() + 8.0).abs() < 1e-12);
        assert!(heat.dt_log_prob(&model, &[1.0; 8], 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn undamped_phase_space_reduces_to_liouville_term() {
        let prob = FokkerPlanckProblem::phase_space(params(1.0, 0.0, vec![0.0; 2])).unwrap();
        let model = identity_gaussian(4);
        let x = [0.3, -1.2, 0.8, 0.1];
        let (g, _) = diff::spatial_derivatives(&model, &x).unwrap();
        let mu = prob.drift(&x, 0.0);
        let liouville: f64 = -mu.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        assert!((prob.dt_log_prob(&model, &x, 0.0).unwrap() - liouville).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_diffusion() {
        assert!(FokkerPlanckProblem::new(2, Drift::Zero, vec![1.0, 0.0, 0.0, -1.0]).is_err());
        assert!(FokkerPlanckProblem::new(2, Drift::Zero, vec![1.0, 0.5, 0.0, 1.0]).is_err());
        assert!(FokkerPlanckProblem::heat(3, -1.0).is_err());
    }
}
