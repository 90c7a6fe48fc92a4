//! The variational linear system `S θ̇ = F`.
//!
//! Both sides are connected sample correlators:
//! `S_kl = ⟨O_k O_l⟩ − ⟨O_k⟩⟨O_l⟩`, `F_k = ⟨O_k ∂_t log p⟩ − ⟨O_k⟩⟨∂_t log p⟩`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff;
use crate::ensemble::ParticleEnsemble;
use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::flow::DensityModel;
use crate::pde::FokkerPlanckProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationPolicy {
    /// Eigenvalues below `svd_rel_cutoff · λ_max` are discarded.
    pub svd_rel_cutoff: f64,
    pub tikhonov_shift: f64,
}

impl Default for RegularizationPolicy {
    fn default() -> Self {
        Self {
            svd_rel_cutoff: 1e-8,
            tikhonov_shift: 0.0,
        }
    }
}

impl RegularizationPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if ok(self.svd_rel_cutoff) && ok(self.tikhonov_shift) {
            Ok(())
        } else {
            Err(Error::Precondition(
                "regularization cutoff and shift must be finite and non-negative".into(),
            ))
        }
    }
}

/// Assembled system together with the per-sample data it came from.
#[derive(Debug, Clone)]
pub struct TdvpSystem {
    pub s: DMatrix<f64>,
    pub f: DVector<f64>,
    /// Raw variational derivatives, n × K.
    pub o: DMatrix<f64>,
    pub dt_log: Vec<f64>,
}

impl TdvpSystem {
    pub fn n_samples(&self) -> usize {
        self.dt_log.len()
    }

    pub fn n_params(&self) -> usize {
        self.f.len()
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub theta_dot: Vec<f64>,
    /// Eigenvalues of the shifted S, descending.
    pub spectrum: Vec<f64>,
    pub rank: usize,
    /// S vanished; the update is zero.
    pub stationary: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualReport {
    pub r: f64,
    pub r_normalized: f64,
}

/// Builds the connected correlators from `o` (n × K, row-major) and `dt_log`.
///
/// `weights`, if given, are non-negative and are normalized to sum to one.
pub fn assemble(o: DMatrix<f64>, dt_log: Vec<f64>, weights: Option<&[f64]>) -> Result<TdvpSystem> {
    let n = o.nrows();
    let k = o.ncols();
    ensure_dim(n, dt_log.len())?;
    if n < 2 {
        return Err(Error::Precondition("at least two samples are required".into()));
    }
    ensure_finite(o.as_slice(), "variational derivatives")?;
    ensure_finite(&dt_log, "time derivative of log density")?;
    let w: Vec<f64> = match weights {
        None => vec![1.0 / n as f64; n],
        Some(w) => {
            ensure_dim(n, w.len())?;
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Precondition("weights must be finite and non-negative".into()));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::Precondition("weights must not all vanish".into()));
            }
            w.iter().map(|v| v / total).collect()
        }
    };

    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let e_mean: f64 = w.iter().zip(&dt_log).map(|(a, b)| a * b).sum();
    let e = DVector::from_iterator(n, dt_log.iter().zip(&sw).map(|(v, s)| s * (v - e_mean)));
    // Columns centered and rows scaled by √w, so the Gram product carries the weights.
    let mut centered = o.clone();
    for mut col in centered.column_iter_mut() {
        let mean: f64 = col.iter().zip(&w).map(|(a, b)| a * b).sum();
        for (v, s) in col.iter_mut().zip(&sw) {
            *v = s * (*v - mean);
        }
    }
    let ct = centered.transpose();
    let mut s = &ct * &centered;
    let f = &ct * &e;
    for a in 0..k {
        for b in 0..a {
            let m = 0.5 * (s[(a, b)] + s[(b, a)]);
            s[(a, b)] = m;
            s[(b, a)] = m;
        }
    }
    Ok(TdvpSystem { s, f, o, dt_log })
}

/// Regularized pseudo-inverse solve through a symmetric eigendecomposition.
pub fn solve(system: &TdvpSystem, policy: &RegularizationPolicy) -> Result<Solution> {
    policy.validate()?;
    let k = system.n_params();
    let mut s = system.s.clone();
    for i in 0..k {
        s[(i, i)] += policy.tikhonov_shift;
    }
    let eig = s.symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if lambda_max == 0.0 {
        log::warn!("Fisher matrix vanished; returning a zero update");
        return Ok(Solution {
            theta_dot: vec![0.0; k],
            spectrum,
            rank: 0,
            stationary: true,
        });
    }
    let threshold = policy.svd_rel_cutoff * lambda_max;
    let proj = eig.eigenvectors.tr_mul(&system.f);
    let mut scaled = DVector::zeros(k);
    let mut rank = 0;
    for i in 0..k {
        let l = eig.eigenvalues[i];
        if l.abs() > threshold {
            scaled[i] = proj[i] / l;
            rank += 1;
        }
    }
    let theta_dot = &eig.eigenvectors * scaled;
    let theta_dot: Vec<f64> = theta_dot.iter().copied().collect();
    ensure_finite(&theta_dot, "parameter velocity")?;
    Ok(Solution {
        theta_dot,
        spectrum,
        rank,
        stationary: false,
    })
}

/// `r = mean_i |p_i ∂_t log p_i − Σ_k p_i O_ik θ̇_k|²`.
pub fn residual(system: &TdvpSystem, theta_dot: &[f64], p_values: &[f64]) -> Result<ResidualReport> {
    let n = system.n_samples();
    ensure_dim(system.n_params(), theta_dot.len())?;
    ensure_dim(n, p_values.len())?;
    let predicted = &system.o * DVector::from_column_slice(theta_dot);
    let mut r = 0.0;
    let mut norm = 0.0;
    for i in 0..n {
        let exact = p_values[i] * system.dt_log[i];
        let diff = exact - p_values[i] * predicted[i];
        r += diff * diff;
        norm += exact * exact;
    }
    r /= n as f64;
    norm /= n as f64;
    let r_normalized = if norm > 0.0 {
        r / norm
    } else if r == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ResidualReport { r, r_normalized })
}

/// Per-sample quantities evaluated on a batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub o: DMatrix<f64>,
    pub dt_log: Vec<f64>,
    pub log_prob: Vec<f64>,
}

impl Batch {
    pub fn p_values(&self) -> Vec<f64> {
        self.log_prob.iter().map(|v| v.exp()).collect()
    }
}

/// Evaluates `log p`, `O` and `∂_t log p` at every sample.
pub fn evaluate_batch(
    model: &DensityModel,
    problem: &FokkerPlanckProblem,
    t: f64,
    samples: &ParticleEnsemble,
) -> Result<Batch> {
    ensure_dim(problem.dim(), model.dim())?;
    ensure_dim(model.dim(), samples.dim())?;
    let rows: Vec<(f64, Vec<f64>, f64)> = samples
        .as_flat()
        .par_chunks(samples.dim())
        .map(|x| {
            let (lp, o) = diff::param_grad_with_value(model, x)?;
            let (_, g, h) = diff::spatial_with_value(model, x)?;
            let dt = problem.dt_log_from_derivatives(x, t, &g, &h);
            if !dt.is_finite() {
                return Err(Error::NonFinite("time derivative of log density"));
            }
            Ok((lp, o, dt))
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    let k = model.param_count();
    let mut o = DMatrix::zeros(n, k);
    let mut dt_log = Vec::with_capacity(n);
    let mut log_prob = Vec::with_capacity(n);
    for (i, (lp, oi, dt)) in rows.into_iter().enumerate() {
        for (c, v) in oi.into_iter().enumerate() {
            o[(i, c)] = v;
        }
        dt_log.push(dt);
        log_prob.push(lp);
    }
    Ok(Batch { o, dt_log, log_prob })
}

/// θ̇ at one state, with its diagnostics.
#[derive(Debug, Clone)]
pub struct Velocity {
    pub theta_dot: Vec<f64>,
    pub residual: ResidualReport,
    pub spectrum: Vec<f64>,
    pub rank: usize,
    pub stationary: bool,
}

/// Samples-in, velocity-out: evaluate, assemble, solve and score.
pub fn velocity(
    model: &DensityModel,
    problem: &FokkerPlanckProblem,
    t: f64,
    samples: &ParticleEnsemble,
    policy: &RegularizationPolicy,
) -> Result<Velocity> {
    let batch = evaluate_batch(model, problem, t, samples)?;
    let p = batch.p_values();
    let system = assemble(batch.o, batch.dt_log, None)?;
    let sol = solve(&system, policy)?;
    let residual = residual(&system, &sol.theta_dot, &p)?;
    Ok(Velocity {
        theta_dot: sol.theta_dot,
        residual,
        spectrum: sol.spectrum,
        rank: sol.rank,
        stationary: sol.stationary,
    })
}

/// Appends one `t,index,eigenvalue` row per spectrum entry.
pub fn write_spectrum_csv<W: Write>(out: &mut W, t: f64, spectrum: &[f64]) -> std::io::Result<()> {
    for (i, v) in spectrum.iter().enumerate() {
        writeln!(out, "{t:.17e},{i},{v:.17e}")?;
    }
    Ok(())
}
