//! Exact derivatives of `log p_θ(x)`.
//!
//! Parameter gradients (the variational derivatives `O_k`) come from a reverse
//! sweep through the cached inverse pass. Spatial gradients and Hessians are
//! propagated forward through the same inverse pass as second-order jets.
//! [`fd`] holds central-difference oracles used to check both.

pub mod fd;
mod jets;

use self::jets::{neg_exp_jet, net_jets, Jets};
use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::flow::DensityModel;

/// All derivatives of `log p_θ` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDerivatives {
    pub log_prob: f64,
    /// `O_k = ∂ log p / ∂θ_k`, length K.
    pub o: Vec<f64>,
    /// `∂ log p / ∂x_i`, length d.
    pub grad_x: Vec<f64>,
    /// `∂² log p / ∂x_i ∂x_j`, row-major d × d.
    pub hess_x: Vec<f64>,
}

/// `log p_θ(x)` and its parameter gradient.
pub fn param_grad_with_value(model: &DensityModel, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    ensure_dim(model.dim(), x.len())?;
    ensure_finite(x, "evaluation point")?;
    let p = model.params().values();
    let nets = model.nets();
    let mut z = x.to_vec();
    let mut logdet = 0.0;
    let mut caches = Vec::with_capacity(nets.len());
    for block in nets.iter().rev() {
        let (ld, cache) = block.inverse(p, &mut z);
        logdet += ld;
        caches.push(cache);
    }
    caches.reverse();
    let latent = model.latent();
    let eval = latent.eval(&z);
    let mut grad = vec![0.0; p.len()];
    latent.param_grad(&eval, &mut grad[..model.latent_spec().param_count()]);
    let mut adj = latent.grad_z(&eval);
    for (block, cache) in nets.iter().zip(&caches) {
        block.inverse_backward(p, cache, &mut adj, &mut grad);
    }
    let value = eval.log_prob + logdet;
    if !value.is_finite() {
        return Err(Error::NonFinite("log density"));
    }
    ensure_finite(&grad, "parameter gradient")?;
    Ok((value, grad))
}

/// The variational derivatives `O_k(x) = ∂_{θ_k} log p_θ(x)`.
pub fn param_grad_log_prob(model: &DensityModel, x: &[f64]) -> Result<Vec<f64>> {
    param_grad_with_value(model, x).map(|(_, g)| g)
}

/// `log p`, `∇_x log p` and `∇²_x log p` (row-major).
pub fn spatial_with_value(model: &DensityModel, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let d = model.dim();
    ensure_dim(d, x.len())?;
    ensure_finite(x, "evaluation point")?;
    let p = model.params().values();
    let mut state = Jets::identity(x);
    let mut logdet = Jets::zeros(1, d);
    for block in model.nets().iter().rev() {
        let v1 = state.gather(&block.part_a);
        let v2 = state.gather(&block.part_b);
        let s1 = net_jets(&block.s1, p, &v1);
        let shifted2 = match &block.t1 {
            Some(t1) => v2.sub(&net_jets(t1, p, &v1)),
            None => v2,
        };
        let u2 = shifted2.mul(&s1.map(neg_exp_jet));
        let s2 = net_jets(&block.s2, p, &u2);
        let shifted1 = match &block.t2 {
            Some(t2) => v1.sub(&net_jets(t2, p, &u2)),
            None => v1,
        };
        let u1 = shifted1.mul(&s2.map(neg_exp_jet));
        s1.accumulate_sum(-1.0, &mut logdet);
        s2.accumulate_sum(-1.0, &mut logdet);
        state.scatter(&block.part_a, &u1);
        state.scatter(&block.part_b, &u2);
    }

    let latent = model.latent();
    let eval = latent.eval(&state.val);
    let gz = latent.grad_z(&eval);
    let hz = latent.hess_z(&eval);
    // J[a][i] = ∂z_a/∂x_i
    let jac = &state.grad;
    let mut grad = logdet.grad.clone();
    for a in 0..d {
        for i in 0..d {
            grad[i] += jac[a * d + i] * gz[a];
        }
    }
    let mut hess = logdet.hess.clone();
    // Jᵀ H_z J
    let mut hj = vec![0.0; d * d];
    for a in 0..d {
        for i in 0..d {
            let mut acc = 0.0;
            for b in 0..d {
                acc += hz[a * d + b] * jac[b * d + i];
            }
            hj[a * d + i] = acc;
        }
    }
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for a in 0..d {
                acc += jac[a * d + i] * hj[a * d + j];
            }
            hess[i * d + j] += acc;
        }
    }
    for (a, &g) in gz.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (h, s) in hess.iter_mut().zip(state.hess_of(a)) {
            *h += g * s;
        }
    }
    for i in 0..d {
        for j in 0..i {
            let m = 0.5 * (hess[i * d + j] + hess[j * d + i]);
            hess[i * d + j] = m;
            hess[j * d + i] = m;
        }
    }
    let value = eval.log_prob + logdet.val[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("log density"));
    }
    ensure_finite(&grad, "spatial gradient")?;
    ensure_finite(&hess, "spatial Hessian")?;
    Ok((value, grad, hess))
}

/// `(∇_x log p, ∇²_x log p)` at `x`.
pub fn spatial_derivatives(model: &DensityModel, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    spatial_with_value(model, x).map(|(_, g, h)| (g, h))
}

pub fn log_derivatives(model: &DensityModel, x: &[f64]) -> Result<LogDerivatives> {
    let (log_prob, o) = param_grad_with_value(model, x)?;
    let (_, grad_x, hess_x) = spatial_with_value(model, x)?;
    Ok(LogDerivatives {
        log_prob,
        o,
        grad_x,
        hess_x,
    })
}
