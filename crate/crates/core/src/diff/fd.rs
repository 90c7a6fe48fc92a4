//! Central finite-difference oracles built only on [`DensityModel::log_prob`]
//! and [`DensityModel::forward`].

use nalgebra::DMatrix;

use crate::error::Result;
use crate::flow::DensityModel;

/// Default parameter step.
pub const PARAM_STEP: f64 = 1e-6;
/// Default spatial step.
pub const SPATIAL_STEP: f64 = 1e-4;

pub fn param_grad(model: &DensityModel, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let theta = model.params().values().to_vec();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let mut t = theta.clone();
        t[k] = theta[k] + step;
        probe.set_params(&t)?;
        let up = probe.log_prob(x)?;
        t[k] = theta[k] - step;
        probe.set_params(&t)?;
        let down = probe.log_prob(x)?;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

pub fn spatial_grad(model: &DensityModel, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut y = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        y[i] = x[i] + step;
        let up = model.log_prob(&y)?;
        y[i] = x[i] - step;
        let down = model.log_prob(&y)?;
        y[i] = x[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Hessian by second central differences of `log_prob`, row-major.
pub fn spatial_hessian(model: &DensityModel, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let d = x.len();
    let f0 = model.log_prob(x)?;
    let mut y = x.to_vec();
    let mut h = vec![0.0; d * d];
    for i in 0..d {
        y[i] = x[i] + step;
        let fp = model.log_prob(&y)?;
        y[i] = x[i] - step;
        let fm = model.log_prob(&y)?;
        y[i] = x[i];
        h[i * d + i] = (fp - 2.0 * f0 + fm) / (step * step);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                y[i] = x[i] + si * step;
                y[j] = x[j] + sj * step;
                let v = model.log_prob(&y);
                y[i] = x[i];
                y[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0)? - eval(1.0, -1.0)? - eval(-1.0, 1.0)? + eval(-1.0, -1.0)?)
                / (4.0 * step * step);
            h[i * d + j] = v;
            h[j * d + i] = v;
        }
    }
    Ok(h)
}

/// `log|det ∂f/∂z|` of the forward map from a finite-differenced Jacobian.
pub fn forward_logdet(model: &DensityModel, z: &[f64], step: f64) -> Result<f64> {
    let d = z.len();
    let mut jac = DMatrix::<f64>::zeros(d, d);
    let mut y = z.to_vec();
    for j in 0..d {
        y[j] = z[j] + step;
        let up = model.forward(&y)?.0;
        y[j] = z[j] - step;
        let down = model.forward(&y)?.0;
        y[j] = z[j];
        for i in 0..d {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    Ok(jac.determinant().abs().ln())
}

/// Relative agreement `|a − b| ≤ rel·|b| + abs` for every component.
pub fn agrees(a: &[f64], b: &[f64], rel: f64, abs: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * y.abs() + abs)
}
