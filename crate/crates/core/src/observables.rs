//! Monte-Carlo estimators computed from a density model.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::ensemble::ParticleEnsemble;
use crate::error::{ensure_dim, Error, Result};
use crate::flow::DensityModel;

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    /// Whether `target` lies within `k` standard errors (or `floor`, whichever is larger).
    pub fn covers(&self, target: f64, k: f64, floor: f64) -> bool {
        (self.value - target).abs() <= (k * self.std_error).max(floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservableKind {
    Entropy,
    Moments,
    BallProbability { r: f64, center: Option<Vec<f64>> },
    Nu,
}

fn mean_and_se(values: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Estimate {
        value: mean,
        std_error: (var / n).sqrt(),
    }
}

fn require_samples(n: usize) -> Result<()> {
    if n < 2 {
        Err(Error::Precondition("at least two samples are required".into()))
    } else {
        Ok(())
    }
}

/// `S = −⟨log p⟩` over `n` model samples.
pub fn mc_entropy<R: Rng + ?Sized>(model: &DensityModel, n: usize, rng: &mut R) -> Result<Estimate> {
    require_samples(n)?;
    entropy_of_samples(model, &model.sample(n, rng)?)
}

/// `−⟨log p⟩` over samples already drawn from `model`.
pub fn entropy_of_samples(model: &DensityModel, samples: &ParticleEnsemble) -> Result<Estimate> {
    ensure_dim(model.dim(), samples.dim())?;
    require_samples(samples.len())?;
    let lp = samples
        .as_flat()
        .par_chunks(model.dim())
        .map(|x| model.log_prob(x))
        .collect::<Result<Vec<f64>>>()?;
    let e = mean_and_se(&lp);
    Ok(Estimate {
        value: -e.value,
        std_error: e.std_error,
    })
}

/// Per-coordinate sample statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// Unbiased sample variance.
    pub variance: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub variance_se: Vec<f64>,
}

pub fn ensemble_moments(ensemble: &ParticleEnsemble) -> Result<Moments> {
    let n = ensemble.len();
    require_samples(n)?;
    let d = ensemble.dim();
    let nf = n as f64;
    let mut mean = vec![0.0; d];
    for x in ensemble.iter() {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut m2 = vec![0.0; d];
    let mut m4 = vec![0.0; d];
    for x in ensemble.iter() {
        for k in 0..d {
            let c = x[k] - mean[k];
            let c2 = c * c;
            m2[k] += c2;
            m4[k] += c2 * c2;
        }
    }
    let mut variance = Vec::with_capacity(d);
    let mut mean_se = Vec::with_capacity(d);
    let mut variance_se = Vec::with_capacity(d);
    for k in 0..d {
        let s2 = m2[k] / (nf - 1.0);
        let mu4 = m4[k] / nf;
        variance.push(s2);
        mean_se.push((s2 / nf).sqrt());
        // Var(s²) ≈ (μ₄ − (n−3)/(n−1) σ⁴) / n
        let v = (mu4 - (nf - 3.0) / (nf - 1.0) * s2 * s2) / nf;
        variance_se.push(v.max(0.0).sqrt());
    }
    Ok(Moments {
        mean,
        variance,
        mean_se,
        variance_se,
    })
}

pub fn mc_moments<R: Rng + ?Sized>(model: &DensityModel, n: usize, rng: &mut R) -> Result<Moments> {
    require_samples(n)?;
    ensemble_moments(&model.sample(n, rng)?)
}

/// `V_d(r) = π^{d/2} r^d / Γ(d/2 + 1)`.
pub fn ball_volume(d: usize, r: f64) -> f64 {
    let h = 0.5 * d as f64;
    (h * PI.ln() + d as f64 * r.ln() - ln_gamma(h + 1.0)).exp()
}

fn unit_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-300 {
            return g.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// `P(|x − center| ≤ r)` by averaging the density over points drawn
/// uniformly in the ball.
///
/// With `shells = Some(s)`, the ball is cut into `s` shells of equal radial
/// width, each sampled uniformly with `n / s` points and weighted by its
/// volume.
pub fn ball_probability<R: Rng + ?Sized>(
    model: &DensityModel,
    r: f64,
    center: &[f64],
    n: usize,
    shells: Option<usize>,
    rng: &mut R,
) -> Result<Estimate> {
    let d = model.dim();
    ensure_dim(d, center.len())?;
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Precondition("radius must be positive".into()));
    }
    let s = shells.unwrap_or(1).max(1);
    let per = n / s;
    if per < 2 {
        return Err(Error::Precondition("need at least two samples per shell".into()));
    }
    let df = d as f64;
    let mut value = 0.0;
    let mut var = 0.0;
    for k in 0..s {
        let lo = r * k as f64 / s as f64;
        let hi = r * (k + 1) as f64 / s as f64;
        let (lo_d, hi_d) = (lo.powf(df), hi.powf(df));
        let mut points = Vec::with_capacity(per * d);
        for _ in 0..per {
            let u: f64 = rng.random();
            let radius = (lo_d + u * (hi_d - lo_d)).powf(1.0 / df);
            let dir = unit_direction(d, rng);
            points.extend(dir.iter().zip(center).map(|(a, c)| c + radius * a));
        }
        let dens = points
            .par_chunks(d)
            .map(|x| model.log_prob(x).map(f64::exp))
            .collect::<Result<Vec<f64>>>()?;
        let vol = ball_volume(d, hi) - if k == 0 { 0.0 } else { ball_volume(d, lo) };
        let e = mean_and_se(&dens);
        value += vol * e.value;
        var += (vol * e.std_error).powi(2);
    }
    Ok(Estimate {
        value,
        std_error: var.sqrt(),
    })
}

/// Current Student-t degrees of freedom.
pub fn nu_observer(model: &DensityModel) -> Result<f64> {
    model
        .nu()
        .ok_or(Error::NotApplicable("degrees of freedom exist only for a Student-t latent"))
}

/// `∫ p dx` estimated as `E_q[p/q]`, with `q` the multivariate Cauchy
/// density centred at `center` with scale `sigma`.
///
/// The proposal's tails dominate both latent families, so the weights have
/// finite variance for any Student-t model with `ν > 1/2`.
pub fn importance_normalization<R: Rng + ?Sized>(
    model: &DensityModel,
    center: &[f64],
    sigma: f64,
    n: usize,
    rng: &mut R,
) -> Result<Estimate> {
    let d = model.dim();
    ensure_dim(d, center.len())?;
    require_samples(n)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Precondition("proposal width must be positive".into()));
    }
    let half = 0.5 * (d as f64 + 1.0);
    let log_norm = ln_gamma(half) - ln_gamma(0.5) - 0.5 * d as f64 * PI.ln() - d as f64 * sigma.ln();
    let mut points = Vec::with_capacity(n * d);
    let mut log_q = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = rng.sample::<f64, _>(StandardNormal).abs();
        let mut u2 = 0.0;
        for c in center {
            let u = rng.sample::<f64, _>(StandardNormal) / w;
            u2 += u * u;
            points.push(c + sigma * u);
        }
        log_q.push(log_norm - half * u2.ln_1p());
    }
    let w = points
        .par_chunks(d)
        .zip(log_q.par_iter())
        .map(|(x, lq)| model.log_prob(x).map(|lp| (lp - lq).exp()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_se(&w))
}
