//! Isotropic heat equation in `d` dimensions reduced to the radius,
//! `∂_t p = D (∂_r² p + (d−1)/r ∂_r p)`.
//!
//! Nodes sit at `r_i = iδ`, `i = 0..=M`. Away from the origin the operator is
//! written in flux form `r^{1−d} ∂_r (r^{d−1} ∂_r p)` over shell cells
//! `[r_{i−½}, r_{i+½}]`, which conserves the discrete mass exactly. On the
//! first `lhopital_cells` nodes the singular term is replaced by its limit,
//! giving `d ∂_r² p` with the mirror condition `p_{−1} = p_1`. The outer
//! boundary is closed (zero flux).

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Upper bound on `r_max / δ`.
pub const MAX_INTERVALS: usize = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadialScheme {
    ExplicitEuler,
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadialGridConfig {
    pub delta: f64,
    pub r_max: f64,
    pub lhopital_cells: usize,
    pub scheme: RadialScheme,
    pub dt_grid: f64,
}

impl Default for RadialGridConfig {
    fn default() -> Self {
        Self {
            delta: 4e-3,
            r_max: 100.0,
            lhopital_cells: 10,
            scheme: RadialScheme::CrankNicolson,
            dt_grid: 1e-3,
        }
    }
}

impl RadialGridConfig {
    /// Number of intervals `M = r_max / δ`.
    pub fn intervals(&self) -> Result<usize> {
        if !(self.delta > 0.0 && self.delta.is_finite() && self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(Error::Precondition("delta and r_max must be positive".into()));
        }
        let m = self.r_max / self.delta;
        let rounded = m.round();
        if (m - rounded).abs() > 1e-6 * m.max(1.0) || rounded < 2.0 {
            return Err(Error::Precondition("r_max must be an integral multiple (>= 2) of delta".into()));
        }
        if rounded > MAX_INTERVALS as f64 {
            return Err(Error::Precondition(format!("grid exceeds {MAX_INTERVALS} intervals")));
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.intervals()?;
        if self.lhopital_cells == 0 || self.lhopital_cells > m {
            return Err(Error::Precondition("lhopital_cells must be in 1..=M".into()));
        }
        if !(self.dt_grid > 0.0 && self.dt_grid.is_finite()) {
            return Err(Error::Precondition("dt_grid must be positive".into()));
        }
        Ok(())
    }
}

/// Surface area of the unit sphere in `d` dimensions, `2π^{d/2}/Γ(d/2)`.
pub fn sphere_area(d: usize) -> f64 {
    let h = 0.5 * d as f64;
    (2f64.ln() + h * PI.ln() - ln_gamma(h)).exp()
}

/// Radial density values on the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile {
    pub d: usize,
    pub delta: f64,
    pub r_max: f64,
    pub t: f64,
    pub p: Vec<f64>,
}

/// Shell weights `w_i = (r_{i+½}^d − r_{i−½}^d) / (d δ)` so that
/// `Ω δ Σ w_i f(r_i)` approximates `∫ f dx` for radial `f`.
fn shell_weights(d: usize, delta: f64, m: usize) -> Vec<f64> {
    let df = d as i32;
    (0..=m)
        .map(|i| {
            let lo = if i == 0 { 0.0 } else { (i as f64 - 0.5) * delta };
            let hi = if i == m { m as f64 * delta } else { (i as f64 + 0.5) * delta };
            (hi.powi(df) - lo.powi(df)) / (d as f64 * delta)
        })
        .collect()
}

impl RadialProfile {
    /// Samples `f(r)` on the nodes of `config`'s grid.
    pub fn from_fn(d: usize, config: &RadialGridConfig, f: impl Fn(f64) -> f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::Precondition("dimension must be positive".into()));
        }
        let m = config.intervals()?;
        let p: Vec<f64> = (0..=m).map(|i| f(i as f64 * config.delta)).collect();
        let profile = Self {
            d,
            delta: config.delta,
            r_max: config.r_max,
            t: 0.0,
            p,
        };
        profile.check_values()?;
        Ok(profile)
    }

    /// Isotropic Gaussian with per-coordinate variance `var`.
    pub fn gaussian(d: usize, var: f64, config: &RadialGridConfig) -> Result<Self> {
        let norm = -0.5 * d as f64 * (2.0 * PI * var).ln();
        Self::from_fn(d, config, |r| (norm - 0.5 * r * r / var).exp())
    }

    /// Multivariate Student-t with identity scale matrix.
    pub fn student_t(d: usize, nu: f64, config: &RadialGridConfig) -> Result<Self> {
        let df = d as f64;
        let norm = ln_gamma(0.5 * (nu + df)) - ln_gamma(0.5 * nu) - 0.5 * df * (nu * PI).ln();
        Self::from_fn(d, config, |r| (norm - 0.5 * (nu + df) * (r * r / nu).ln_1p()).exp())
    }

    fn check_values(&self) -> Result<()> {
        if self.p.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Profile("values must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn intervals(&self) -> usize {
        self.p.len() - 1
    }

    fn weights(&self) -> Vec<f64> {
        shell_weights(self.d, self.delta, self.intervals())
    }

    /// `∫ p dx` by shell quadrature.
    pub fn mass(&self) -> f64 {
        let w = self.weights();
        sphere_area(self.d) * self.delta * self.p.iter().zip(&w).map(|(p, w)| p * w).sum::<f64>()
    }

    /// `−∫ p ln p dx`, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        let w = self.weights();
        let s: f64 = self
            .p
            .iter()
            .zip(&w)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, w)| w * p * p.ln())
            .sum();
        -sphere_area(self.d) * self.delta * s
    }

    /// Text snapshot: four header lines then one value per node.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::with_capacity(24 * self.p.len() + 64);
        writeln!(out, "d {}", self.d).unwrap();
        writeln!(out, "delta {:e}", self.delta).unwrap();
        writeln!(out, "r_max {:e}", self.r_max).unwrap();
        writeln!(out, "t {:e}", self.t).unwrap();
        for v in &self.p {
            writeln!(out, "{v:e}").unwrap();
        }
        out
    }

    pub fn parse_snapshot(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Profile(m.to_string());
        let mut lines = text.lines();
        let mut field = |key: &str| -> Result<&str> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| bad("header lines are `key value`"))?;
            if k != key {
                return Err(Error::Profile(format!("expected `{key}`, found `{k}`")));
            }
            Ok(v.trim())
        };
        let d: usize = field("d")?.parse().map_err(|_| bad("d is not an integer"))?;
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Profile(format!("{what} is not a finite number")))
        };
        let delta = parse_f(field("delta")?, "delta")?;
        let r_max = parse_f(field("r_max")?, "r_max")?;
        let t = parse_f(field("t")?, "t")?;
        if d == 0 {
            return Err(bad("d must be positive"));
        }
        let grid = RadialGridConfig {
            delta,
            r_max,
            ..Default::default()
        };
        let m = grid.intervals().map_err(|e| Error::Profile(e.to_string()))?;
        let mut p = Vec::with_capacity(m.min(1 << 20) + 1);
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if p.len() > m {
                return Err(bad("more values than grid nodes"));
            }
            p.push(parse_f(line.trim(), "value")?);
        }
        if p.len() != m + 1 {
            return Err(Error::Profile(format!("expected {} values, found {}", m + 1, p.len())));
        }
        let profile = Self { d, delta, r_max, t, p };
        profile.check_values()?;
        Ok(profile)
    }
}

/// Tridiagonal operator `L` with `(L p)_i = lower_i p_{i−1} + diag_i p_i + upper_i p_{i+1}`.
struct Operator {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

fn operator(d: usize, delta: f64, m: usize, lhopital: usize) -> Operator {
    let n = m + 1;
    let w = shell_weights(d, delta, m);
    let h2 = delta * delta;
    let face = |i: usize| ((i as f64 + 0.5) * delta).powi(d as i32 - 1);
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let df = d as f64;
    for i in 0..n {
        if i < lhopital.min(m) {
            let c = df / h2;
            if i == 0 {
                diag[i] = -2.0 * c;
                upper[i] = 2.0 * c;
            } else {
                lower[i] = c;
                diag[i] = -2.0 * c;
                upper[i] = c;
            }
        } else {
            let vol = w[i] * delta;
            let left = face(i - 1) / (delta * vol);
            let right = if i == m { 0.0 } else { face(i) / (delta * vol) };
            lower[i] = left;
            diag[i] = -(left + right);
            upper[i] = right;
        }
    }
    Operator { lower, diag, upper }
}

/// Largest stable explicit step: the Gershgorin bound `2 / max_i (|diag_i| + |off_i|)`.
pub fn explicit_stability_limit(d: usize, config: &RadialGridConfig, diffusion: f64) -> Result<f64> {
    let m = config.intervals()?;
    let op = operator(d, config.delta, m, config.lhopital_cells);
    let worst = (0..=m)
        .map(|i| op.diag[i].abs() + op.lower[i].abs() + op.upper[i].abs())
        .fold(0.0f64, f64::max);
    Ok(if diffusion == 0.0 { f64::INFINITY } else { 2.0 / (diffusion * worst) })
}

/// Solves a tridiagonal system in place (Thomas algorithm); `rhs` becomes the solution.
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut b = diag[0];
    c[0] = upper[0] / b;
    rhs[0] /= b;
    for i in 1..n {
        b = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / b;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / b;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Advances `profile` to `t_end` with diffusion constant `diffusion`.
pub fn radial_heat_evolve(
    profile: &RadialProfile,
    diffusion: f64,
    config: &RadialGridConfig,
    t_end: f64,
) -> Result<RadialProfile> {
    config.validate()?;
    if (config.delta - profile.delta).abs() > 1e-15 * config.delta
        || (config.r_max - profile.r_max).abs() > 1e-12 * config.r_max
    {
        return Err(Error::Precondition("profile grid does not match configuration".into()));
    }
    if !(diffusion >= 0.0 && diffusion.is_finite()) {
        return Err(Error::Precondition("diffusion constant must be non-negative".into()));
    }
    if !(t_end >= profile.t && t_end.is_finite()) {
        return Err(Error::Precondition("t_end must not precede the profile time".into()));
    }
    let mass = profile.mass();
    if (mass - 1.0).abs() > 1e-2 {
        return Err(Error::Precondition(format!("profile is not normalized (mass {mass})")));
    }
    let m = profile.intervals();
    let mut out = profile.clone();
    let span = t_end - profile.t;
    if diffusion == 0.0 || span == 0.0 {
        out.t = t_end;
        return Ok(out);
    }
    if config.scheme == RadialScheme::ExplicitEuler {
        let limit = explicit_stability_limit(profile.d, config, diffusion)?;
        if config.dt_grid > limit {
            return Err(Error::Unstable { required_dt: limit });
        }
    }
    let op = operator(profile.d, config.delta, m, config.lhopital_cells);
    let steps = (span / config.dt_grid - 1e-9).ceil().max(1.0) as usize;
    let h = span / steps as f64;
    let a = diffusion * h;
    let n = m + 1;
    let apply = |p: &[f64], i: usize| {
        let mut v = op.diag[i] * p[i];
        if i > 0 {
            v += op.lower[i] * p[i - 1];
        }
        if i + 1 < n {
            v += op.upper[i] * p[i + 1];
        }
        v
    };
    match config.scheme {
        RadialScheme::ExplicitEuler => {
            let mut next = vec![0.0; n];
            for _ in 0..steps {
                for (i, v) in next.iter_mut().enumerate() {
                    *v = out.p[i] + a * apply(&out.p, i);
                }
                std::mem::swap(&mut out.p, &mut next);
            }
        }
        RadialScheme::CrankNicolson => {
            let lower: Vec<f64> = op.lower.iter().map(|v| -0.5 * a * v).collect();
            let diag: Vec<f64> = op.diag.iter().map(|v| 1.0 - 0.5 * a * v).collect();
            let upper: Vec<f64> = op.upper.iter().map(|v| -0.5 * a * v).collect();
            let mut rhs = vec![0.0; n];
            for _ in 0..steps {
                for (i, v) in rhs.iter_mut().enumerate() {
                    *v = out.p[i] + 0.5 * a * apply(&out.p, i);
                }
                thomas(&lower, &diag, &upper, &mut rhs);
                std::mem::swap(&mut out.p, &mut rhs);
            }
        }
    }
    for v in &mut out.p {
        // round-off below zero in the far tail
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out.t = t_end;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(delta: f64, r_max: f64, scheme: RadialScheme, dt: f64) -> RadialGridConfig {
        RadialGridConfig {
            delta,
            r_max,
            lhopital_cells: 10,
            scheme,
            dt_grid: dt,
        }
    }

    fn gaussian_entropy(d: usize, var: f64) -> f64 {
        0.5 * d as f64 * (1.0 + (2.0 * PI * var).ln())
    }

    #[test]
    fn sphere_areas() {
        assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-12);
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-12);
        assert!((sphere_area(8) - PI.powi(4) / 3.0).abs() < 1e-10);
    }

    #[test]
    fn gaussian_quadrature() {
        let cfg = RadialGridConfig::default();
        let p = RadialProfile::gaussian(8, 1.0, &cfg).unwrap();
        // node-value quadrature is second order in δ
        assert!((p.mass() - 1.0).abs() < 1e-5);
        assert!((p.entropy() - 11.3515).abs() < 1e-3);
        assert!((p.entropy() - gaussian_entropy(8, 1.0)).abs() < 1e-4);
    }

    #[test]
    fn gaussian_profile_spreads_like_heat_kernel() {
        for scheme in [RadialScheme::CrankNicolson, RadialScheme::ExplicitEuler] {
            let dt = if scheme == RadialScheme::ExplicitEuler { 2e-5 } else { 1e-3 };
            let cfg = grid(0.02, 20.0, scheme, dt);
            let p0 = RadialProfile::gaussian(8, 1.0, &cfg).unwrap();
            let p1 = radial_heat_evolve(&p0, 1.0, &cfg, 0.5).unwrap();
            let exact = RadialProfile::gaussian(8, 2.0, &cfg).unwrap();
            let peak = exact.p.iter().cloned().fold(0.0, f64::max);
            let mut worst: f64 = 0.0;
            for (a, b) in p1.p.iter().zip(&exact.p) {
                if *b > 1e-3 * peak {
                    worst = worst.max((a - b).abs() / b);
                }
            }
            assert!(worst < 1e-3, "{scheme:?}: {worst}");
            assert!((p1.mass() - p0.mass()).abs() < 1e-6);
            let gain = p1.entropy() - p0.entropy();
            assert!((gain - 4.0 * 2f64.ln()).abs() < 1e-3, "{gain}");
        }
    }

    #[test]
    fn zero_diffusion_is_identity() {
        let cfg = grid(0.05, 10.0, RadialScheme::CrankNicolson, 0.01);
        let p0 = RadialProfile::gaussian(3, 1.0, &cfg).unwrap();
        let p1 = radial_heat_evolve(&p0, 0.0, &cfg, 1.0).unwrap();
        assert_eq!(p1.p, p0.p);
        assert_eq!(p1.t, 1.0);
    }

    #[test]
    fn explicit_scheme_refuses_unstable_step() {
        let cfg = grid(0.01, 10.0, RadialScheme::ExplicitEuler, 1e-3);
        let p0 = RadialProfile::gaussian(8, 1.0, &cfg).unwrap();
        let limit = explicit_stability_limit(8, &cfg, 1.0).unwrap();
        assert!((limit - 1e-4 / 16.0).abs() < 1e-12);
        match radial_heat_evolve(&p0, 1.0, &cfg, 0.1) {
            Err(Error::Unstable { required_dt }) => assert_eq!(required_dt, limit),
            other => panic!("expected instability error, got {other:?}"),
        }
    }

    #[test]
    fn student_t_profile_is_normalized() {
        let cfg = grid(0.01, 100.0, RadialScheme::CrankNicolson, 1e-3);
        let p = RadialProfile::student_t(8, 2.0, &cfg).unwrap();
        // tail beyond r_max carries about 8e-4 of the mass
        assert!((p.mass() - 1.0).abs() < 2e-3, "{}", p.mass());
        assert!(p.mass() < 1.0);
    }

    #[test]
    fn snapshot_round_trip_and_rejections() {
        let cfg = grid(0.5, 5.0, RadialScheme::CrankNicolson, 1e-2);
        let mut p = RadialProfile::gaussian(4, 1.0, &cfg).unwrap();
        p.t = 0.25;
        let text = p.to_snapshot();
        assert!(text.starts_with("d 4\ndelta 5e-1\nr_max 5e0\nt 2.5e-1\n"));
        assert_eq!(RadialProfile::parse_snapshot(&text).unwrap(), p);

        let drop_last = text.trim_end().rsplit_once('\n').unwrap().0.to_string();
        assert!(RadialProfile::parse_snapshot(&drop_last).is_err());
        assert!(RadialProfile::parse_snapshot(&format!("{text}1.0\n")).is_err());
        assert!(RadialProfile::parse_snapshot(&text.replace("d 4", "d 0")).is_err());
        assert!(RadialProfile::parse_snapshot(&text.replace("delta", "dx")).is_err());
        assert!(RadialProfile::parse_snapshot(&text.replace("r_max 5e0", "r_max 5.2e0")).is_err());
        assert!(RadialProfile::parse_snapshot(&format!("{drop_last}\n-1\n")).is_err());
        assert!(RadialProfile::parse_snapshot("").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RadialGridConfig::default().validate().is_ok());
        assert!(grid(0.3, 1.0, RadialScheme::CrankNicolson, 0.1).validate().is_err());
        assert!(grid(1e-300, 1.0, RadialScheme::CrankNicolson, 0.1).intervals().is_err());
        assert!(RadialGridConfig {
            lhopital_cells: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
