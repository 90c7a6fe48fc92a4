//! Explicit time stepping of the flow parameters.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{ensure_dim, Error, Result};
use crate::flow::{checkpoint, DensityModel};
use crate::pde::FokkerPlanckProblem;
use crate::tdvp::{self, RegularizationPolicy, ResidualReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Heun,
}

/// Step-doubling control: a full step is compared with two half steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    /// Tolerance on `max|θ_full − θ_half| / (1 + max|θ|)`.
    pub tolerance: f64,
    pub dt_min: f64,
    pub dt_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub adaptive: Option<AdaptiveConfig>,
    /// Reuse the predictor's latent draws in the corrector stage.
    pub shared_samples: bool,
    pub regularization: RegularizationPolicy,
    /// Observers fire every this many accepted steps (and at the end).
    pub output_every: usize,
    /// Checkpoint cadence in accepted steps; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Heun,
            dt: 1e-3,
            t_end: 1.0,
            n_samples: 10_000,
            seed: 0,
            adaptive: None,
            shared_samples: false,
            regularization: RegularizationPolicy::default(),
            output_every: 1,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Precondition(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail("dt must be positive");
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return fail("t_end must be non-negative");
        }
        if self.n_samples < 2 {
            return fail("n_samples must be at least 2");
        }
        if self.output_every == 0 {
            return fail("output_every must be at least 1");
        }
        if let Some(a) = &self.adaptive {
            if !(a.tolerance > 0.0 && a.dt_min > 0.0 && a.dt_min <= a.dt_max) {
                return fail("adaptive control needs tolerance > 0 and 0 < dt_min <= dt_max");
            }
        }
        self.regularization.validate()
    }
}

/// One evaluation of θ̇ with optional diagnostics.
#[derive(Debug, Clone)]
pub struct StageEval {
    pub theta_dot: Vec<f64>,
    pub residual: Option<ResidualReport>,
    pub spectrum: Vec<f64>,
    pub rank: usize,
    pub stationary: bool,
}

impl StageEval {
    pub fn plain(theta_dot: Vec<f64>) -> Self {
        Self {
            theta_dot,
            residual: None,
            spectrum: Vec::new(),
            rank: 0,
            stationary: false,
        }
    }
}

/// Source of θ̇(θ, t).
pub trait ThetaVelocity {
    fn velocity(&mut self, theta: &[f64], t: f64) -> Result<StageEval>;

    /// Called once before the stages of each step.
    fn begin_step(&mut self) {}
}

/// Adapts a plain function `θ̇ = f(θ, t)`.
pub struct FnVelocity<F>(pub F);

impl<F: FnMut(&[f64], f64) -> Vec<f64>> ThetaVelocity for FnVelocity<F> {
    fn velocity(&mut self, theta: &[f64], t: f64) -> Result<StageEval> {
        Ok(StageEval::plain((self.0)(theta, t)))
    }
}

/// θ̇ from the variational system on fresh Monte-Carlo batches.
pub struct TdvpVelocity<'a> {
    template: DensityModel,
    problem: &'a FokkerPlanckProblem,
    n_samples: usize,
    policy: RegularizationPolicy,
    rng: ChaCha8Rng,
    shared: bool,
    cached: Option<ParticleEnsemble>,
}

impl<'a> TdvpVelocity<'a> {
    pub fn new(
        model: &DensityModel,
        problem: &'a FokkerPlanckProblem,
        n_samples: usize,
        policy: RegularizationPolicy,
        seed: u64,
        shared: bool,
    ) -> Result<Self> {
        ensure_dim(problem.dim(), model.dim())?;
        Ok(Self {
            template: model.clone(),
            problem,
            n_samples,
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            shared,
            cached: None,
        })
    }
}

impl ThetaVelocity for TdvpVelocity<'_> {
    fn velocity(&mut self, theta: &[f64], t: f64) -> Result<StageEval> {
        let model = self.template.with_params(theta)?;
        let latent = match (&self.cached, self.shared) {
            (Some(z), true) => z.clone(),
            _ => {
                let z = model.sample_latent(self.n_samples, &mut self.rng)?;
                if self.shared {
                    self.cached = Some(z.clone());
                }
                z
            }
        };
        let samples = model.push_forward(&latent)?;
        let v = tdvp::velocity(&model, self.problem, t, &samples, &self.policy)?;
        Ok(StageEval {
            theta_dot: v.theta_dot,
            residual: Some(v.residual),
            spectrum: v.spectrum,
            rank: v.rank,
            stationary: v.stationary,
        })
    }

    fn begin_step(&mut self) {
        self.cached = None;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// Time at the end of the step.
    pub t: f64,
    pub dt: f64,
    /// Residual of the first stage.
    pub residual: Option<ResidualReport>,
    pub theta_dot_norm: f64,
    pub spectrum_max: f64,
    pub spectrum_min_retained: f64,
    pub rank: usize,
    pub stationary: bool,
}

fn axpy(theta: &[f64], a: f64, v: &[f64]) -> Vec<f64> {
    theta.iter().zip(v).map(|(t, d)| t + a * d).collect()
}

/// Advances θ by one step of length `dt`.
///
/// Euler: `θ + dt·θ̇(θ)`. Heun: `θ + dt/2·(θ̇(θ) + θ̇(θ + dt·θ̇(θ)))`.
pub fn step_theta(
    field: &mut dyn ThetaVelocity,
    theta: &[f64],
    t: f64,
    dt: f64,
    scheme: Scheme,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::Precondition("dt must be finite and non-negative".into()));
    }
    field.begin_step();
    let k1 = field.velocity(theta, t)?;
    ensure_dim(theta.len(), k1.theta_dot.len())?;
    if k1.theta_dot.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter velocity"));
    }
    let next = match scheme {
        Scheme::Euler => axpy(theta, dt, &k1.theta_dot),
        Scheme::Heun => {
            let predictor = axpy(theta, dt, &k1.theta_dot);
            let k2 = field.velocity(&predictor, t + dt)?;
            ensure_dim(theta.len(), k2.theta_dot.len())?;
            let avg: Vec<f64> = k1.theta_dot.iter().zip(&k2.theta_dot).map(|(a, b)| 0.5 * (a + b)).collect();
            axpy(theta, dt, &avg)
        }
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("updated parameters"));
    }
    let norm = k1.theta_dot.iter().map(|v| v * v).sum::<f64>().sqrt();
    let retained = k1.spectrum.get(k1.rank.wrapping_sub(1)).copied().unwrap_or(0.0);
    let diag = StepDiagnostics {
        t: t + dt,
        dt,
        residual: k1.residual,
        theta_dot_norm: norm,
        spectrum_max: k1.spectrum.first().copied().unwrap_or(0.0),
        spectrum_min_retained: retained,
        rank: k1.rank,
        stationary: k1.stationary,
    };
    Ok((next, diag))
}

/// One step applied to a model; the model is left untouched on error.
pub fn step(
    model: &DensityModel,
    problem: &FokkerPlanckProblem,
    config: &IntegratorConfig,
    t: f64,
    rng_seed: u64,
) -> Result<(DensityModel, StepDiagnostics)> {
    let mut field = TdvpVelocity::new(
        model,
        problem,
        config.n_samples,
        config.regularization,
        rng_seed,
        config.shared_samples,
    )?;
    let (theta, diag) = step_theta(&mut field, model.params().values(), t, config.dt, config.scheme)?;
    Ok((model.with_params(&theta)?, diag))
}

/// Receives the model at every output time.
pub trait Observer {
    fn observe(&mut self, t: f64, model: &DensityModel, diag: Option<&StepDiagnostics>) -> Result<()>;
}

impl<F: FnMut(f64, &DensityModel, Option<&StepDiagnostics>) -> Result<()>> Observer for F {
    fn observe(&mut self, t: f64, model: &DensityModel, diag: Option<&StepDiagnostics>) -> Result<()> {
        self(t, model, diag)
    }
}

#[derive(Debug, Clone)]
pub struct Evolution {
    pub model: DensityModel,
    pub t: f64,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

/// Integrates from `t0` to `config.t_end`, calling `observer` at `t0`, every
/// `output_every` steps and at the final time.
pub fn evolve(
    model: DensityModel,
    problem: &FokkerPlanckProblem,
    config: &IntegratorConfig,
    t0: f64,
    observer: &mut dyn Observer,
) -> Result<Evolution> {
    config.validate()?;
    let mut field = TdvpVelocity::new(
        &model,
        problem,
        config.n_samples,
        config.regularization,
        config.seed,
        config.shared_samples,
    )?;
    evolve_with(model, &mut field, config, t0, observer)
}

/// [`evolve`] with an arbitrary velocity source.
pub fn evolve_with(
    mut model: DensityModel,
    field: &mut dyn ThetaVelocity,
    config: &IntegratorConfig,
    t0: f64,
    observer: &mut dyn Observer,
) -> Result<Evolution> {
    config.validate()?;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut t = t0;
    let mut steps = 0usize;
    let mut dt = config.dt;
    let mut checkpoints = Vec::new();
    let mut last_observed = 0usize;
    observer.observe(t, &model, None)?;
    let eps = 1e-12 * config.t_end.abs().max(1.0);
    let mut last_diag = None;
    while t < config.t_end - eps {
        let h = dt.min(config.t_end - t);
        let theta = model.params().values().to_vec();
        let attempt = match &config.adaptive {
            None => step_theta(field, &theta, t, h, config.scheme).map(|(th, d)| (th, d, dt)),
            Some(a) => adaptive_step(field, &theta, t, h, config.scheme, a),
        };
        let (next, diag, next_dt) = match attempt.and_then(|(th, d, n)| Ok((model.with_params(&th)?, d, n))) {
            Ok(v) => v,
            Err(e) => return Err(abort(&model, t, e, config)),
        };
        model = next;
        t = if (config.t_end - diag.t).abs() <= eps { config.t_end } else { diag.t };
        steps += 1;
        if config.adaptive.is_some() {
            dt = next_dt;
        }
        match &diag.residual {
            Some(r) => log::info!("t={t:.6} residual={:.6e} dt={:.3e}", r.r_normalized, diag.dt),
            None => log::info!("t={t:.6} residual=nan dt={:.3e}", diag.dt),
        }
        if let (Some(dir), true) = (&config.checkpoint_dir, config.checkpoint_every > 0) {
            if steps % config.checkpoint_every == 0 {
                let path = checkpoint_path(dir, steps);
                checkpoint::write(&path, &model, t)?;
                checkpoints.push(path);
            }
        }
        if steps % config.output_every == 0 {
            observer.observe(t, &model, Some(&diag))?;
            last_observed = steps;
        }
        last_diag = Some(diag);
    }
    if last_observed != steps {
        observer.observe(t, &model, last_diag.as_ref())?;
    }
    Ok(Evolution {
        model,
        t,
        steps,
        checkpoints,
    })
}

fn abort(model: &DensityModel, t: f64, cause: Error, config: &IntegratorConfig) -> Error {
    let last_checkpoint = config.checkpoint_dir.as_ref().and_then(|dir| {
        let path = dir.join("last_good.ckpt");
        match checkpoint::write(&path, model, t) {
            Ok(()) => Some(path),
            Err(e) => {
                log::error!("could not write abort checkpoint: {e}");
                None
            }
        }
    });
    log::error!("integration aborted at t={t}: {cause}");
    Error::Aborted {
        t,
        reason: cause.to_string(),
        last_checkpoint,
    }
}

fn adaptive_step(
    field: &mut dyn ThetaVelocity,
    theta: &[f64],
    t: f64,
    h: f64,
    scheme: Scheme,
    control: &AdaptiveConfig,
) -> Result<(Vec<f64>, StepDiagnostics, f64)> {
    let order = match scheme {
        Scheme::Euler => 1.0,
        Scheme::Heun => 2.0,
    };
    let mut h = h.max(control.dt_min.min(h));
    loop {
        let (full, _) = step_theta(field, theta, t, h, scheme)?;
        let (mid, first) = step_theta(field, theta, t, 0.5 * h, scheme)?;
        let (half, second) = step_theta(field, &mid, t + 0.5 * h, 0.5 * h, scheme)?;
        let scale = 1.0 + theta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = full.iter().zip(&half).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        if err <= control.tolerance || h <= control.dt_min {
            let factor = if err == 0.0 {
                2.0
            } else {
                (0.9 * (control.tolerance / err).powf(1.0 / (order + 1.0))).clamp(0.2, 2.0)
            };
            let next = (h * factor).clamp(control.dt_min, control.dt_max);
            let diag = StepDiagnostics {
                t: t + h,
                dt: h,
                residual: first.residual,
                ..second
            };
            return Ok((half, diag, next));
        }
        h = (0.5 * h).max(control.dt_min);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{CovarianceParam, LatentFamily, LatentInit, LatentSpec};

    fn gaussian(d: usize) -> DensityModel {
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
    fn heun_on_linear_ode() {
        let mut f = FnVelocity(|th: &[f64], _t: f64| th.to_vec());
        let (next, diag) = step_theta(&mut f, &[1.0], 0.0, 0.1, Scheme::Heun).unwrap();
        assert!((next[0] - 1.105).abs() < 1e-15);
        assert_eq!(diag.t, 0.1);
        let (next, _) = step_theta(&mut f, &[1.0], 0.0, 0.1, Scheme::Euler).unwrap();
        assert!((next[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn zero_dt_leaves_parameters_unchanged() {
        let model = gaussian(2);
        let problem = FokkerPlanckProblem::heat(2, 1.0).unwrap();
        let config = IntegratorConfig {
            dt: 0.0,
            n_samples: 100,
            ..Default::default()
        };
        let (next, _) = step(&model, &problem, &config, 0.0, 1).unwrap();
        assert_eq!(next.params().values(), model.params().values());
    }

    #[test]
    fn nonfinite_velocity_aborts_with_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let model = gaussian(2);
        let config = IntegratorConfig {
            scheme: Scheme::Euler,
            dt: 0.1,
            t_end: 1.0,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let mut field = FnVelocity(|th: &[f64], t: f64| {
            if t > 0.25 {
                vec![f64::NAN; th.len()]
            } else {
                vec![1.0; th.len()]
            }
        });
        let mut noop = |_: f64, _: &DensityModel, _: Option<&StepDiagnostics>| Ok(());
        let err = evolve_with(model, &mut field, &config, 0.0, &mut noop).unwrap_err();
        match err {
            Error::Aborted { t, last_checkpoint, .. } => {
                assert!((t - 0.3).abs() < 1e-12);
                let saved = checkpoint::read(&last_checkpoint.unwrap()).unwrap();
                assert!((saved.t - 0.3).abs() < 1e-12);
                assert!((saved.model.params().values()[0] - 0.3).abs() < 1e-12);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn observer_cadence_and_final_time() {
        let model = gaussian(1);
        let config = IntegratorConfig {
            dt: 0.3,
            t_end: 1.0,
            output_every: 2,
            ..Default::default()
        };
        let mut times = Vec::new();
        let mut obs = |t: f64, _: &DensityModel, _: Option<&StepDiagnostics>| {
            times.push(t);
            Ok(())
        };
        let mut field = FnVelocity(|th: &[f64], _t: f64| vec![0.0; th.len()]);
        let ev = evolve_with(model, &mut field, &config, 0.0, &mut obs).unwrap();
        assert_eq!(ev.steps, 4);
        assert_eq!(ev.t, 1.0);
        assert_eq!(times.len(), 3);
        assert_eq!(times[0], 0.0);
        assert!((times[1] - 0.6).abs() < 1e-12);
        assert_eq!(times[2], 1.0);
    }

    #[test]
    fn zero_end_time_observes_once() {
        let config = IntegratorConfig {
            t_end: 0.0,
            ..Default::default()
        };
        let mut count = 0;
        let mut obs = |_: f64, _: &DensityModel, _: Option<&StepDiagnostics>| {
            count += 1;
            Ok(())
        };
        let problem = FokkerPlanckProblem::heat(2, 1.0).unwrap();
        let ev = evolve(gaussian(2), &problem, &config, 0.0, &mut obs).unwrap();
        assert_eq!(ev.steps, 0);
        assert_eq!(count, 1);
    }

    #[test]
    fn adaptive_control_reaches_end_and_grows_step() {
        let model = gaussian(1).with_params(&[1.0, 0.0]).unwrap();
        let config = IntegratorConfig {
            dt: 1e-3,
            t_end: 1.0,
            adaptive: Some(AdaptiveConfig {
                tolerance: 1e-6,
                dt_min: 1e-5,
                dt_max: 0.2,
            }),
            ..Default::default()
        };
        let mut field = FnVelocity(|th: &[f64], _t: f64| th.iter().map(|v| -v).collect());
        let mut noop = |_: f64, _: &DensityModel, _: Option<&StepDiagnostics>| Ok(());
        let ev = evolve_with(model, &mut field, &config, 0.0, &mut noop).unwrap();
        assert_eq!(ev.t, 1.0);
        assert!(ev.steps < 1000);
        let theta = ev.model.params().values();
        assert!((theta[0] - (-1f64).exp()).abs() < 1e-4);
        assert_eq!(theta[1], 0.0);
    }

    #[test]
    fn config_validation() {
        let ok = IntegratorConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            IntegratorConfig { dt: 0.0, ..ok.clone() },
            IntegratorConfig { t_end: -1.0, ..ok.clone() },
            IntegratorConfig { n_samples: 1, ..ok.clone() },
            IntegratorConfig { output_every: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
