//! Invariant battery run by the `verify` subcommand.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::RunConfig;
use crate::diff::{fd, param_grad_log_prob, spatial_derivatives};
use crate::error::Result;
use crate::flow::{checkpoint, CouplingBlockSpec, CovarianceParam, DensityModel, LatentFamily, LatentInit, LatentSpec};
use crate::integrator::{evolve, IntegratorConfig};
use crate::observables::{importance_normalization, mc_entropy};
use crate::pde::FokkerPlanckProblem;
use crate::reference::{gaussian_entropy, gaussian_heat_oracle, gibbs_oracle, RadialGridConfig, RadialProfile};
use crate::tdvp::{evaluate_batch, RegularizationPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &str, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn random_model(d: usize, family: LatentFamily, cov: CovarianceParam, t_nets: bool, seed: u64) -> Result<DensityModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = (0..3).map(|_| CouplingBlockSpec::random(d, t_nets, &mut rng)).collect();
    let nu = (family == LatentFamily::StudentT).then_some(3.0);
    let spec = LatentSpec {
        family,
        dim: d,
        covariance: cov,
    };
    let variance = if cov == CovarianceParam::IdentityPlusAat { 1.5 } else { 0.7 };
    let mut m = DensityModel::init_identity(spec, &LatentInit::isotropic(vec![0.0; d], variance, nu), blocks, seed)?;
    m.randomize(0.5, &mut rng)?;
    Ok(m)
}

fn gauss(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn cases() -> Vec<(usize, LatentFamily, CovarianceParam, bool)> {
    vec![
        (2, LatentFamily::Gaussian, CovarianceParam::CholeskyLower, true),
        (4, LatentFamily::StudentT, CovarianceParam::IdentityPlusAat, false),
        (6, LatentFamily::Gaussian, CovarianceParam::CholeskyLower, true),
        (8, LatentFamily::StudentT, CovarianceParam::IdentityPlusAat, false),
    ]
}

fn round_trip() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for (i, (d, fam, cov, t)) in cases().into_iter().enumerate() {
        let m = random_model(d, fam, cov, t, 10 + i as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for _ in 0..250 {
            let z = gauss(&mut rng, d);
            let (x, _) = m.forward(&z)?;
            let (back, _) = m.inverse(&x)?;
            worst = z.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    Ok((worst < 1e-9, format!("max |inverse(forward(z)) - z| = {worst:.2e}")))
}

fn logdet() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for (i, (d, fam, cov, t)) in cases().into_iter().take(2).enumerate() {
        let m = random_model(d, fam, cov, t, 20 + i as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for _ in 0..20 {
            let z = gauss(&mut rng, d);
            let (_, ld) = m.forward(&z)?;
            worst = worst.max((ld - fd::forward_logdet(&m, &z, 1e-5)?).abs());
        }
    }
    Ok((worst < 1e-5, format!("max logdet deviation from finite differences = {worst:.2e}")))
}

fn identity_init() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let blocks = (0..4).map(|_| CouplingBlockSpec::random(6, true, &mut rng)).collect();
    let spec = LatentSpec {
        family: LatentFamily::Gaussian,
        dim: 6,
        covariance: CovarianceParam::CholeskyLower,
    };
    let m = DensityModel::init_identity(spec, &LatentInit::standard(6), blocks, 77)?;
    let mut exact = true;
    for _ in 0..100 {
        let z = gauss(&mut rng, 6);
        let (x, ld) = m.forward(&z)?;
        exact &= x == z && ld == 0.0;
    }
    Ok((exact, "forward(z) == z and logdet == 0 bit-for-bit".into()))
}

fn param_gradients() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for (i, (d, fam, cov, t)) in cases().into_iter().enumerate() {
        let m = random_model(d, fam, cov, t, 30 + i as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let x = gauss(&mut rng, d);
        let o = param_grad_log_prob(&m, &x)?;
        let numeric = fd::param_grad(&m, &x, fd::PARAM_STEP)?;
        for (a, b) in o.iter().zip(&numeric) {
            worst = worst.max((a - b).abs() / (1e-5 * b.abs() + 1e-8));
        }
    }
    Ok((worst <= 1.0, format!("worst error / tolerance = {worst:.3}")))
}

fn spatial_gradients() -> Result<(bool, String)> {
    let mut ok = true;
    for (i, (d, fam, cov, t)) in cases().into_iter().enumerate() {
        let m = random_model(d, fam, cov, t, 40 + i as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let x = gauss(&mut rng, d);
        let (g, h) = spatial_derivatives(&m, &x)?;
        ok &= fd::agrees(&g, &fd::spatial_grad(&m, &x, fd::SPATIAL_STEP)?, 1e-4, 1e-6);
        ok &= fd::agrees(&h, &fd::spatial_hessian(&m, &x, fd::SPATIAL_STEP)?, 1e-4, 1e-4);
    }
    Ok((ok, "gradient and Hessian within 1e-4 relative of finite differences".into()))
}

fn score_mean() -> Result<(bool, String)> {
    let m = random_model(4, LatentFamily::StudentT, CovarianceParam::CholeskyLower, true, 50)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4000;
    let samples = m.sample(n, &mut rng)?;
    let batch = evaluate_batch(&m, &FokkerPlanckProblem::heat(4, 1.0)?, 0.0, &samples)?;
    let mut worst: f64 = 0.0;
    for k in 0..batch.o.ncols() {
        let col = batch.o.column(k);
        let mean = col.mean();
        let sd = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (sd / n as f64).sqrt();
        if se > 0.0 {
            worst = worst.max(mean.abs() / se);
        }
    }
    Ok((worst < 4.5, format!("max |<O_k>| / SE = {worst:.2} over {} parameters", batch.o.ncols())))
}

fn normalization() -> Result<(bool, String)> {
    let m = random_model(2, LatentFamily::Gaussian, CovarianceParam::CholeskyLower, true, 60)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let e = importance_normalization(&m, &[0.0, 0.0], 3.0, 20_000, &mut rng)?;
    Ok((e.covers(1.0, 3.0, 0.0), format!("integral = {:.4} ± {:.4}", e.value, e.std_error)))
}

fn entropy_estimator() -> Result<(bool, String)> {
    let spec = LatentSpec {
        family: LatentFamily::Gaussian,
        dim: 8,
        covariance: CovarianceParam::IdentityPlusAat,
    };
    let m = DensityModel::init_identity(spec, &LatentInit::standard(8), vec![], 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let e = mc_entropy(&m, 4000, &mut rng)?;
    let exact = gaussian_entropy(8, 0.0);
    Ok((e.covers(exact, 3.0, 0.0), format!("{:.4} ± {:.4} vs {exact:.4}", e.value, e.std_error)))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let m = random_model(6, LatentFamily::Gaussian, CovarianceParam::CholeskyLower, true, 70)?;
    let bytes = checkpoint::encode(&m, 1.25)?;
    let back = checkpoint::decode(&bytes)?;
    let exact = back.model.params().values() == m.params().values() && back.t == 1.25;
    let mut corrupted = bytes.clone();
    corrupted.truncate(bytes.len() - 3);
    let rejected = checkpoint::decode(&corrupted).is_err() && checkpoint::decode(b"not a checkpoint").is_err();
    Ok((exact && rejected, "exact round trip; truncated and foreign input rejected".into()))
}

fn checkpoint_file(path: &Path) -> Result<(bool, String)> {
    let c = checkpoint::read(path)?;
    Ok((true, format!("{} parameters at t = {}", c.model.param_count(), c.t)))
}

fn config_echo(config: &RunConfig) -> Result<(bool, String)> {
    let echo = config.canonical_json();
    let again = RunConfig::resolve(Some(&echo), &[])?;
    Ok((again == *config && again.canonical_json() == echo, "canonical echo re-parses to the same configuration".into()))
}

fn radial_snapshot() -> Result<(bool, String)> {
    let cfg = RadialGridConfig {
        delta: 0.05,
        r_max: 10.0,
        ..Default::default()
    };
    let p = RadialProfile::gaussian(8, 1.0, &cfg)?;
    let back = RadialProfile::parse_snapshot(&p.to_snapshot())?;
    let mass = p.mass();
    Ok((back == p && (mass - 1.0).abs() < 1e-3, format!("exact snapshot round trip, mass {mass:.6}")))
}

fn exact_manifold() -> Result<(bool, String)> {
    let spec = LatentSpec {
        family: LatentFamily::Gaussian,
        dim: 2,
        covariance: CovarianceParam::CholeskyLower,
    };
    let m = DensityModel::init_identity(spec, &LatentInit::standard(2), vec![], 0)?;
    let problem = FokkerPlanckProblem::heat(2, 1.0)?;
    let cfg = IntegratorConfig {
        dt: 1e-3,
        t_end: 0.1,
        n_samples: 500,
        output_every: 1000,
        regularization: RegularizationPolicy::default(),
        ..Default::default()
    };
    let mut worst_res: f64 = 0.0;
    let mut obs = |_t: f64, _m: &DensityModel, d: Option<&crate::integrator::StepDiagnostics>| {
        if let Some(r) = d.and_then(|d| d.residual) {
            worst_res = worst_res.max(r.r_normalized);
        }
        Ok(())
    };
    let evo = evolve(m, &problem, &cfg, 0.0, &mut obs)?;
    let exact = gaussian_heat_oracle(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 1.0, evo.t)?;
    let cov = evo.model.latent_covariance();
    let rel = cov
        .iter()
        .zip(&exact.covariance)
        .map(|(a, b)| (a - b).abs() / exact.covariance[0])
        .fold(0.0, f64::max);
    Ok((
        rel < 1e-4 && worst_res < 1e-6,
        format!("covariance rel. error {rel:.2e}, final residual {worst_res:.2e}"),
    ))
}

fn oracles() -> Result<(bool, String)> {
    let heat = gaussian_heat_oracle(&identity(8), &[0.0; 8], 1.0, 2.0)?;
    let gibbs = gibbs_oracle(&crate::pde::PhaseSpaceParams {
        mass: 1.0,
        omega: 1.0,
        coupling: 0.0,
        gamma: 1.0,
        temps: vec![10.0; 3],
    })?;
    let ball = gibbs.ball_prob(10.0)?;
    let ok = (heat.entropy - 17.7893).abs() < 1e-4 && (gibbs.entropy - 15.4214).abs() < 1e-4 && (ball - 0.875348).abs() < 1e-6;
    Ok((ok, format!("heat S(2) = {:.4}, Gibbs S = {:.4}, P(r<10) = {ball:.6}", heat.entropy, gibbs.entropy)))
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn determinism(config: &RunConfig) -> Result<(bool, String)> {
    let model = config.initial_model()?;
    let problem = config.problem()?;
    let mut cfg = config.integrator_config();
    cfg.n_samples = cfg.n_samples.min(500);
    cfg.t_end = 2.0 * cfg.dt;
    cfg.adaptive = None;
    let mut none = |_: f64, _: &DensityModel, _: Option<&crate::integrator::StepDiagnostics>| Ok(());
    let a = evolve(model.clone(), &problem, &cfg, 0.0, &mut none)?;
    let b = evolve(model, &problem, &cfg, 0.0, &mut none)?;
    let same = a.model.params().values() == b.model.params().values();
    Ok((same, "two seeded steps repeated bit-for-bit".into()))
}

/// Runs every check. `checkpoint`, when given, must load successfully.
pub fn verify(config: &RunConfig, checkpoint: Option<&Path>) -> Report {
    let mut report = Report::default();
    report.record("flow round trip", round_trip());
    report.record("flow log-determinant", logdet());
    report.record("identity initialization", identity_init());
    report.record("parameter gradients", param_gradients());
    report.record("spatial derivatives", spatial_gradients());
    report.record("score has zero mean", score_mean());
    report.record("importance-sampled normalization", normalization());
    report.record("entropy estimator", entropy_estimator());
    report.record("checkpoint codec", checkpoint_round_trip());
    report.record("config echo", config_echo(config));
    report.record("radial snapshot", radial_snapshot());
    report.record("closed-form oracles", oracles());
    report.record("exact Gaussian manifold", exact_manifold());
    report.record("seeded determinism", determinism(config));
    if let Some(path) = checkpoint {
        report.record("checkpoint file", checkpoint_file(path));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes_and_is_deterministic() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        let a = verify(&cfg, None);
        assert!(a.passed(), "{a}");
        let b = verify(&cfg, None);
        assert_eq!(a, b);
        assert!(a.to_string().ends_with("0 failed"));
    }

    #[test]
    fn corrupted_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"FTDVPCK1garbage").unwrap();
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        let r = verify(&cfg, Some(&path));
        assert!(!r.passed());
        let last = r.checks.last().unwrap();
        assert_eq!(last.name, "checkpoint file");
        assert!(last.detail.starts_with("error"));
    }
}
