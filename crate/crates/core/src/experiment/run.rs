//! End-to-end runs: evolve, record observables, compare with a reference.
//!
//! Files written to the output directory:
//!
//! * `config.json`: canonical echo of the resolved configuration.
//! * `timeseries.csv`: one row per observation. Columns, in order:
//!   `t, entropy, entropy_se`, then when moments are enabled
//!   `mean_0..mean_{d-1}, mean_se_0.., var_0.., var_se_0..`, then
//!   `residual, residual_normalized, theta_dot_norm, rank`, then `nu` for a
//!   Student-t latent, then `ball_prob_j, ball_prob_se_j` for each configured
//!   radius, then `wall_time` (seconds since the run started).
//! * `comparison.csv` (when a reference is active): long format with columns
//!   `t, quantity, tdvp, tdvp_se, reference, reference_se, difference`.
//! * `checkpoints/`: periodic checkpoints, `final.ckpt`, and `last_good.ckpt`
//!   after an aborted integration.
//!
//! Reals are written with 17 significant digits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{InitialKind, ProblemSection, ReferenceKind, RunConfig};
use crate::error::{Error, Result};
use crate::flow::{checkpoint, DensityModel};
use crate::integrator::{evolve, StepDiagnostics};
use crate::observables::{ball_probability, ensemble_moments, entropy_of_samples, Estimate, Moments};
use crate::reference::{
    gaussian_heat_oracle, gibbs_oracle, radial_heat_evolve, sde_evolve, RadialProfile,
};
use crate::tdvp::{velocity, ResidualReport};

/// Environment variable naming the directory that relative output paths are
/// resolved against.
pub const OUTPUT_ROOT_ENV: &str = "FLOW_TDVP_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesRecord {
    pub t: f64,
    pub entropy: Estimate,
    pub moments: Option<Moments>,
    pub residual: ResidualReport,
    pub theta_dot_norm: f64,
    pub rank: usize,
    pub nu: Option<f64>,
    pub ball: Vec<Estimate>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub t: f64,
    pub quantity: String,
    pub tdvp: f64,
    pub tdvp_se: f64,
    pub reference: f64,
    pub reference_se: f64,
}

impl ComparisonRow {
    /// `|tdvp − reference|` in units of the combined standard error.
    pub fn z_score(&self) -> f64 {
        let se = self.tdvp_se.hypot(self.reference_se);
        (self.tdvp - self.reference).abs() / se
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub records: Vec<TimeSeriesRecord>,
    pub comparisons: Vec<ComparisonRow>,
    pub reference: Option<ReferenceKind>,
    pub model: DensityModel,
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn resolve_output_dir(config: &RunConfig) -> PathBuf {
    let dir = PathBuf::from(&config.output_dir);
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

fn header(config: &RunConfig) -> String {
    let d = config.dim();
    let mut cols: Vec<String> = vec!["t".into(), "entropy".into(), "entropy_se".into()];
    if config.observables.moments {
        for prefix in ["mean", "mean_se", "var", "var_se"] {
            cols.extend((0..d).map(|i| format!("{prefix}_{i}")));
        }
    }
    cols.extend(["residual", "residual_normalized", "theta_dot_norm", "rank"].map(String::from));
    if config.initial.kind == InitialKind::StudentT {
        cols.push("nu".into());
    }
    for j in 0..config.observables.ball_radii.len() {
        cols.push(format!("ball_prob_{j}"));
        cols.push(format!("ball_prob_se_{j}"));
    }
    cols.push("wall_time".into());
    cols.join(",")
}

fn row(r: &TimeSeriesRecord) -> String {
    let mut cols = vec![num(r.t), num(r.entropy.value), num(r.entropy.std_error)];
    if let Some(m) = &r.moments {
        for v in [&m.mean, &m.mean_se, &m.variance, &m.variance_se] {
            cols.extend(v.iter().map(|x| num(*x)));
        }
    }
    cols.push(num(r.residual.r));
    cols.push(num(r.residual.r_normalized));
    cols.push(num(r.theta_dot_norm));
    cols.push(r.rank.to_string());
    if let Some(nu) = r.nu {
        cols.push(num(nu));
    }
    for b in &r.ball {
        cols.push(num(b.value));
        cols.push(num(b.std_error));
    }
    cols.push(num(r.wall_time));
    cols.join(",")
}

/// Entropy, moments and ball probabilities for one observation.
fn observe(
    config: &RunConfig,
    model: &DensityModel,
    index: u64,
) -> Result<(Estimate, Option<Moments>, Vec<Estimate>)> {
    let o = &config.observables;
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    rng.set_stream(index);
    let samples = model.sample(o.entropy_samples, &mut rng)?;
    let entropy = entropy_of_samples(model, &samples)?;
    let moments = if o.moments {
        Some(ensemble_moments(&samples)?)
    } else {
        None
    };
    let origin = vec![0.0; model.dim()];
    let ball = o
        .ball_radii
        .iter()
        .map(|&r| ball_probability(model, r, &origin, o.ball_samples, Some(o.ball_shells), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((entropy, moments, ball))
}

/// Runs `config`, writing artifacts under [`resolve_output_dir`].
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    run_in(config, &resolve_output_dir(config))
}

pub fn run_in(config: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), config.canonical_json())?;
    let problem = config.problem()?;
    let model = config.initial_model()?;
    let ckpt_dir = out_dir.join("checkpoints");
    let mut integ = config.integrator_config();
    integ.checkpoint_dir = Some(ckpt_dir.clone());

    // residual of the initial state, so the first row is complete
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.integrator.seed ^ 0x9e37_79b9_7f4a_7c15);
    let init_samples = model.sample(config.integrator.n_samples, &mut init_rng)?;
    let init_vel = velocity(&model, &problem, 0.0, &init_samples, &config.regularization)?;
    let init_norm = init_vel.theta_dot.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut csv = BufWriter::new(File::create(out_dir.join("timeseries.csv"))?);
    writeln!(csv, "{}", header(config))?;
    let mut records: Vec<TimeSeriesRecord> = Vec::new();
    let mut observer = |t: f64, model: &DensityModel, diag: Option<&StepDiagnostics>| -> Result<()> {
        let (entropy, moments, ball) = observe(config, model, records.len() as u64)?;
        let (residual, theta_dot_norm, rank) = match diag {
            Some(d) => (
                d.residual.expect("TDVP stages report residuals"),
                d.theta_dot_norm,
                d.rank,
            ),
            None => (init_vel.residual, init_norm, init_vel.rank),
        };
        let record = TimeSeriesRecord {
            t,
            entropy,
            moments,
            residual,
            theta_dot_norm,
            rank,
            nu: model.nu(),
            ball,
            wall_time: started.elapsed().as_secs_f64(),
        };
        writeln!(csv, "{}", row(&record))?;
        csv.flush()?;
        log::info!(
            "t={t:.6} entropy={:.6}±{:.6} residual_normalized={:.3e}",
            entropy.value,
            entropy.std_error,
            residual.r_normalized
        );
        records.push(record);
        Ok(())
    };
    let evolution = evolve(model, &problem, &integ, 0.0, &mut observer)?;
    checkpoint::write(&ckpt_dir.join("final.ckpt"), &evolution.model, evolution.t)?;

    let (reference, comparisons) = compare(config, &records)?;
    if reference.is_some() {
        let mut out = BufWriter::new(File::create(out_dir.join("comparison.csv"))?);
        writeln!(out, "t,quantity,tdvp,tdvp_se,reference,reference_se,difference")?;
        for c in &comparisons {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                num(c.t),
                c.quantity,
                num(c.tdvp),
                num(c.tdvp_se),
                num(c.reference),
                num(c.reference_se),
                num(c.tdvp - c.reference)
            )?;
        }
        out.flush()?;
    }
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        records,
        comparisons,
        reference,
        model: evolution.model,
    })
}

fn reference_error(message: impl Into<String>) -> Error {
    Error::Config {
        path: "reference.kind".into(),
        message: message.into(),
    }
}

/// Picks the reference solver that `auto` stands for.
pub fn effective_reference(config: &RunConfig) -> ReferenceKind {
    match config.reference.kind {
        ReferenceKind::Auto => match (&config.problem, config.initial.kind) {
            (ProblemSection::Heat { .. }, InitialKind::Gaussian) => ReferenceKind::Oracle,
            (ProblemSection::Heat { .. }, InitialKind::StudentT) => ReferenceKind::Radial,
            (ProblemSection::PhaseSpace { .. }, _) => {
                let params = config.phase_space_params().expect("phase-space problem");
                if gibbs_oracle(&params).is_ok() {
                    ReferenceKind::Oracle
                } else {
                    ReferenceKind::Sde
                }
            }
        },
        other => other,
    }
}

fn push_moments(
    out: &mut Vec<ComparisonRow>,
    t: f64,
    tdvp: &Moments,
    mean: &[f64],
    mean_se: &[f64],
    var: &[f64],
    var_se: &[f64],
) {
    for i in 0..mean.len() {
        out.push(ComparisonRow {
            t,
            quantity: format!("mean_{i}"),
            tdvp: tdvp.mean[i],
            tdvp_se: tdvp.mean_se[i],
            reference: mean[i],
            reference_se: mean_se[i],
        });
    }
    for i in 0..var.len() {
        out.push(ComparisonRow {
            t,
            quantity: format!("var_{i}"),
            tdvp: tdvp.variance[i],
            tdvp_se: tdvp.variance_se[i],
            reference: var[i],
            reference_se: var_se[i],
        });
    }
}

fn entropy_row(t: f64, e: &Estimate, reference: f64) -> ComparisonRow {
    ComparisonRow {
        t,
        quantity: "entropy".into(),
        tdvp: e.value,
        tdvp_se: e.std_error,
        reference,
        reference_se: 0.0,
    }
}

/// Evaluates the configured reference at every recorded time.
pub fn compare(
    config: &RunConfig,
    records: &[TimeSeriesRecord],
) -> Result<(Option<ReferenceKind>, Vec<ComparisonRow>)> {
    let kind = effective_reference(config);
    let d = config.dim();
    let mut rows = Vec::new();
    match (kind, &config.problem) {
        (ReferenceKind::None, _) | (ReferenceKind::Auto, _) => return Ok((None, rows)),
        (ReferenceKind::Oracle, ProblemSection::Heat { diffusion, .. }) => {
            if config.initial.kind != InitialKind::Gaussian {
                return Err(reference_error("closed-form heat solution needs a Gaussian initial density"));
            }
            let mut sigma0 = vec![0.0; d * d];
            for i in 0..d {
                sigma0[i * d + i] = config.initial.variance;
            }
            let mu0 = config.initial_mean();
            for r in records {
                let g = gaussian_heat_oracle(&sigma0, &mu0, *diffusion, r.t)?;
                rows.push(entropy_row(r.t, &r.entropy, g.entropy));
                if let Some(m) = &r.moments {
                    let var: Vec<f64> = (0..d).map(|i| g.covariance[i * d + i]).collect();
                    push_moments(&mut rows, r.t, m, &g.mean, &vec![0.0; d], &var, &vec![0.0; d]);
                }
            }
        }
        (ReferenceKind::Oracle, ProblemSection::PhaseSpace { .. }) => {
            let g = gibbs_oracle(&config.phase_space_params().expect("phase-space problem"))
                .map_err(|e| reference_error(e.to_string()))?;
            for r in records {
                rows.push(entropy_row(r.t, &r.entropy, g.entropy));
                if let Some(m) = &r.moments {
                    let zeros = vec![0.0; d];
                    push_moments(&mut rows, r.t, m, &zeros, &zeros, &g.variances, &zeros);
                }
                for (radius, b) in config.observables.ball_radii.iter().zip(&r.ball) {
                    rows.push(ComparisonRow {
                        t: r.t,
                        quantity: format!("ball_prob_{radius}"),
                        tdvp: b.value,
                        tdvp_se: b.std_error,
                        reference: g.ball_prob(*radius)?,
                        reference_se: 0.0,
                    });
                }
            }
        }
        (ReferenceKind::Radial, ProblemSection::Heat { diffusion, .. }) => {
            let grid = &config.reference.radial;
            let mut profile = match config.initial.kind {
                InitialKind::Gaussian => RadialProfile::gaussian(d, config.initial.variance, grid)?,
                InitialKind::StudentT if config.initial.variance == 1.0 => {
                    RadialProfile::student_t(d, config.initial.nu, grid)?
                }
                InitialKind::StudentT => {
                    return Err(reference_error("radial Student-t reference needs unit scale"));
                }
            };
            for r in records {
                profile = radial_heat_evolve(&profile, *diffusion, grid, r.t)?;
                rows.push(entropy_row(r.t, &r.entropy, profile.entropy()));
            }
        }
        (ReferenceKind::Radial, ProblemSection::PhaseSpace { .. }) => {
            return Err(reference_error("the radial grid solves the heat equation only"));
        }
        (ReferenceKind::Sde, ProblemSection::PhaseSpace { .. }) => {
            let s = &config.reference.sde;
            let n = s.particles.unwrap_or(config.integrator.n_samples);
            let model = config.initial_model()?;
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let initial = model.sample(n, &mut rng)?;
            let times: Vec<f64> = records.iter().map(|r| r.t).collect();
            let params = config.phase_space_params().expect("phase-space problem");
            let snaps = sde_evolve(&params, &initial, s.dt, &times, s.scheme, s.seed)?;
            let stats = snaps
                .par_iter()
                .map(|snap| ensemble_moments(&snap.ensemble))
                .collect::<Result<Vec<_>>>()?;
            for (r, m) in records.iter().zip(&stats) {
                if let Some(tm) = &r.moments {
                    push_moments(&mut rows, r.t, tm, &m.mean, &m.mean_se, &m.variance, &m.variance_se);
                }
            }
        }
        (ReferenceKind::Sde, ProblemSection::Heat { .. }) => {
            return Err(reference_error("the particle reference simulates the phase-space problem only"));
        }
    }
    Ok((Some(kind), rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(pairs: &[(&str, &str)]) -> RunConfig {
        let mut ov: Vec<(String, String)> = vec![
            ("n_samples".into(), "400".into()),
            ("observables.entropy_samples".into(), "400".into()),
            ("observables.ball_samples".into(), "400".into()),
            ("observables.ball_shells".into(), "4".into()),
            ("reference.radial.r_max".into(), "200".into()),
            ("reference.radial.delta".into(), "0.1".into()),
        ];
        ov.extend(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        RunConfig::resolve(None, &ov).unwrap()
    }

    #[test]
    fn zero_length_run_writes_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(&[("t_end", "0")]);
        let s = run_in(&cfg, dir.path()).unwrap();
        assert_eq!(s.records.len(), 1);
        let text = std::fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], header(&cfg));
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].split(',').all(|v| v.parse::<f64>().unwrap().is_finite()));
        assert_eq!(
            std::fs::read_to_string(dir.path().join("config.json")).unwrap(),
            cfg.canonical_json()
        );
        assert!(dir.path().join("comparison.csv").exists());
        assert!(dir.path().join("checkpoints/final.ckpt").exists());
        // entropy at t=0 against the closed form
        assert!((s.comparisons[0].tdvp - s.comparisons[0].reference).abs() < 4.0 * s.comparisons[0].tdvp_se);
    }

    #[test]
    fn csv_values_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn short_heat_run_matches_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(&[("d", "2"), ("covariance", "cholesky_lower"), ("blocks", "0"), ("dt", "0.01"), ("t_end", "0.1"), ("every", "5")]);
        let s = run_in(&cfg, dir.path()).unwrap();
        assert_eq!(s.records.len(), 3);
        assert_eq!(s.reference, Some(ReferenceKind::Oracle));
        let var = s.model.latent_covariance();
        assert!((var[0] - 1.2).abs() < 1e-4, "{var:?}");
        let text = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 5);
    }

    #[test]
    fn phase_space_references() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(&[("experiment", "phase_space"), ("dt", "0.05"), ("t_end", "0.1"), ("every", "1"), ("reference.sde.dt", "0.01")]);
        let s = run_in(&cfg, dir.path()).unwrap();
        assert_eq!(s.reference, Some(ReferenceKind::Sde));
        assert_eq!(s.comparisons.len(), 3 * 12);
        for c in s.comparisons.iter().filter(|c| c.t == 0.0) {
            assert!(c.z_score() < 5.0, "{c:?}");
        }
        let header = std::fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
        assert!(header.lines().next().unwrap().ends_with("ball_prob_0,ball_prob_se_0,wall_time"));

        let gibbs = quick(&[("experiment", "phase_space"), ("k", "0"), ("temps", "10,10,10"), ("t_end", "0")]);
        assert_eq!(effective_reference(&gibbs), ReferenceKind::Oracle);
        let (_, rows) = compare(&gibbs, &run_in(&gibbs, dir.path()).unwrap().records).unwrap();
        assert!(rows.iter().any(|r| r.quantity == "entropy" && (r.reference - 15.4214).abs() < 1e-4));
        assert!(rows.iter().any(|r| r.quantity == "ball_prob_10" && (r.reference - 0.875348).abs() < 1e-6));
    }

    #[test]
    fn student_t_uses_radial_grid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(&[("initial", "student_t"), ("t_end", "0")]);
        let s = run_in(&cfg, dir.path()).unwrap();
        assert_eq!(s.reference, Some(ReferenceKind::Radial));
        assert_eq!(s.comparisons.len(), 1);
        assert!(s.records[0].nu == Some(2.0));
        let bad = quick(&[("initial", "student_t"), ("reference", "oracle"), ("t_end", "0")]);
        assert!(matches!(run_in(&bad, dir.path()), Err(Error::Config { .. })));
        let bad = quick(&[("reference", "sde"), ("t_end", "0")]);
        assert!(matches!(run_in(&bad, dir.path()), Err(Error::Config { .. })));
    }

    #[test]
    fn aborted_run_keeps_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        // an enormous step drives the latent scale through zero
        let cfg = quick(&[("d", "2"), ("covariance", "cholesky_lower"), ("blocks", "0"), ("t_end", "5"), ("dt", "5"), ("scheme", "euler"), ("problem.diffusion", "1e12"), ("reference", "none")]);
        match run_in(&cfg, dir.path()) {
            Err(Error::Aborted { last_checkpoint, .. }) => {
                assert!(last_checkpoint.unwrap().ends_with("last_good.ckpt"));
            }
            other => panic!("expected abort, got {:?}", other.map(|s| s.records.len())),
        }
        assert!(dir.path().join("timeseries.csv").exists());
    }
}
