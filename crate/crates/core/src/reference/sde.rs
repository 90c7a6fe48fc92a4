//! Particle simulation of the damped, thermally driven oscillator chain.
//!
//! Positions follow `dx = ∂_p H dt`, momenta
//! `dp = −(γ p + ∂_x H) dt + √(2 m γ k_B T_i) dW_i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{ensure_dim, Error, Result};
use crate::pde::PhaseSpaceParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeScheme {
    EulerMaruyama,
    /// Predictor-corrector with the same noise increment in both stages.
    StochasticHeun,
}

/// The ensemble at one requested time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub ensemble: ParticleEnsemble,
}

fn noise_amplitudes(params: &PhaseSpaceParams) -> Vec<f64> {
    params
        .temps
        .iter()
        .map(|t| (2.0 * params.mass * params.gamma * t).sqrt())
        .collect()
}

fn advance(
    params: &PhaseSpaceParams,
    amp: &[f64],
    scheme: SdeScheme,
    state: &mut [f64],
    h: f64,
    rng: &mut ChaCha8Rng,
    buf: &mut [Vec<f64>; 4],
) {
    let n = params.n_osc();
    let [a0, pred, a1, noise] = buf;
    let sq = h.sqrt();
    for (w, a) in noise.iter_mut().zip(amp) {
        let z: f64 = StandardNormal.sample(rng);
        *w = a * sq * z;
    }
    params.drift_into(state, a0);
    match scheme {
        SdeScheme::EulerMaruyama => {
            for j in 0..2 * n {
                state[j] += h * a0[j];
            }
            for i in 0..n {
                state[n + i] += noise[i];
            }
        }
        SdeScheme::StochasticHeun => {
            pred.copy_from_slice(state);
            for j in 0..2 * n {
                pred[j] += h * a0[j];
            }
            for i in 0..n {
                pred[n + i] += noise[i];
            }
            params.drift_into(pred, a1);
            for j in 0..2 * n {
                state[j] += 0.5 * h * (a0[j] + a1[j]);
            }
            for i in 0..n {
                state[n + i] += noise[i];
            }
        }
    }
}

/// Evolves every particle from `t = 0` and records the ensemble at each of
/// `times` (non-decreasing). Each interval is split into equal steps no
/// longer than `dt`. Particle `i` draws its noise from stream `i` of the
/// ChaCha generator seeded with `seed`, so results do not depend on thread
/// scheduling.
pub fn sde_evolve(
    params: &PhaseSpaceParams,
    initial: &ParticleEnsemble,
    dt: f64,
    times: &[f64],
    scheme: SdeScheme,
    seed: u64,
) -> Result<Vec<Snapshot>> {
    params.validate()?;
    let n = params.n_osc();
    ensure_dim(2 * n, initial.dim())?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Precondition("dt must be positive".into()));
    }
    if times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Precondition("snapshot times must be non-negative and sorted".into()));
    }
    let amp = noise_amplitudes(params);
    let dim = initial.dim();
    let per_particle: Vec<Vec<f64>> = initial
        .as_flat()
        .par_chunks(dim)
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut state = x0.to_vec();
            let mut buf = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; n]];
            let mut out = Vec::with_capacity(times.len() * dim);
            let mut t = 0.0;
            for &target in times {
                let span = target - t;
                if span > 0.0 {
                    let steps = (span / dt - 1e-9).ceil().max(1.0) as usize;
                    let h = span / steps as f64;
                    for _ in 0..steps {
                        advance(params, &amp, scheme, &mut state, h, &mut rng, &mut buf);
                    }
                    t = target;
                }
                out.extend_from_slice(&state);
            }
            out
        })
        .collect();
    let mut snaps = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let mut points = Vec::with_capacity(initial.len() * dim);
        for p in &per_particle {
            points.extend_from_slice(&p[k * dim..(k + 1) * dim]);
        }
        snaps.push(Snapshot {
            t,
            ensemble: ParticleEnsemble::new(dim, points, Some(seed))?,
        });
    }
    Ok(snaps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::ensemble_moments;
    use std::f64::consts::FRAC_PI_2;

    fn params(k: f64, gamma: f64, temps: Vec<f64>) -> PhaseSpaceParams {
        PhaseSpaceParams {
            mass: 1.0,
            omega: 1.0,
            coupling: k,
            gamma,
            temps,
        }
    }

    #[test]
    fn undamped_oscillator_follows_cosine() {
        let p = params(0.0, 0.0, vec![0.0]);
        let init = ParticleEnsemble::new(2, vec![1.0, 0.0], None).unwrap();
        for scheme in [SdeScheme::EulerMaruyama, SdeScheme::StochasticHeun] {
            let snaps = sde_evolve(&p, &init, 1e-4, &[1.0, FRAC_PI_2], scheme, 0).unwrap();
            assert!((snaps[0].ensemble.point(0)[0] - 1f64.cos()).abs() < 1e-3);
            assert!(snaps[1].ensemble.point(0)[0].abs() < 0.01);
        }
    }

    #[test]
    fn zero_temperature_damping_decays_energy() {
        let p = params(0.5, 0.8, vec![0.0; 3]);
        let init = ParticleEnsemble::new(6, vec![1.0, -0.5, 0.3, 0.0, 0.7, -0.2], None).unwrap();
        let times: Vec<f64> = (1..=40).map(|i| 0.5 * i as f64).collect();
        let snaps = sde_evolve(&p, &init, 1e-3, &times, SdeScheme::EulerMaruyama, 0).unwrap();
        let energy = |s: &[f64]| p.hamiltonian(&s[..3], &s[3..]).unwrap();
        let mut last = energy(init.point(0));
        for s in &snaps {
            let e = energy(s.ensemble.point(0));
            assert!(e < last);
            last = e;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn momentum_variance_reaches_thermal_value() {
        let p = params(0.0, 1.0, vec![10.0]);
        let init = ParticleEnsemble::replicate(&[0.0, 0.0], 10_000);
        let snaps = sde_evolve(&p, &init, 1e-2, &[15.0], SdeScheme::StochasticHeun, 4).unwrap();
        let m = ensemble_moments(&snaps[0].ensemble).unwrap();
        assert!((m.variance[1] - 10.0).abs() < 3.0 * m.variance_se[1], "{:?}", m);
    }

    #[test]
    fn deterministic_per_particle_streams() {
        let p = params(1.0, 1.0, vec![10.0, 3.0, 1.0]);
        let init = ParticleEnsemble::replicate(&[0.0; 6], 50);
        let a = sde_evolve(&p, &init, 1e-2, &[0.5], SdeScheme::EulerMaruyama, 9).unwrap();
        let b = sde_evolve(&p, &init, 1e-2, &[0.5], SdeScheme::EulerMaruyama, 9).unwrap();
        assert_eq!(a, b);
        // particle 3 alone sees the same noise as inside the ensemble
        let single = ParticleEnsemble::replicate(&[0.0; 6], 4);
        let c = sde_evolve(&p, &single, 1e-2, &[0.5], SdeScheme::EulerMaruyama, 9).unwrap();
        assert_eq!(c[0].ensemble.point(3), a[0].ensemble.point(3));
        assert_ne!(a[0].ensemble.point(0), a[0].ensemble.point(1));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = params(0.0, 1.0, vec![1.0]);
        let init = ParticleEnsemble::replicate(&[0.0, 0.0], 2);
        assert!(sde_evolve(&p, &init, 0.0, &[1.0], SdeScheme::EulerMaruyama, 0).is_err());
        assert!(sde_evolve(&p, &init, 0.1, &[1.0, 0.5], SdeScheme::EulerMaruyama, 0).is_err());
        let wrong = ParticleEnsemble::replicate(&[0.0; 3], 2);
        assert!(sde_evolve(&p, &wrong, 0.1, &[1.0], SdeScheme::EulerMaruyama, 0).is_err());
    }
}
