use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use super::*;
use crate::diff::fd;

fn spec(family: LatentFamily, dim: usize, covariance: CovarianceParam) -> LatentSpec {
    LatentSpec {
        family,
        dim,
        covariance,
    }
}

fn blocks(dim: usize, n: usize, include_t: bool, seed: u64) -> Vec<CouplingBlockSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| CouplingBlockSpec::random(dim, include_t, &mut rng)).collect()
}

fn random_model(dim: usize, family: LatentFamily, include_t: bool, magnitude: f64, seed: u64) -> DensityModel {
    let nu = (family == LatentFamily::StudentT).then_some(3.0);
    let mut m = DensityModel::init_identity(
        spec(family, dim, CovarianceParam::CholeskyLower),
        &LatentInit::isotropic(vec![0.0; dim], 1.0, nu),
        blocks(dim, 3, include_t, seed),
        seed,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    m.randomize(magnitude, &mut rng).unwrap();
    m
}

#[test]
fn default_parameter_counts() {
    let heat = DensityModel::init_identity(
        spec(LatentFamily::Gaussian, 8, CovarianceParam::IdentityPlusAat),
        &LatentInit::standard(8),
        blocks(8, 4, false, 1),
        1,
    )
    .unwrap();
    assert_eq!(heat.param_count(), 392);
    let groups: Vec<&str> = heat.params().layout().groups().iter().map(|g| g.name.as_str()).collect();
    assert_eq!(&groups[..4], &["latent.mu", "latent.cov_factor", "block[0].s1", "block[0].s2"]);

    let t_heat = DensityModel::init_identity(
        spec(LatentFamily::StudentT, 8, CovarianceParam::IdentityPlusAat),
        &LatentInit::isotropic(vec![0.0; 8], 1.0, Some(2.0)),
        blocks(8, 4, false, 1),
        1,
    )
    .unwrap();
    assert_eq!(t_heat.param_count(), 393);
    assert_eq!(t_heat.params().group("latent.nu_raw").unwrap(), &[2f64.ln()]);

    let phase = DensityModel::init_identity(
        spec(LatentFamily::Gaussian, 6, CovarianceParam::CholeskyLower),
        &LatentInit::standard(6),
        blocks(6, 4, true, 1),
        1,
    )
    .unwrap();
    assert_eq!(phase.param_count(), 27 + 4 * 96);
}

#[test]
fn identity_init_is_exact() {
    let m = DensityModel::init_identity(
        spec(LatentFamily::Gaussian, 2, CovarianceParam::IdentityPlusAat),
        &LatentInit::standard(2),
        blocks(2, 4, true, 9),
        9,
    )
    .unwrap();
    let (x, ld) = m.forward(&[1.0, 2.0]).unwrap();
    assert_eq!(x, vec![1.0, 2.0]);
    assert_eq!(ld, 0.0);
    let (z, ld) = m.inverse(&[3.0, -1.0]).unwrap();
    assert_eq!(z, vec![3.0, -1.0]);
    assert_eq!(ld, 0.0);
    let ln2pi = (2.0 * PI).ln();
    assert!((m.log_prob(&[0.0, 0.0]).unwrap() + ln2pi).abs() < 1e-12);
    assert!((m.log_prob(&[1.0, 0.0]).unwrap() + ln2pi + 0.5).abs() < 1e-12);
    assert!((m.log_prob(&[0.0, 0.0]).unwrap() + 1.837877).abs() < 1e-6);
}

#[test]
fn origin_densities_in_eight_dimensions() {
    let gauss = DensityModel::init_identity(
        spec(LatentFamily::Gaussian, 8, CovarianceParam::IdentityPlusAat),
        &LatentInit::standard(8),
        blocks(8, 4, false, 3),
        3,
    )
    .unwrap();
    assert!((gauss.log_prob(&[0.0; 8]).unwrap() + 4.0 * (2.0 * PI).ln()).abs() < 1e-12);
    let t = DensityModel::init_identity(
        spec(LatentFamily::StudentT, 8, CovarianceParam::IdentityPlusAat),
        &LatentInit::isotropic(vec![0.0; 8], 1.0, Some(2.0)),
        blocks(8, 4, false, 3),
        3,
    )
    .unwrap();
    let expect = 24f64.ln() - 4.0 * (2.0 * PI).ln();
    assert!((t.log_prob(&[0.0; 8]).unwrap() - expect).abs() < 1e-12);
    assert!((expect + 4.17346).abs() < 1e-5);
}

#[test]
fn composition_logdet_is_sum_of_blocks() {
    let full = random_model(4, LatentFamily::Gaussian, true, 0.7, 11);
    let values = full.params().values();
    let latent_len = full.latent_spec().param_count();
    let first_len = full.blocks()[0].param_count();
    let second_len = full.blocks()[1].param_count();
    let z = [0.3, -0.8, 1.1, 0.4];

    let mut prefix = values[..latent_len + first_len + second_len].to_vec();
    let two = DensityModel::from_parts(*full.latent_spec(), full.blocks()[..2].to_vec(), prefix.clone()).unwrap();
    prefix.truncate(latent_len + first_len);
    let one = DensityModel::from_parts(*full.latent_spec(), full.blocks()[..1].to_vec(), prefix).unwrap();
    let mut second_only = values[..latent_len].to_vec();
    second_only.extend_from_slice(&values[latent_len + first_len..latent_len + first_len + second_len]);
    let other = DensityModel::from_parts(*full.latent_spec(), full.blocks()[1..2].to_vec(), second_only).unwrap();

    let (y, ld1) = one.forward(&z).unwrap();
    let (x2, ld2) = other.forward(&y).unwrap();
    let (x, ld) = two.forward(&z).unwrap();
    assert!((ld - ld1 - ld2).abs() < 1e-13);
    for (a, b) in x.iter().zip(&x2) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn sampling_mean_matches_latent() {
    let mean = vec![0.5, -1.0, 2.0];
    let m = DensityModel::init_identity(
        spec(LatentFamily::Gaussian, 3, CovarianceParam::CholeskyLower),
        &LatentInit::isotropic(mean.clone(), 4.0, None),
        blocks(3, 2, false, 5),
        5,
    )
    .unwrap();
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let s = m.sample(n, &mut rng).unwrap();
    assert_eq!(s.len(), n);
    for (k, mu) in mean.iter().enumerate() {
        let avg = s.iter().map(|p| p[k]).sum::<f64>() / n as f64;
        assert!((avg - mu).abs() < 4.0 * 2.0 / (n as f64).sqrt(), "coordinate {k}: {avg}");
    }
    assert!(m.sample(0, &mut rng).is_err());
}

#[test]
fn student_t_samples_are_heavy_tailed() {
    let m = DensityModel::init_identity(
        spec(LatentFamily::StudentT, 2, CovarianceParam::CholeskyLower),
        &LatentInit::isotropic(vec![0.0; 2], 1.0, Some(2.0)),
        vec![],
        0,
    )
    .unwrap();
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = m.sample(n, &mut rng).unwrap();
    let mut xs: Vec<f64> = s.iter().map(|p| p[0]).collect();
    xs.sort_by(f64::total_cmp);
    let median = xs[n / 2];
    assert!(median.abs() < 0.05, "median {median}");
    // For ν=2 the tail P(|X| > 4) = 1 − 4/√18 ≈ 0.0572; a unit Gaussian gives 6e-5.
    let tail = xs.iter().filter(|v| v.abs() > 4.0).count() as f64 / n as f64;
    assert!((tail - (1.0 - 4.0 / 18f64.sqrt())).abs() < 0.01, "tail {tail}");
}

#[test]
fn log_prob_expectation_matches_gaussian_entropy() {
    let d = 4;
    let m = DensityModel::init_identity(
        spec(LatentFamily::Gaussian, d, CovarianceParam::CholeskyLower),
        &LatentInit::standard(d),
        blocks(d, 2, true, 4),
        4,
    )
    .unwrap();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = m.sample(n, &mut rng).unwrap();
    let lp: Vec<f64> = s.iter().map(|x| m.log_prob(x).unwrap()).collect();
    let mean = lp.iter().sum::<f64>() / n as f64;
    let var = lp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let expect = -0.5 * d as f64 * (1.0 + (2.0 * PI).ln());
    assert!((mean - expect).abs() < 3.0 * (var / n as f64).sqrt());
}

#[test]
fn importance_sampled_normalization() {
    // ∫ p(x) dx = E_q[p/q] with q a wide Gaussian proposal.
    let m = random_model(2, LatentFamily::Gaussian, true, 0.4, 21);
    let sigma = 3.0;
    let n = 40_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut w = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..2)
            .map(|_| sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let log_q = -(2.0 * PI * sigma * sigma).ln() - 0.5 * (x[0] * x[0] + x[1] * x[1]) / (sigma * sigma);
        w.push((m.log_prob(&x).unwrap() - log_q).exp());
    }
    let mean = w.iter().sum::<f64>() / n as f64;
    let se = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 4.0 * se.max(1e-3), "mean {mean} se {se}");
}

#[test]
fn set_params_rejects_bad_input_and_keeps_state() {
    let mut m = random_model(3, LatentFamily::StudentT, false, 0.5, 2);
    let before = m.params().values().to_vec();
    let mut bad = before.clone();
    bad[0] = f64::NAN;
    assert!(m.set_params(&bad).is_err());
    assert!(m.set_params(&before[1..]).is_err());
    assert_eq!(m.params().values(), before.as_slice());
}

#[test]
fn rejects_mismatched_blocks() {
    let b = blocks(4, 1, false, 0);
    assert!(DensityModel::init_identity(
        spec(LatentFamily::Gaussian, 3, CovarianceParam::CholeskyLower),
        &LatentInit::standard(3),
        b,
        0
    )
    .is_err());
    assert!(DensityModel::init_identity(
        spec(LatentFamily::Gaussian, 2, CovarianceParam::CholeskyLower),
        &LatentInit::standard(3),
        vec![],
        0
    )
    .is_err());
}

#[test]
fn checkpoint_round_trip() {
    let m = random_model(3, LatentFamily::StudentT, true, 0.5, 12);
    let bytes = checkpoint::encode(&m, 1.25).unwrap();
    let c = checkpoint::decode(&bytes).unwrap();
    assert_eq!(c.t, 1.25);
    assert_eq!(c.model.params().values(), m.params().values());
    assert_eq!(c.model.blocks(), m.blocks());
    let x = [0.1, 0.2, -0.3];
    assert_eq!(c.model.log_prob(&x).unwrap(), m.log_prob(&x).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::write(&path, &m, 0.5).unwrap();
    assert_eq!(checkpoint::read(&path).unwrap().t, 0.5);

    for cut in [0, 7, 8, 15, 16, bytes.len() - 1] {
        assert!(checkpoint::decode(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(checkpoint::decode(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(checkpoint::decode(&extra).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn round_trip_is_exact(seed in any::<u64>(), d in 2usize..7, t_nets in any::<bool>(), student in any::<bool>()) {
        let family = if student { LatentFamily::StudentT } else { LatentFamily::Gaussian };
        let m = random_model(d, family, t_nets, 1.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (x, ld_f) = m.forward(&z).unwrap();
            let (back, ld_i) = m.inverse(&x).unwrap();
            for (a, b) in back.iter().zip(&z) {
                worst = worst.max((a - b).abs());
            }
            prop_assert!((ld_f + ld_i).abs() < 1e-9);
        }
        prop_assert!(worst < 1e-9, "worst round-trip error {}", worst);
    }

    #[test]
    fn forward_logdet_matches_numeric_jacobian(seed in any::<u64>(), d in 2usize..5) {
        let m = random_model(d, LatentFamily::Gaussian, true, 1.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, ld) = m.forward(&z).unwrap();
        let numeric = fd::forward_logdet(&m, &z, 1e-5).unwrap();
        prop_assert!((ld - numeric).abs() < 1e-5, "{} vs {}", ld, numeric);
    }

    #[test]
    fn latent_consistency(seed in any::<u64>(), d in 2usize..6, student in any::<bool>()) {
        let family = if student { LatentFamily::StudentT } else { LatentFamily::Gaussian };
        let m = random_model(d, family, true, 1.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = m.latent_sample(&mut rng);
        let (x, ld) = m.forward(&z).unwrap();
        let lhs = m.log_prob(&x).unwrap() + ld;
        prop_assert!((lhs - m.latent_log_prob(&z).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn identity_holds_for_any_hidden_weights(seed in any::<u64>(), d in 2usize..9) {
        let m = DensityModel::init_identity(
            spec(LatentFamily::Gaussian, d, CovarianceParam::IdentityPlusAat),
            &LatentInit::standard(d),
            blocks(d, 4, true, seed),
            seed,
        ).unwrap();
        let z: Vec<f64> = (0..d).map(|i| i as f64 - 1.5).collect();
        let (x, ld) = m.forward(&z).unwrap();
        prop_assert_eq!(x, z);
        prop_assert_eq!(ld, 0.0);
    }
}
