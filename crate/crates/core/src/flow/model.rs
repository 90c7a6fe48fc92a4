use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::coupling::{BlockNets, CouplingBlockSpec};
use super::latent::{LatentInit, LatentSpec, LatentState};
use super::layout::{ParamLayout, ParameterVector};
use crate::ensemble::ParticleEnsemble;
use crate::error::{ensure_dim, ensure_finite, Error, Result};

/// Normalizing-flow density `p_θ(x) = π(f⁻¹(x)) |det ∂f⁻¹/∂x|`.
///
/// The forward map `f` (latent → data) applies the coupling blocks in list
/// order; the inverse applies them in reverse.
#[derive(Debug, Clone)]
pub struct DensityModel {
    latent_spec: LatentSpec,
    blocks: Vec<CouplingBlockSpec>,
    params: ParameterVector,
    nets: Vec<BlockNets>,
    latent: LatentState,
}

impl DensityModel {
    /// A model whose flow is exactly the identity: every subnetwork output
    /// layer is zero, hidden layers are randomized from `seed`.
    pub fn init_identity(
        latent: LatentSpec,
        init: &LatentInit,
        blocks: Vec<CouplingBlockSpec>,
        seed: u64,
    ) -> Result<Self> {
        let (layout, nets) = Self::build_layout(&latent, &blocks)?;
        let mut values = vec![0.0; layout.total()];
        let latent_params = init.encode(&latent)?;
        values[..latent_params.len()].copy_from_slice(&latent_params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for net in nets.iter().flat_map(|b| b.nets()) {
            let scale = 1.0 / (net.n_in as f64).sqrt();
            for w in &mut values[net.w1()..net.b1()] {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Self::assemble(latent, blocks, layout, nets, values)
    }

    /// Rebuilds a model from explicit parameter values (e.g. a checkpoint).
    pub fn from_parts(latent: LatentSpec, blocks: Vec<CouplingBlockSpec>, values: Vec<f64>) -> Result<Self> {
        let (layout, nets) = Self::build_layout(&latent, &blocks)?;
        Self::assemble(latent, blocks, layout, nets, values)
    }

    fn assemble(
        latent_spec: LatentSpec,
        blocks: Vec<CouplingBlockSpec>,
        layout: ParamLayout,
        nets: Vec<BlockNets>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let params = ParameterVector::new(values, layout)?;
        let latent = LatentState::new(latent_spec, &params.values()[..latent_spec.param_count()])?;
        Ok(Self {
            latent_spec,
            blocks,
            params,
            nets,
            latent,
        })
    }

    fn build_layout(latent: &LatentSpec, blocks: &[CouplingBlockSpec]) -> Result<(ParamLayout, Vec<BlockNets>)> {
        let d = latent.dim;
        if d == 0 {
            return Err(Error::Precondition("dimension must be positive".into()));
        }
        if !blocks.is_empty() && d < 2 {
            return Err(Error::Precondition("coupling blocks need dimension >= 2".into()));
        }
        for b in blocks {
            b.validate(d)?;
        }
        let mut layout = ParamLayout::new();
        layout.push("latent.mu", d);
        layout.push("latent.cov_factor", latent.cov_factor_len());
        if latent.has_nu() {
            layout.push("latent.nu_raw", 1);
        }
        let mut nets = Vec::with_capacity(blocks.len());
        for (i, spec) in blocks.iter().enumerate() {
            let (block, groups) = BlockNets::layout(i, spec, layout.total());
            for (name, start, len) in groups {
                let at = layout.push(name, len);
                debug_assert_eq!(at, start);
            }
            nets.push(block);
        }
        layout.validate()?;
        Ok((layout, nets))
    }

    pub fn dim(&self) -> usize {
        self.latent_spec.dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn latent_spec(&self) -> &LatentSpec {
        &self.latent_spec
    }

    pub fn blocks(&self) -> &[CouplingBlockSpec] {
        &self.blocks
    }

    /// Replaces θ. On error the model is left unchanged.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        ensure_dim(self.params.len(), values.len())?;
        let latent = LatentState::new(self.latent_spec, &values[..self.latent_spec.param_count()])?;
        self.params.set_values(values)?;
        self.latent = latent;
        Ok(())
    }

    /// Draws every parameter uniformly from `[-magnitude, magnitude]`.
    pub fn randomize<R: Rng + ?Sized>(&mut self, magnitude: f64, rng: &mut R) -> Result<()> {
        let values: Vec<f64> = (0..self.param_count())
            .map(|_| rng.random_range(-magnitude..=magnitude))
            .collect();
        self.set_params(&values)
    }

    pub fn with_params(&self, values: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(values)?;
        Ok(m)
    }

    pub(crate) fn nets(&self) -> &[BlockNets] {
        &self.nets
    }

    pub(crate) fn latent(&self) -> &LatentState {
        &self.latent
    }

    /// Current Student-t degrees of freedom, if any.
    pub fn nu(&self) -> Option<f64> {
        self.latent.nu()
    }

    pub fn latent_mean(&self) -> &[f64] {
        self.latent.mean()
    }

    /// Latent covariance Σ, row-major.
    pub fn latent_covariance(&self) -> Vec<f64> {
        self.latent.covariance()
    }

    /// `x = f(z)` and `log|det ∂f/∂z|`.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        ensure_dim(self.dim(), z.len())?;
        ensure_finite(z, "forward input")?;
        let p = self.params.values();
        let mut x = z.to_vec();
        let mut logdet = 0.0;
        for block in &self.nets {
            logdet += block.forward(p, &mut x);
        }
        ensure_finite(&x, "forward output")?;
        if !logdet.is_finite() {
            return Err(Error::NonFinite("forward log-determinant"));
        }
        Ok((x, logdet))
    }

    /// `z = f⁻¹(x)` and `log|det ∂f⁻¹/∂x|`.
    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        ensure_dim(self.dim(), x.len())?;
        ensure_finite(x, "inverse input")?;
        let p = self.params.values();
        let mut z = x.to_vec();
        let mut logdet = 0.0;
        for block in self.nets.iter().rev() {
            logdet += block.inverse(p, &mut z).0;
        }
        ensure_finite(&z, "inverse output")?;
        if !logdet.is_finite() {
            return Err(Error::NonFinite("inverse log-determinant"));
        }
        Ok((z, logdet))
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let (z, logdet) = self.inverse(x)?;
        let lp = self.latent.log_prob(&z) + logdet;
        if lp.is_finite() {
            Ok(lp)
        } else {
            Err(Error::NonFinite("log density"))
        }
    }

    pub fn latent_log_prob(&self, z: &[f64]) -> Result<f64> {
        ensure_dim(self.dim(), z.len())?;
        Ok(self.latent.log_prob(z))
    }

    pub fn latent_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.latent.sample(rng)
    }

    /// n independent latent draws.
    pub fn sample_latent<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ParticleEnsemble> {
        if n == 0 {
            return Err(Error::Precondition("sample count must be at least 1".into()));
        }
        let mut points = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            points.extend(self.latent.sample(rng));
        }
        ParticleEnsemble::new(self.dim(), points, None)
    }

    /// Maps latent draws through the flow.
    pub fn push_forward(&self, latent: &ParticleEnsemble) -> Result<ParticleEnsemble> {
        ensure_dim(self.dim(), latent.dim())?;
        let mut points = Vec::with_capacity(latent.as_flat().len());
        for z in latent.iter() {
            points.extend(self.forward(z)?.0);
        }
        ParticleEnsemble::new(self.dim(), points, latent.seed)
    }

    /// n independent draws `x = f(z)`, `z ~ π`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ParticleEnsemble> {
        let z = self.sample_latent(n, rng)?;
        self.push_forward(&z)
    }
}
