//! The variational ansatz: a stack of affine coupling blocks over a trainable
//! Gaussian or Student-t latent distribution.

pub mod checkpoint;
mod coupling;
mod latent;
mod layout;
pub(crate) mod mlp;
mod model;

pub use coupling::CouplingBlockSpec;
pub use latent::{CovarianceParam, LatentFamily, LatentInit, LatentSpec};
pub use layout::{ParamGroup, ParamLayout, ParameterVector};
pub use mlp::SCALE_CLAMP;
pub use model::DensityModel;

#[cfg(test)]
mod tests;
