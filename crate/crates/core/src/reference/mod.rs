//! Independent solutions used to check the variational evolution.

pub mod oracles;
pub mod radial;
pub mod sde;

pub use oracles::{gaussian_entropy, gaussian_heat_oracle, gibbs_oracle, GaussianState, GibbsState};
pub use radial::{radial_heat_evolve, RadialGridConfig, RadialProfile, RadialScheme};
pub use sde::{sde_evolve, SdeScheme, Snapshot};
