//! Time-dependent variational evolution of normalizing-flow densities under
//! Fokker-Planck equations, with reference solvers and observables.

pub mod diff;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod integrator;
pub mod observables;
pub mod pde;
pub mod reference;
pub mod tdvp;

pub use crate::ensemble::ParticleEnsemble;
pub use crate::error::{Error, Result};
pub use crate::flow::{
    CouplingBlockSpec, CovarianceParam, DensityModel, LatentFamily, LatentInit, LatentSpec, ParamLayout,
    ParameterVector,
};
pub use crate::pde::{Drift, DriftField, FokkerPlanckProblem, PhaseSpaceParams};
