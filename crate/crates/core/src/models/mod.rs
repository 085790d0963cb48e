//! Concrete test systems: the Lorenz-96 chaotic lattice and a 1-D
//! nonlinear-diffusion surrogate with a saturating material law.

mod diffusion;
mod lorenz96;

pub use diffusion::{Diffusion1D, MaterialLaw};
pub use lorenz96::{lorenz96_initial_profile, lorenz96_observation_matrix, Lorenz96};
