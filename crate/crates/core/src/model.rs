//! Dynamical-system abstraction consumed by the forward and adjoint
//! integrators.

use nalgebra::{DMatrix, DVector};

/// An autonomous ODE system y' = f(y) with exact Jacobian actions.
///
/// `jac_vec` and `jac_t_vec` must be an exact adjoint pair:
/// ⟨J(y)v, w⟩ = ⟨v, J(y)ᵀw⟩ for all probes.
pub trait OdeModel {
    fn dim(&self) -> usize;

    fn rhs(&self, y: &DVector<f64>) -> DVector<f64>;

    /// J(y)·v
    fn jac_vec(&self, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;

    /// J(y)ᵀ·v
    fn jac_t_vec(&self, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
}

/// Choice of the matrix Tₙ fed to the ψ matrix functions.
///
/// The W-formulation keeps its order of convergence for an arbitrary Tₙ;
/// the discrete adjoint formulae additionally rely on Tₙ being treated as
/// independent of the step state.
#[derive(Debug, Clone)]
pub enum WMatrix {
    /// Tₙ = J(yₙ), re-evaluated at the start of every step.
    ExactJacobian,
    /// A fixed matrix used for every step.
    Frozen(DMatrix<f64>),
    /// Tₙ = J(yₙ) + E for a fixed perturbation E.
    PerturbedJacobian(DMatrix<f64>),
}

impl WMatrix {
    /// Tₙ·v with Tₙ captured at `y_step`.
    pub fn apply(&self, model: &dyn OdeModel, y_step: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        match self {
            WMatrix::ExactJacobian => model.jac_vec(y_step, v),
            WMatrix::Frozen(t) => t * v,
            WMatrix::PerturbedJacobian(e) => model.jac_vec(y_step, v) + e * v,
        }
    }

    /// Tₙᵀ·v with Tₙ captured at `y_step`.
    pub fn apply_transpose(
        &self,
        model: &dyn OdeModel,
        y_step: &DVector<f64>,
        v: &DVector<f64>,
    ) -> DVector<f64> {
        match self {
            WMatrix::ExactJacobian => model.jac_t_vec(y_step, v),
            WMatrix::Frozen(t) => t.transpose() * v,
            WMatrix::PerturbedJacobian(e) => model.jac_t_vec(y_step, v) + e.transpose() * v,
        }
    }
}

/// An ODE family y' = f(y, θ) with analytic derivative actions in both the
/// state and the parameters. Used to build augmented systems for parameter
/// estimation.
pub trait ParametrizedOde {
    fn state_dim(&self) -> usize;
    fn param_count(&self) -> usize;

    fn rhs(&self, y: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;

    /// (∂f/∂y)·v
    fn jac_vec(&self, y: &DVector<f64>, theta: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;

    /// (∂f/∂y)ᵀ·v
    fn jac_t_vec(&self, y: &DVector<f64>, theta: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;

    /// (∂f/∂θ)·p, p of length `param_count`.
    fn dtheta_vec(&self, y: &DVector<f64>, theta: &DVector<f64>, p: &DVector<f64>) -> DVector<f64>;

    /// (∂f/∂θ)ᵀ·w, w of length `state_dim`.
    fn dtheta_t_vec(&self, y: &DVector<f64>, theta: &DVector<f64>, w: &DVector<f64>)
        -> DVector<f64>;
}
