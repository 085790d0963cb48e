//! 4D-Var problem assembly: cost and gradient of
//!
//!   Φ(θ) = ½ (θ − θ_b)ᵀ B⁻¹ (θ − θ_b)
//!        + ½ Σᵢ (H(y_{jᵢ}) − zᵢ)ᵀ Rᵢ⁻¹ (H(y_{jᵢ}) − zᵢ),
//!
//! with the model trajectory as a strong constraint. The gradient is the
//! background term plus a discrete adjoint sweep with the observation
//! residuals injected as forcings at their step indices, which realizes
//! the (dy_{jᵢ}/dθ)ᵀ chain factors exactly for the discrete map.
//!
//! Also provides covariance models with Cholesky-based solves and
//! sampling, the synthetic twin-experiment generator, and the constant
//! parameter-state augmentation for estimating θ inside f(y, θ).

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::adjoint::{parameter_gradient, AdjointSeed, GradientMode};
use crate::error::{Error, Result};
use crate::integrator::{integrate, StepTape};
use crate::matfun::KrylovConfig;
use crate::model::{OdeModel, ParametrizedOde, WMatrix};
use crate::tableau::Tableau;

/// Observation map H with its adjoint action (dH/dy)ᵀ.
pub trait ObservationOperator: Send + Sync {
    fn obs_dim(&self) -> usize;
    fn apply(&self, y: &DVector<f64>) -> DVector<f64>;
    /// (dH/dy)ᵀ·w evaluated at y.
    fn adjoint_apply(&self, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
}

/// Constant-matrix observation operator.
#[derive(Debug, Clone)]
pub struct LinearObservation {
    pub matrix: DMatrix<f64>,
}

impl LinearObservation {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        LinearObservation { matrix }
    }

    /// The 34-component Lorenz-96 operator.
    pub fn lorenz96() -> Self {
        Self::new(crate::models::lorenz96_observation_matrix())
    }
}

impl ObservationOperator for LinearObservation {
    fn obs_dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.matrix * y
    }
    fn adjoint_apply(&self, _y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.matrix.transpose() * w
    }
}

/// SPD covariance with a stored Cholesky factor; every inverse application
/// and every sample goes through the factor, never an explicit inverse.
pub struct CovarianceModel {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl CovarianceModel {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::NonSquare {
                rows: n,
                cols: matrix.ncols(),
            });
        }
        let asym = (&matrix - matrix.transpose()).abs().max();
        let scale = matrix.abs().max().max(1.0);
        if asym > 1e-12 * scale {
            return Err(Error::NotSpd {
                context: "matrix not symmetric",
            });
        }
        let chol = Cholesky::new(matrix.clone()).ok_or(Error::NotSpd {
            context: "Cholesky factorization failed",
        })?;
        Ok(CovarianceModel { matrix, chol })
    }

    pub fn diagonal(variances: &DVector<f64>) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(variances))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// C⁻¹·v via two triangular solves.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// vᵀ·C⁻¹·v.
    pub fn quadform(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.solve(v))
    }

    /// A zero-mean draw with covariance C: L·ξ with ξ standard normal.
    pub fn sample(&self, rng: &mut ChaCha20Rng) -> DVector<f64> {
        let xi = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        self.chol.l() * xi
    }
}

/// One observation batch at a step index.
pub struct Observation {
    pub step: usize,
    pub value: DVector<f64>,
    pub r: CovarianceModel,
}

/// What the control vector θ parameterizes.
pub enum EstimationMode {
    /// θ is the full initial state.
    InitialCondition,
    /// θ is a parameter block appended to a fixed initial state; the model
    /// must be the matching augmented system.
    AugmentedParameters { base_state: DVector<f64> },
}

pub struct FourDVarProblem {
    pub model: Box<dyn OdeModel + Send + Sync>,
    pub tableau: Tableau,
    pub wmatrix: WMatrix,
    pub krylov: KrylovConfig,
    pub theta_b: DVector<f64>,
    pub background: CovarianceModel,
    pub obs: Vec<Observation>,
    pub h: Box<dyn ObservationOperator>,
    pub t0: f64,
    pub tf: f64,
    pub n_steps: usize,
    pub mode: EstimationMode,
}

impl FourDVarProblem {
    pub fn validate(&self) -> Result<()> {
        let dim_theta = match &self.mode {
            EstimationMode::InitialCondition => self.model.dim(),
            EstimationMode::AugmentedParameters { base_state } => {
                if base_state.len() >= self.model.dim() {
                    return Err(Error::ModeMismatch {
                        message: format!(
                            "base state dim {} leaves no parameter block in model dim {}",
                            base_state.len(),
                            self.model.dim()
                        ),
                    });
                }
                self.model.dim() - base_state.len()
            }
        };
        if self.theta_b.len() != dim_theta || self.background.dim() != dim_theta {
            return Err(Error::ModeMismatch {
                message: format!(
                    "background dimension {} does not match control dimension {}",
                    self.theta_b.len(),
                    dim_theta
                ),
            });
        }
        for o in &self.obs {
            if o.step > self.n_steps {
                return Err(Error::Spec {
                    message: format!(
                        "observation step {} outside 0..={}",
                        o.step, self.n_steps
                    ),
                });
            }
            if o.value.len() != self.h.obs_dim() || o.r.dim() != self.h.obs_dim() {
                return Err(Error::Spec {
                    message: "observation dimension mismatch".into(),
                });
            }
        }
        Ok(())
    }

    fn initial_state(&self, theta: &DVector<f64>) -> DVector<f64> {
        match &self.mode {
            EstimationMode::InitialCondition => theta.clone(),
            EstimationMode::AugmentedParameters { base_state } => {
                let mut y = DVector::zeros(self.model.dim());
                y.rows_mut(0, base_state.len()).copy_from(base_state);
                y.rows_mut(base_state.len(), theta.len()).copy_from(theta);
                y
            }
        }
    }

    fn gradient_mode(&self) -> GradientMode {
        match &self.mode {
            EstimationMode::InitialCondition => GradientMode::InitialCondition,
            EstimationMode::AugmentedParameters { base_state } => {
                GradientMode::AugmentedParameters {
                    state_dim: base_state.len(),
                }
            }
        }
    }

    /// Forward integration from the state implied by θ, exposed so
    /// drivers can dump the analysis trajectory.
    pub fn forward(&self, theta: &DVector<f64>) -> Result<StepTape> {
        integrate(
            self.model.as_ref(),
            &self.tableau,
            &self.wmatrix,
            &self.initial_state(theta),
            self.t0,
            self.tf,
            self.n_steps,
            &self.krylov,
        )
    }

    fn cost_from_tape(&self, theta: &DVector<f64>, tape: &StepTape) -> f64 {
        let db = theta - &self.theta_b;
        let mut c = 0.5 * self.background.quadform(&db);
        for o in &self.obs {
            let res = self.h.apply(tape.state_at(o.step)) - &o.value;
            c += 0.5 * o.r.quadform(&res);
        }
        c
    }

    pub fn cost(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(self.cost_from_tape(theta, &self.forward(theta)?))
    }

    pub fn grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.cost_and_grad(theta)?.1)
    }

    /// One forward integration shared by both the cost value and the
    /// adjoint-based gradient.
    pub fn cost_and_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let tape = self.forward(theta)?;
        let c = self.cost_from_tape(theta, &tape);

        let mut forcings: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
        for o in &self.obs {
            let y = tape.state_at(o.step);
            let res = self.h.apply(y) - &o.value;
            let f = self.h.adjoint_apply(y, &o.r.solve(&res));
            forcings
                .entry(o.step)
                .and_modify(|acc| *acc += &f)
                .or_insert(f);
        }
        let terminal = forcings
            .remove(&self.n_steps)
            .unwrap_or_else(|| DVector::zeros(self.model.dim()));
        let seed = AdjointSeed { terminal, forcings };
        let mut g = parameter_gradient(
            self.model.as_ref(),
            &self.wmatrix,
            &tape,
            &self.tableau,
            &seed,
            self.gradient_mode(),
            &self.krylov,
        )?;
        g += self.background.solve(&(theta - &self.theta_b));
        Ok((c, g))
    }
}

/// B = α·I + (1−α)·(σ⊗σ)∘exp(−D²/L²) with cyclic distance
/// D_{ij} = min(|i−j|, K−|i−j|).
pub fn lorenz_background_covariance(
    sigma: &DVector<f64>,
    alpha: f64,
    l: f64,
    k: usize,
) -> Result<CovarianceModel> {
    assert!(k >= 2 && alpha > 0.0 && alpha <= 1.0 && l > 0.0);
    assert_eq!(sigma.len(), k);
    let b = DMatrix::from_fn(k, k, |i, j| {
        let d = (i as f64 - j as f64).abs().min(k as f64 - (i as f64 - j as f64).abs());
        let mut v = (1.0 - alpha) * sigma[i] * sigma[j] * (-d * d / (l * l)).exp();
        if i == j {
            v += alpha;
        }
        v
    });
    CovarianceModel::new(b)
}

/// Constant-parameter augmentation [y; τ]' = [f(y, τ); 0] of a
/// parametrized system; the block Jacobian [[∂f/∂y, ∂f/∂θ],[0,0]] and its
/// transpose are assembled from the inner derivative actions.
#[derive(Clone)]
pub struct AugmentedModel<M: ParametrizedOde> {
    pub inner: M,
}

impl<M: ParametrizedOde> AugmentedModel<M> {
    pub fn new(inner: M) -> Self {
        AugmentedModel { inner }
    }

    fn split(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let k = self.inner.state_dim();
        (
            z.rows(0, k).clone_owned(),
            z.rows(k, self.inner.param_count()).clone_owned(),
        )
    }
}

impl<M: ParametrizedOde> OdeModel for AugmentedModel<M> {
    fn dim(&self) -> usize {
        self.inner.state_dim() + self.inner.param_count()
    }

    fn rhs(&self, z: &DVector<f64>) -> DVector<f64> {
        let k = self.inner.state_dim();
        let (y, theta) = self.split(z);
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, k).copy_from(&self.inner.rhs(&y, &theta));
        out
    }

    fn jac_vec(&self, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let k = self.inner.state_dim();
        let (y, theta) = self.split(z);
        let (vy, vt) = self.split(v);
        let top = self.inner.jac_vec(&y, &theta, &vy) + self.inner.dtheta_vec(&y, &theta, &vt);
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, k).copy_from(&top);
        out
    }

    fn jac_t_vec(&self, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let k = self.inner.state_dim();
        let p = self.inner.param_count();
        let (y, theta) = self.split(z);
        let wy = w.rows(0, k).clone_owned();
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, k)
            .copy_from(&self.inner.jac_t_vec(&y, &theta, &wy));
        out.rows_mut(k, p)
            .copy_from(&self.inner.dtheta_t_vec(&y, &theta, &wy));
        out
    }
}

/// Protocol for the Lorenz-96 twin experiment.
pub struct Lorenz96Protocol {
    pub k: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub obs_steps: Vec<usize>,
    pub spinup_steps: usize,
    pub seed: u64,
    /// Set false to obtain θ_b = θ_true and exact observations.
    pub with_noise: bool,
    pub sigma_b_factor: f64,
    pub sigma_obs_factor: f64,
    /// When true, σ_obs = (factor · mean signal)⁻¹ instead of
    /// σ_obs = factor · |mean signal|. The inverse form makes the
    /// observation noise much larger than the signal, so the analysis is
    /// dominated by the well-conditioned background term.
    pub sigma_obs_inverse: bool,
    pub alpha: f64,
    pub corr_length: f64,
}

impl Default for Lorenz96Protocol {
    fn default() -> Self {
        Lorenz96Protocol {
            k: 40,
            dt: 0.0003,
            n_steps: 1000,
            obs_steps: (1..=10).map(|i| 100 * i).collect(),
            spinup_steps: 10,
            seed: 0,
            with_noise: true,
            sigma_b_factor: 0.03,
            sigma_obs_factor: 0.005,
            sigma_obs_inverse: false,
            alpha: 0.1,
            corr_length: 4.0,
        }
    }
}

/// Everything the twin experiment produces.
pub struct Lorenz96Experiment {
    pub theta_true: DVector<f64>,
    pub theta_b: DVector<f64>,
    pub background: CovarianceModel,
    pub obs: Vec<Observation>,
    pub sigma_obs: f64,
}

/// Builds the synthetic Lorenz-96 experiment: spin-up to the truth, a
/// correlated background perturbation, and noisy observations of the true
/// trajectory. Fully deterministic for a given seed.
pub fn synthesize_experiment(
    model: &dyn OdeModel,
    tableau: &Tableau,
    protocol: &Lorenz96Protocol,
    krylov: &KrylovConfig,
) -> Result<Lorenz96Experiment> {
    use rand::SeedableRng;
    let k = protocol.k;
    let mut rng = ChaCha20Rng::seed_from_u64(protocol.seed);
    let w = WMatrix::ExactJacobian;

    // Spin-up from the structured profile to the truth at t = 0.
    let profile = crate::models::lorenz96_initial_profile(k);
    let spin_span = protocol.spinup_steps as f64 * protocol.dt;
    let theta_true = if protocol.spinup_steps > 0 {
        integrate(
            model,
            tableau,
            &w,
            &profile,
            -spin_span,
            0.0,
            protocol.spinup_steps,
            krylov,
        )?
        .y_final
    } else {
        profile
    };

    let sigma = theta_true.map(|v| protocol.sigma_b_factor * v.abs());
    let background = lorenz_background_covariance(&sigma, protocol.alpha, protocol.corr_length, k)?;
    let theta_b = if protocol.with_noise {
        &theta_true + background.sample(&mut rng)
    } else {
        theta_true.clone()
    };

    // True trajectory over the assimilation window.
    let tf = protocol.n_steps as f64 * protocol.dt;
    let tape = integrate(model, tableau, &w, &theta_true, 0.0, tf, protocol.n_steps, krylov)?;
    let h = LinearObservation::lorenz96();

    let clean: Vec<DVector<f64>> = protocol
        .obs_steps
        .iter()
        .map(|&j| h.apply(tape.state_at(j)))
        .collect();
    let mean: f64 = clean.iter().map(|v| v.sum()).sum::<f64>()
        / (clean.len() * h.obs_dim()) as f64;
    let sigma_obs = if protocol.sigma_obs_inverse {
        (protocol.sigma_obs_factor * mean).abs().recip()
    } else {
        protocol.sigma_obs_factor * mean.abs()
    };

    let mut obs = Vec::with_capacity(clean.len());
    for (&j, hy) in protocol.obs_steps.iter().zip(&clean) {
        let noise = if protocol.with_noise {
            DVector::from_fn(h.obs_dim(), |_, _| {
                sigma_obs * rng.sample::<f64, _>(StandardNormal)
            })
        } else {
            DVector::zeros(h.obs_dim())
        };
        obs.push(Observation {
            step: j,
            value: hy + noise,
            r: CovarianceModel::diagonal(&DVector::from_element(
                h.obs_dim(),
                sigma_obs * sigma_obs,
            ))?,
        });
    }

    Ok(Lorenz96Experiment {
        theta_true,
        theta_b,
        background,
        obs,
        sigma_obs,
    })
}

/// Assembles the full 4D-Var problem for a synthesized experiment.
pub fn lorenz96_problem(
    experiment: Lorenz96Experiment,
    protocol: &Lorenz96Protocol,
    krylov: KrylovConfig,
) -> FourDVarProblem {
    FourDVarProblem {
        model: Box::new(crate::models::Lorenz96::grouped_form(protocol.k)),
        tableau: Tableau::third_order(),
        wmatrix: WMatrix::ExactJacobian,
        krylov,
        theta_b: experiment.theta_b,
        background: experiment.background,
        obs: experiment.obs,
        h: Box::new(LinearObservation::lorenz96()),
        t0: 0.0,
        tf: protocol.n_steps as f64 * protocol.dt,
        n_steps: protocol.n_steps,
        mode: EstimationMode::InitialCondition,
    }
}

/// Scalar observable of the augmented diffusion system: the spatial
/// average of du/dt over the observation window, evaluated as the same
/// average of the right-hand side so that it depends on both u and θ.
pub struct DiffusionRhsObservation {
    pub sys: crate::models::Diffusion1D,
}

impl ObservationOperator for DiffusionRhsObservation {
    fn obs_dim(&self) -> usize {
        1
    }

    fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        let m = self.sys.m;
        let u = z.rows(0, m).clone_owned();
        let theta = z.rows(m, 4).clone_owned();
        DVector::from_element(1, self.sys.observable(&u, &theta))
    }

    fn adjoint_apply(&self, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let m = self.sys.m;
        let u = z.rows(0, m).clone_owned();
        let theta = z.rows(m, 4).clone_owned();
        let mut out = DVector::zeros(m + 4);
        out.rows_mut(0, m)
            .copy_from(&(self.sys.observable_grad_u(&u, &theta) * w[0]));
        out.rows_mut(m, 4)
            .copy_from(&(self.sys.observable_grad_theta(&u, &theta) * w[0]));
        out
    }
}

/// Protocol for the diffusion-surrogate parameter-estimation experiment.
pub struct DiffusionProtocol {
    pub dt: f64,
    pub n_steps: usize,
    pub obs_steps: Vec<usize>,
    pub seed: u64,
    pub with_noise: bool,
    /// Relative background standard deviation per parameter.
    pub sigma_b_factor: f64,
    /// σ_obs as a fraction of the RMS clean signal.
    pub sigma_obs_factor: f64,
    /// Fixed relative offsets defining θ_b = θ_true ∘ (1 + offset).
    pub background_offset: [f64; 4],
}

impl Default for DiffusionProtocol {
    fn default() -> Self {
        DiffusionProtocol {
            dt: 2e-5,
            n_steps: 1000,
            obs_steps: (1..=10).map(|i| 100 * i).collect(),
            seed: 0,
            with_noise: true,
            sigma_b_factor: 0.3,
            sigma_obs_factor: 0.001,
            background_offset: [0.15, -0.15, 0.15, 0.15],
        }
    }
}

/// Builds the augmented diffusion 4D-Var problem (parameters only; the
/// initial field is fixed at zero) plus the truth for error reporting.
pub fn diffusion_problem(
    protocol: &DiffusionProtocol,
    krylov: KrylovConfig,
) -> Result<(FourDVarProblem, DVector<f64>)> {
    use rand::SeedableRng;
    let sys = crate::models::Diffusion1D::surrogate();
    let m = sys.m;
    let theta_true = crate::models::Diffusion1D::theta_true();
    let aug = AugmentedModel::new(sys.clone());
    let tableau = Tableau::third_order();
    let tf = protocol.n_steps as f64 * protocol.dt;
    let mut rng = ChaCha20Rng::seed_from_u64(protocol.seed);

    let mut z0 = DVector::zeros(m + 4);
    z0.rows_mut(m, 4).copy_from(&theta_true);
    let tape = integrate(
        &aug,
        &tableau,
        &WMatrix::ExactJacobian,
        &z0,
        0.0,
        tf,
        protocol.n_steps,
        &krylov,
    )?;

    let h = DiffusionRhsObservation { sys: sys.clone() };
    let clean: Vec<f64> = protocol
        .obs_steps
        .iter()
        .map(|&j| h.apply(tape.state_at(j))[0])
        .collect();
    let rms = (clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64).sqrt();
    let sigma_obs = protocol.sigma_obs_factor * rms;

    let mut obs = Vec::new();
    for (&j, &hy) in protocol.obs_steps.iter().zip(&clean) {
        let noise = if protocol.with_noise {
            sigma_obs * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        obs.push(Observation {
            step: j,
            value: DVector::from_element(1, hy + noise),
            r: CovarianceModel::diagonal(&DVector::from_element(1, sigma_obs * sigma_obs))?,
        });
    }

    let theta_b = DVector::from_fn(4, |i, _| {
        theta_true[i] * (1.0 + protocol.background_offset[i])
    });
    let variances = theta_b.map(|v| (protocol.sigma_b_factor * v).powi(2));
    let background = CovarianceModel::diagonal(&variances)?;

    let problem = FourDVarProblem {
        model: Box::new(aug),
        tableau,
        wmatrix: WMatrix::ExactJacobian,
        krylov,
        theta_b,
        background,
        obs,
        h: Box::new(h),
        t0: 0.0,
        tf,
        n_steps: protocol.n_steps,
        mode: EstimationMode::AugmentedParameters {
            base_state: DVector::zeros(m),
        },
    };
    problem.validate()?;
    Ok((problem, theta_true))
}
