//! Discrete adjoint of the EPIRK-W step: backward sweep over a recorded
//! tape producing λ₀, which is the exact gradient of the discrete cost.
//!
//! With the step written as in `integrator`, stationarity of the step
//! Lagrangian gives, per step n, stage multipliers computed in reverse
//! stage order
//!
//!   Λ_{n,i} = (J(Y_{n,i}) − Tₙ)ᵀ · v_i,
//!   v_i = Σ_{j≥i+1} h·C_{j−1−i,j}·b_j ψ_{s,j}ᵀ λ_{n+1}
//!       + Σ_{m>i} Σ_{i<j≤m} h·C_{j−1−i,j}·a_{m,j} ψ_{m,j}ᵀ Λ_{n,m},
//!
//! followed by the state update
//!
//!   λ_n = λ_{n+1} + Σ_m Λ_{n,m}
//!       + h·J(yₙ)ᵀ·(b_1 ψ_{s,1}ᵀ λ_{n+1} + Σ_m a_{m,1} ψ_{m,1}ᵀ Λ_{n,m})
//!       + h·(Tₙ − J(yₙ))ᵀ·(Σ_{j≥2} s_j·b_j ψ_{s,j}ᵀ λ_{n+1}
//!                           + Σ_m Σ_{2≤j≤m} s_j·a_{m,j} ψ_{m,j}ᵀ Λ_{n,m}),
//!
//! where s_j = Σ_{ℓ=0}^{j−2} C_{ℓ,j} = (−1)^j. The remainder-derivative
//! sum stops at ℓ = j−2: the ℓ = j−1 term evaluates r at yₙ itself, where
//! r and its partial derivative in the stage argument vanish identically.
//! All transposed ψ products are evaluated as ψ applied to the transposed
//! operator, never by forming matrices.
//!
//! No linear solve appears anywhere: C_{j−1−i,j} requires j ≥ i+1 and
//! a_{m,j} requires j ≤ m, so Λ_{n,i} only consumes Λ_{n,m} with m > i and
//! plain back-substitution suffices.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::integrator::{StepRecord, StepTape};
use crate::matfun::{psi_transpose_times_vector, KrylovConfig};
use crate::model::{OdeModel, WMatrix};
use crate::tableau::{fd_coefficient, Tableau};

/// Cost derivatives driving the backward sweep: the terminal ∂q_N/∂y_N and
/// optional per-step forcings ∂q_n/∂y_n (absent entries are zero).
#[derive(Debug, Clone)]
pub struct AdjointSeed {
    pub terminal: DVector<f64>,
    pub forcings: BTreeMap<usize, DVector<f64>>,
}

impl AdjointSeed {
    pub fn terminal_only(terminal: DVector<f64>) -> Self {
        AdjointSeed {
            terminal,
            forcings: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdjointResult {
    pub lambda0: DVector<f64>,
    /// Stage multipliers Λ_{0,·} of the last processed (earliest) step,
    /// kept as a diagnostic.
    pub stage_multipliers_last: Vec<DVector<f64>>,
}

/// What `parameter_gradient` should extract from λ₀.
#[derive(Debug, Clone, Copy)]
pub enum GradientMode {
    /// θ = y₀: the gradient is λ₀ itself.
    InitialCondition,
    /// Augmented system [y; τ]: the gradient is the τ-block of λ₀.
    AugmentedParameters { state_dim: usize },
}

/// ψ_{i,j}(g_{i,j}·h·Tₙ)ᵀ·vec via the transposed operator.
fn psi_t(
    model: &dyn OdeModel,
    w: &WMatrix,
    record: &StepRecord,
    tableau: &Tableau,
    i: usize,
    j: usize,
    vec: &DVector<f64>,
    cfg: &KrylovConfig,
) -> Result<DVector<f64>> {
    psi_transpose_times_vector(
        tableau.p_row(i, j),
        &mut |v| w.apply_transpose(model, &record.y_n, v),
        tableau.g(i, j) * record.h,
        vec,
        cfg,
    )
}

/// b_j·ψ_{s,j}ᵀ·λ_{n+1} for j = 1..s (index j−1).
fn final_row_products(
    model: &dyn OdeModel,
    w: &WMatrix,
    record: &StepRecord,
    tableau: &Tableau,
    lambda_next: &DVector<f64>,
    cfg: &KrylovConfig,
) -> Result<Vec<DVector<f64>>> {
    let s = tableau.s;
    let mut out = Vec::with_capacity(s);
    for j in 1..=s {
        let b_j = tableau.b(j);
        if b_j == 0.0 {
            out.push(DVector::zeros(model.dim()));
        } else {
            out.push(psi_t(model, w, record, tableau, s, j, lambda_next, cfg)? * b_j);
        }
    }
    Ok(out)
}

/// a_{m,j}·ψ_{m,j}ᵀ·Λ_m for j = 1..m (index j−1).
fn stage_row_products(
    model: &dyn OdeModel,
    w: &WMatrix,
    record: &StepRecord,
    tableau: &Tableau,
    m: usize,
    lambda_m: &DVector<f64>,
    cfg: &KrylovConfig,
) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(m);
    for j in 1..=m {
        let a_mj = tableau.a(m, j);
        if a_mj == 0.0 {
            out.push(DVector::zeros(model.dim()));
        } else {
            out.push(psi_t(model, w, record, tableau, m, j, lambda_m, cfg)? * a_mj);
        }
    }
    Ok(out)
}

/// Stage multipliers Λ_{n,1..s−1} by reverse-order back-substitution.
pub fn adjoint_stages(
    model: &dyn OdeModel,
    w: &WMatrix,
    record: &StepRecord,
    tableau: &Tableau,
    lambda_next: &DVector<f64>,
    cfg: &KrylovConfig,
) -> Result<Vec<DVector<f64>>> {
    let s = tableau.s;
    let h = record.h;
    let n = model.dim();
    if record.stages.len() != s - 1 {
        return Err(Error::Dimension {
            context: "step record stage count",
            expected: s - 1,
            got: record.stages.len(),
        });
    }
    let w_vecs = final_row_products(model, w, record, tableau, lambda_next, cfg)?;

    // u_vecs[m−1][j−1] = a_{m,j} ψ_{m,j}ᵀ Λ_m, filled as stages resolve.
    let mut u_vecs: Vec<Option<Vec<DVector<f64>>>> = vec![None; s - 1];
    let mut lambdas: Vec<DVector<f64>> = vec![DVector::zeros(n); s - 1];

    for i in (1..s).rev() {
        let mut v = DVector::zeros(n);
        for j in (i + 1).max(2)..=s {
            let c = fd_coefficient(j - 1 - i, j)? as f64;
            if c != 0.0 {
                v.axpy(h * c, &w_vecs[j - 1], 1.0);
            }
        }
        for m in (i + 1)..s {
            let u_m = u_vecs[m - 1].as_ref().expect("resolved in reverse order");
            for j in (i + 1).max(2)..=m {
                let c = fd_coefficient(j - 1 - i, j)? as f64;
                if c != 0.0 {
                    v.axpy(h * c, &u_m[j - 1], 1.0);
                }
            }
        }
        let y_i = &record.stages[i - 1];
        let lambda_i = model.jac_t_vec(y_i, &v) - w.apply_transpose(model, &record.y_n, &v);
        u_vecs[i - 1] = Some(stage_row_products(
            model, w, record, tableau, i, &lambda_i, cfg,
        )?);
        lambdas[i - 1] = lambda_i;
    }
    Ok(lambdas)
}

/// λ_n from λ_{n+1}, the stage multipliers of the same record, and the
/// local cost forcing ∂q_n/∂y_n (None ⇒ zero).
pub fn adjoint_step(
    model: &dyn OdeModel,
    w: &WMatrix,
    record: &StepRecord,
    tableau: &Tableau,
    lambda_next: &DVector<f64>,
    stage_lambdas: &[DVector<f64>],
    forcing: Option<&DVector<f64>>,
    cfg: &KrylovConfig,
) -> Result<DVector<f64>> {
    let s = tableau.s;
    let h = record.h;
    let n = model.dim();
    let w_vecs = final_row_products(model, w, record, tableau, lambda_next, cfg)?;

    let mut lambda_n = lambda_next.clone();
    if let Some(f) = forcing {
        lambda_n += f;
    }

    // Direct stage contributions and the f(yₙ) chain term.
    let mut fy_chain = w_vecs[0].clone();
    // Remainder-derivative accumulation with s_j = (−1)^j.
    let sign = |j: usize| if j % 2 == 0 { 1.0 } else { -1.0 };
    let mut rem_sum = DVector::zeros(n);
    for j in 2..=s {
        rem_sum.axpy(sign(j), &w_vecs[j - 1], 1.0);
    }
    for m in 1..s {
        lambda_n += &stage_lambdas[m - 1];
        let u_m = stage_row_products(model, w, record, tableau, m, &stage_lambdas[m - 1], cfg)?;
        fy_chain += &u_m[0];
        for j in 2..=m {
            rem_sum.axpy(sign(j), &u_m[j - 1], 1.0);
        }
    }

    lambda_n += model.jac_t_vec(&record.y_n, &fy_chain) * h;
    let t_term = w.apply_transpose(model, &record.y_n, &rem_sum)
        - model.jac_t_vec(&record.y_n, &rem_sum);
    lambda_n += t_term * h;
    Ok(lambda_n)
}

/// Backward sweep over a whole tape: λ_N := terminal seed, then each step
/// is processed in reverse with its forcing added.
pub fn adjoint_sweep(
    model: &dyn OdeModel,
    w: &WMatrix,
    tape: &StepTape,
    tableau: &Tableau,
    seed: &AdjointSeed,
    cfg: &KrylovConfig,
) -> Result<AdjointResult> {
    let n_steps = tape.step_count();
    if seed.terminal.len() != model.dim() {
        return Err(Error::Dimension {
            context: "adjoint terminal seed",
            expected: model.dim(),
            got: seed.terminal.len(),
        });
    }
    let mut lambda = seed.terminal.clone();
    if let Some(f) = seed.forcings.get(&n_steps) {
        lambda += f;
    }
    let mut last_stages = Vec::new();
    for n in (0..n_steps).rev() {
        let record = &tape.records[n];
        let wrap = |e: Error| Error::AdjointFailed {
            step: n,
            source: Box::new(e),
        };
        let stage_lambdas =
            adjoint_stages(model, w, record, tableau, &lambda, cfg).map_err(wrap)?;
        lambda = adjoint_step(
            model,
            w,
            record,
            tableau,
            &lambda,
            &stage_lambdas,
            seed.forcings.get(&n),
            cfg,
        )
        .map_err(wrap)?;
        if n == 0 {
            last_stages = stage_lambdas;
        }
    }
    if lambda.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "adjoint state",
        });
    }
    Ok(AdjointResult {
        lambda0: lambda,
        stage_multipliers_last: last_stages,
    })
}

/// Gradient of the discrete cost with respect to the estimated variables:
/// λ₀ for initial-condition estimation, or the τ-block of λ₀ when the
/// dynamics were augmented with constant parameter states.
pub fn parameter_gradient(
    model: &dyn OdeModel,
    w: &WMatrix,
    tape: &StepTape,
    tableau: &Tableau,
    seed: &AdjointSeed,
    mode: GradientMode,
    cfg: &KrylovConfig,
) -> Result<DVector<f64>> {
    let result = adjoint_sweep(model, w, tape, tableau, seed, cfg)?;
    match mode {
        GradientMode::InitialCondition => Ok(result.lambda0),
        GradientMode::AugmentedParameters { state_dim } => {
            if state_dim >= model.dim() {
                return Err(Error::ModeMismatch {
                    message: format!(
                        "augmented mode with state_dim {} but model dim {}",
                        state_dim,
                        model.dim()
                    ),
                });
            }
            let p = model.dim() - state_dim;
            Ok(result.lambda0.rows(state_dim, p).clone_owned())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{epirkw_step, integrate};
    use crate::matfun::{expm_dense, phi_dense};
    use crate::models::{lorenz96_initial_profile, Lorenz96};
    use nalgebra::DMatrix;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn krylov() -> KrylovConfig {
        KrylovConfig::default()
    }

    struct ZeroModel {
        n: usize,
    }
    impl OdeModel for ZeroModel {
        fn dim(&self) -> usize {
            self.n
        }
        fn rhs(&self, _y: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(self.n)
        }
        fn jac_vec(&self, _y: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(self.n)
        }
        fn jac_t_vec(&self, _y: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(self.n)
        }
    }

    struct LinearModel {
        a: DMatrix<f64>,
    }
    impl OdeModel for LinearModel {
        fn dim(&self) -> usize {
            self.a.nrows()
        }
        fn rhs(&self, y: &DVector<f64>) -> DVector<f64> {
            &self.a * y
        }
        fn jac_vec(&self, _y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
            &self.a * v
        }
        fn jac_t_vec(&self, _y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
            self.a.transpose() * v
        }
    }

    fn dense_jacobian(model: &dyn OdeModel, y: &DVector<f64>) -> DMatrix<f64> {
        let n = model.dim();
        let mut j = DMatrix::zeros(n, n);
        for c in 0..n {
            let e = DVector::from_fn(n, |i, _| if i == c { 1.0 } else { 0.0 });
            j.set_column(c, &model.jac_vec(y, &e));
        }
        j
    }

    /// ψ_{i,j}(g·h·T) as a dense matrix, for oracles only.
    fn dense_psi(tableau: &Tableau, i: usize, j: usize, h: f64, t: &DMatrix<f64>) -> DMatrix<f64> {
        let z = t * (tableau.g(i, j) * h);
        let n = t.nrows();
        let mut acc = DMatrix::zeros(n, n);
        for (k, &p) in tableau.p_row(i, j).iter().enumerate() {
            if p != 0.0 {
                acc += phi_dense(k + 1, &z).unwrap() * p;
            }
        }
        acc
    }

    #[test]
    fn zero_dynamics_sweep_is_identity_plus_forcings() {
        let model = ZeroModel { n: 5 };
        let tab = Tableau::third_order();
        let y0 = DVector::from_element(5, 2.0);
        let tape = integrate(&model, &tab, &WMatrix::ExactJacobian, &y0, 0.0, 1.0, 10, &krylov())
            .unwrap();
        let mut seed = AdjointSeed::terminal_only(DVector::from_fn(5, |i, _| i as f64));
        seed.forcings.insert(3, DVector::from_element(5, 1.5));
        seed.forcings.insert(7, DVector::from_element(5, -0.5));
        let res = adjoint_sweep(&model, &WMatrix::ExactJacobian, &tape, &tab, &seed, &krylov())
            .unwrap();
        let expect = &seed.terminal + DVector::from_element(5, 1.0);
        assert!((res.lambda0 - expect).norm() < 1e-14);
        assert!(res
            .stage_multipliers_last
            .iter()
            .all(|l| l.norm() == 0.0));
    }

    #[test]
    fn linear_model_stage_multipliers_vanish() {
        let mut rng = StdRng::seed_from_u64(31);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
        let model = LinearModel { a };
        let tab = Tableau::third_order();
        let y0 = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let tape = integrate(&model, &tab, &WMatrix::ExactJacobian, &y0, 0.0, 0.2, 1, &krylov())
            .unwrap();
        let lam = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let stages = adjoint_stages(
            &model,
            &WMatrix::ExactJacobian,
            &tape.records[0],
            &tab,
            &lam,
            &krylov(),
        )
        .unwrap();
        for s in stages {
            assert!(s.norm() < 1e-12);
        }
    }

    #[test]
    fn linear_model_step_is_transposed_propagator() {
        // With f = Ay, Tₙ = A the step is y ↦ e^{hA}y, so the adjoint step
        // must be λ ↦ e^{hAᵀ}λ.
        let mut rng = StdRng::seed_from_u64(32);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
        let model = LinearModel { a: a.clone() };
        let tab = Tableau::third_order();
        let y0 = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let h = 0.2;
        let tape = integrate(&model, &tab, &WMatrix::ExactJacobian, &y0, 0.0, h, 1, &krylov())
            .unwrap();
        let lam = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let stages = adjoint_stages(
            &model,
            &WMatrix::ExactJacobian,
            &tape.records[0],
            &tab,
            &lam,
            &krylov(),
        )
        .unwrap();
        let lam0 = adjoint_step(
            &model,
            &WMatrix::ExactJacobian,
            &tape.records[0],
            &tab,
            &lam,
            &stages,
            None,
            &krylov(),
        )
        .unwrap();
        let expect = expm_dense(&(a.transpose() * h)).unwrap() * &lam;
        assert!((lam0 - &expect).norm() / expect.norm() < 1e-12);
    }

    #[test]
    fn two_stage_tableau_single_multiplier_formula() {
        // s = 2 has one internal stage and no stage coupling:
        // Λ₁ = (J(Y₁) − T)ᵀ · h·C_{0,2}·b₂·ψ_{2,2}ᵀ λ.
        let toml = r#"
name = "w2-test"
s = 2
order = 2
a = [[0.5]]
b = [1.0, 1.0]
g = [[0.5, 0.0], [1.0, 1.0]]
p = [[[1.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]]
"#;
        let tab = Tableau::from_toml_str(toml).unwrap();
        let model = Lorenz96::grouped_form(6);
        let mut rng = StdRng::seed_from_u64(33);
        let y0 = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let h = 0.01;
        let (_, stages_fwd) =
            epirkw_step(&model, &tab, &WMatrix::ExactJacobian, &y0, h, &krylov()).unwrap();
        let record = StepRecord {
            y_n: y0.clone(),
            stages: stages_fwd.clone(),
            h,
            t_n: 0.0,
        };
        let lam = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let stages = adjoint_stages(
            &model,
            &WMatrix::ExactJacobian,
            &record,
            &tab,
            &lam,
            &krylov(),
        )
        .unwrap();

        let t = dense_jacobian(&model, &y0);
        let psi = dense_psi(&tab, 2, 2, h, &t);
        let v = psi.transpose() * &lam * (h * tab.b(2));
        let j1 = dense_jacobian(&model, &stages_fwd[0]);
        let expect = (j1 - &t).transpose() * v;
        assert!((stages[0].clone() - &expect).norm() / (1.0 + expect.norm()) < 1e-10);
    }

    #[test]
    fn stage_multipliers_match_dense_matricization() {
        let model = Lorenz96::grouped_form(40);
        let tab = Tableau::third_order();
        let y0 = crate::reference::rk4(&model, &lorenz96_initial_profile(40), 0.0, 0.1, 500);
        let h = 0.002;
        let (_, stages_fwd) =
            epirkw_step(&model, &tab, &WMatrix::ExactJacobian, &y0, h, &krylov()).unwrap();
        let record = StepRecord {
            y_n: y0.clone(),
            stages: stages_fwd.clone(),
            h,
            t_n: 0.0,
        };
        let mut rng = StdRng::seed_from_u64(34);
        let lam = DVector::from_fn(40, |_, _| rng.gen_range(-1.0..1.0));
        let stages = adjoint_stages(
            &model,
            &WMatrix::ExactJacobian,
            &record,
            &tab,
            &lam,
            &krylov(),
        )
        .unwrap();

        // Dense assembly of the same back-substitution.
        let t = dense_jacobian(&model, &y0);
        let s = tab.s;
        let mut dense: Vec<DVector<f64>> = vec![DVector::zeros(40); s - 1];
        let mut us: Vec<Vec<DVector<f64>>> = vec![Vec::new(); s - 1];
        for i in (1..s).rev() {
            let mut v = DVector::zeros(40);
            for j in (i + 1).max(2)..=s {
                let c = fd_coefficient(j - 1 - i, j).unwrap() as f64;
                let psi = dense_psi(&tab, s, j, h, &t);
                v += psi.transpose() * &lam * (h * c * tab.b(j));
            }
            for m in (i + 1)..s {
                for j in (i + 1).max(2)..=m {
                    let c = fd_coefficient(j - 1 - i, j).unwrap() as f64;
                    v += &us[m - 1][j - 1] * (h * c);
                }
            }
            let ji = dense_jacobian(&model, &stages_fwd[i - 1]);
            let li = (ji - &t).transpose() * &v;
            let mut row = Vec::new();
            for j in 1..=i {
                let psi = dense_psi(&tab, i, j, h, &t);
                row.push(psi.transpose() * &li * tab.a(i, j));
            }
            for _ in i..s {
                row.push(DVector::zeros(40));
            }
            us[i - 1] = row;
            dense[i - 1] = li;
        }
        for (krylov_l, dense_l) in stages.iter().zip(&dense) {
            assert!(
                (krylov_l - dense_l).norm() / (1.0 + dense_l.norm()) < 1e-10,
                "stage multiplier mismatch"
            );
        }
    }

    #[test]
    fn step_adjoint_matches_fd_step_jacobian_transpose() {
        let model = Lorenz96::grouped_form(40);
        let tab = Tableau::third_order();
        let y0 = crate::reference::rk4(&model, &lorenz96_initial_profile(40), 0.0, 0.1, 500);
        let h = 0.0005;
        let cfg = krylov();
        let step = |y: &DVector<f64>| {
            epirkw_step(&model, &tab, &WMatrix::ExactJacobian, y, h, &cfg)
                .unwrap()
                .0
        };
        let (_, stages_fwd) =
            epirkw_step(&model, &tab, &WMatrix::ExactJacobian, &y0, h, &cfg).unwrap();
        let record = StepRecord {
            y_n: y0.clone(),
            stages: stages_fwd,
            h,
            t_n: 0.0,
        };
        let mut rng = StdRng::seed_from_u64(35);
        let lam = DVector::from_fn(40, |_, _| rng.gen_range(-1.0..1.0));
        let stages = adjoint_stages(&model, &WMatrix::ExactJacobian, &record, &tab, &lam, &cfg)
            .unwrap();
        let lam0 = adjoint_step(
            &model,
            &WMatrix::ExactJacobian,
            &record,
            &tab,
            &lam,
            &stages,
            None,
            &cfg,
        )
        .unwrap();

        // Column-by-column FD of the one-step map, then Jᵀλ.
        let eps = 1e-6;
        let mut jt_lam = DVector::zeros(40);
        for c in 0..40 {
            let mut yp = y0.clone();
            let mut ym = y0.clone();
            yp[c] += eps;
            ym[c] -= eps;
            let col = (step(&yp) - step(&ym)) / (2.0 * eps);
            jt_lam[c] = col.dot(&lam);
        }
        assert!(
            (lam0.clone() - &jt_lam).norm() / jt_lam.norm() < 1e-6,
            "rel err {}",
            (lam0 - &jt_lam).norm() / jt_lam.norm()
        );
    }

    #[test]
    fn window_adjoint_is_fd_gradient_of_terminal_cost() {
        // q_N = ½‖y_N − z‖²: λ₀ must equal d q_N / d y₀ of the discrete map.
        let model = Lorenz96::grouped_form(8);
        let tab = Tableau::third_order();
        let y0 = DVector::from_fn(8, |i, _| 1.0 + 0.1 * (i % 5) as f64);
        let cfg = krylov();
        let (t0, tf, n) = (0.0, 0.05, 20);
        let z = DVector::from_element(8, 1.2);
        let cost = |y_init: &DVector<f64>| {
            let tape =
                integrate(&model, &tab, &WMatrix::ExactJacobian, y_init, t0, tf, n, &cfg).unwrap();
            0.5 * (tape.y_final - &z).norm_squared()
        };
        let tape = integrate(&model, &tab, &WMatrix::ExactJacobian, &y0, t0, tf, n, &cfg).unwrap();
        let seed = AdjointSeed::terminal_only(&tape.y_final - &z);
        let res = adjoint_sweep(&model, &WMatrix::ExactJacobian, &tape, &tab, &seed, &cfg)
            .unwrap();
        let eps = 1e-6;
        for c in 0..8 {
            let mut yp = y0.clone();
            let mut ym = y0.clone();
            yp[c] += eps;
            ym[c] -= eps;
            let fd = (cost(&yp) - cost(&ym)) / (2.0 * eps);
            assert!(
                (fd - res.lambda0[c]).abs() / (1.0 + fd.abs()) < 1e-6,
                "component {c}: fd {fd}, adjoint {}",
                res.lambda0[c]
            );
        }
    }

    #[test]
    fn adjoint_order_three_against_continuous_reference() {
        let model = Lorenz96::grouped_form(40);
        let tab = Tableau::third_order();
        let y0 = lorenz96_initial_profile(40);
        let cfg = krylov();
        let (t0, tf) = (0.0, 0.3);
        let mut rng = StdRng::seed_from_u64(36);
        let seed_vec = DVector::from_fn(40, |_, _| rng.gen_range(-1.0..1.0));
        let y_ref = crate::reference::reference_solution(&model, &y0, t0, tf, 1e-12);
        let lam_ref = crate::reference::reference_adjoint(&model, &y_ref, &seed_vec, t0, tf, 1e-12);
        let mut hs = Vec::new();
        let mut errs = Vec::new();
        for k in 0..5 {
            let n = 20usize << k;
            let tape =
                integrate(&model, &tab, &WMatrix::ExactJacobian, &y0, t0, tf, n, &cfg).unwrap();
            let res = adjoint_sweep(
                &model,
                &WMatrix::ExactJacobian,
                &tape,
                &tab,
                &AdjointSeed::terminal_only(seed_vec.clone()),
                &cfg,
            )
            .unwrap();
            hs.push((tf - t0) / n as f64);
            errs.push((res.lambda0 - &lam_ref).norm());
        }
        let slope = crate::reference::fit_loglog_slope(&hs, &errs);
        assert!(
            (2.7..=3.3).contains(&slope),
            "adjoint order {slope}, errors {errs:?}"
        );
    }

    #[test]
    fn parameter_gradient_mode_selection() {
        let model = ZeroModel { n: 6 };
        let tab = Tableau::third_order();
        let y0 = DVector::from_element(6, 1.0);
        let cfg = krylov();
        let tape = integrate(&model, &tab, &WMatrix::ExactJacobian, &y0, 0.0, 1.0, 2, &cfg)
            .unwrap();
        let seed = AdjointSeed::terminal_only(DVector::from_fn(6, |i, _| i as f64));
        let full = parameter_gradient(
            &model,
            &WMatrix::ExactJacobian,
            &tape,
            &tab,
            &seed,
            GradientMode::InitialCondition,
            &cfg,
        )
        .unwrap();
        assert_eq!(full.len(), 6);
        let tail = parameter_gradient(
            &model,
            &WMatrix::ExactJacobian,
            &tape,
            &tab,
            &seed,
            GradientMode::AugmentedParameters { state_dim: 4 },
            &cfg,
        )
        .unwrap();
        assert_eq!(tail.len(), 2);
        assert_eq!(tail[0], full[4]);
        assert!(parameter_gradient(
            &model,
            &WMatrix::ExactJacobian,
            &tape,
            &tab,
            &seed,
            GradientMode::AugmentedParameters { state_dim: 6 },
            &cfg,
        )
        .is_err());
    }
}
