//! EPIRK-W forward integration with full checkpoint recording.
//!
//! One step of the s-stage method reads
//!
//!   Y_{n,i} = y_n + a_{i,1} ψ_{i,1}(g_{i,1} h Tₙ) h f(y_n)
//!           + Σ_{j=2}^{i} a_{i,j} ψ_{i,j}(g_{i,j} h Tₙ) h Δ^{(j−1)}r(y_n)
//!   y_{n+1} = y_n + b_1 ψ_{s,1}(g_{s,1} h Tₙ) h f(y_n)
//!           + Σ_{j=2}^{s} b_j ψ_{s,j}(g_{s,j} h Tₙ) h Δ^{(j−1)}r(y_n)
//!
//! with the remainder r(Y) = f(Y) − f(y_n) − Tₙ(Y − y_n) and the forward
//! differences Δ^{(j−1)}r = Σ_ℓ C_{ℓ,j} r(Y_{n,j−1−ℓ}), Y_{n,0} = y_n.
//! Every step's state, stages and step size are recorded on a tape consumed
//! by the backward adjoint sweep.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::matfun::{psi_times_vector, KrylovConfig};
use crate::model::{OdeModel, WMatrix};
use crate::tableau::{fd_coefficient, Tableau};

/// Per-step checkpoint consumed by the backward sweep.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// State at the start of the step; also anchors the Tₙ operator.
    pub y_n: DVector<f64>,
    /// Internal stages Y_{n,1..s−1}.
    pub stages: Vec<DVector<f64>>,
    pub h: f64,
    pub t_n: f64,
}

/// Ordered checkpoint container for a whole integration.
#[derive(Debug, Clone)]
pub struct StepTape {
    pub records: Vec<StepRecord>,
    pub y_final: DVector<f64>,
    pub t0: f64,
    pub tf: f64,
}

impl StepTape {
    pub fn step_count(&self) -> usize {
        self.records.len()
    }

    /// State at step index n (0 = initial, N = final).
    pub fn state_at(&self, n: usize) -> &DVector<f64> {
        if n == self.records.len() {
            &self.y_final
        } else {
            &self.records[n].y_n
        }
    }
}

/// Taylor remainder of f around `y_n` with the Jacobian replaced by Tₙ:
/// r(Y) = f(Y) − f(yₙ) − Tₙ·(Y − yₙ).
pub fn remainder(
    model: &dyn OdeModel,
    w: &WMatrix,
    y_n: &DVector<f64>,
    f_yn: &DVector<f64>,
    y: &DVector<f64>,
) -> DVector<f64> {
    model.rhs(y) - f_yn - w.apply(model, y_n, &(y - y_n))
}

/// One EPIRK-W step; returns the next state and the internal stages.
pub fn epirkw_step(
    model: &dyn OdeModel,
    tableau: &Tableau,
    w: &WMatrix,
    y_n: &DVector<f64>,
    h: f64,
    cfg: &KrylovConfig,
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    assert!(h > 0.0, "step size must be positive");
    let s = tableau.s;
    let f_yn = model.rhs(y_n);

    // r values indexed by stage: r_vals[0] = r(y_n) = 0, r_vals[i] = r(Y_{n,i}).
    let mut r_vals: Vec<DVector<f64>> = vec![DVector::zeros(model.dim())];
    let mut stages: Vec<DVector<f64>> = Vec::with_capacity(s - 1);

    let delta = |j: usize, r_vals: &[DVector<f64>]| -> Result<DVector<f64>> {
        // Δ^{(j−1)}r(y_n) = Σ_{ℓ=0}^{j−1} C_{ℓ,j} r(Y_{n,j−1−ℓ})
        let mut acc = DVector::zeros(model.dim());
        for l in 0..j {
            let c = fd_coefficient(l, j)? as f64;
            let idx = j - 1 - l;
            debug_assert!(idx < r_vals.len(), "stage forward reference");
            if idx > 0 {
                acc.axpy(c, &r_vals[idx], 1.0);
            }
        }
        Ok(acc)
    };

    let psi_apply = |i: usize, j: usize, vec: &DVector<f64>| -> Result<DVector<f64>> {
        psi_times_vector(
            tableau.p_row(i, j),
            &mut |v| w.apply(model, y_n, v),
            tableau.g(i, j) * h,
            vec,
            cfg,
        )
    };

    for i in 1..s {
        let mut y = y_n.clone();
        let a_i1 = tableau.a(i, 1);
        if a_i1 != 0.0 {
            y.axpy(a_i1 * h, &psi_apply(i, 1, &f_yn)?, 1.0);
        }
        for j in 2..=i {
            let a_ij = tableau.a(i, j);
            if a_ij != 0.0 {
                let d = delta(j, &r_vals)?;
                y.axpy(a_ij * h, &psi_apply(i, j, &d)?, 1.0);
            }
        }
        r_vals.push(remainder(model, w, y_n, &f_yn, &y));
        stages.push(y);
    }

    let mut y_next = y_n.clone();
    let b1 = tableau.b(1);
    if b1 != 0.0 {
        y_next.axpy(b1 * h, &psi_apply(s, 1, &f_yn)?, 1.0);
    }
    for j in 2..=s {
        let b_j = tableau.b(j);
        if b_j != 0.0 {
            let d = delta(j, &r_vals)?;
            y_next.axpy(b_j * h, &psi_apply(s, j, &d)?, 1.0);
        }
    }
    Ok((y_next, stages))
}

/// Fixed-step integration over [t0, tf] in `n_steps` steps, recording every
/// step on the tape. A step failure aborts the whole integration.
pub fn integrate(
    model: &dyn OdeModel,
    tableau: &Tableau,
    w: &WMatrix,
    y0: &DVector<f64>,
    t0: f64,
    tf: f64,
    n_steps: usize,
    cfg: &KrylovConfig,
) -> Result<StepTape> {
    assert!(n_steps >= 1, "need at least one step");
    assert!(tf > t0, "time window must be forward");
    let h = (tf - t0) / n_steps as f64;
    let mut records = Vec::with_capacity(n_steps);
    let mut y = y0.clone();
    for n in 0..n_steps {
        let t_n = t0 + n as f64 * h;
        let (y_next, stages) = epirkw_step(model, tableau, w, &y, h, cfg).map_err(|e| {
            Error::StepFailed {
                step: n,
                source: Box::new(e),
            }
        })?;
        records.push(StepRecord {
            y_n: y,
            stages,
            h,
            t_n,
        });
        y = y_next;
    }
    Ok(StepTape {
        records,
        y_final: y,
        t0,
        tf,
    })
}
