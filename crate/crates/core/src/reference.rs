//! High-accuracy reference integrators used by convergence studies and
//! oracle tests: a fixed-step classical RK4 and an adaptive Dormand-Prince
//! 5(4) pair driven at tight tolerances.

use nalgebra::DVector;

use crate::model::OdeModel;

/// Classical fixed-step RK4.
pub fn rk4(model: &dyn OdeModel, y0: &DVector<f64>, t0: f64, tf: f64, n: usize) -> DVector<f64> {
    let h = (tf - t0) / n as f64;
    let mut y = y0.clone();
    for _ in 0..n {
        let k1 = model.rhs(&y);
        let k2 = model.rhs(&(&y + &k1 * (h / 2.0)));
        let k3 = model.rhs(&(&y + &k2 * (h / 2.0)));
        let k4 = model.rhs(&(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    y
}

// Dormand-Prince 5(4) coefficients.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];

const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand-Prince 5(4) on a generic autonomous right-hand side.
/// Both tolerances are applied in a mixed absolute/relative error norm.
pub fn dopri5(
    rhs: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
    y0: &DVector<f64>,
    span: f64,
    rtol: f64,
    atol: f64,
) -> DVector<f64> {
    assert!(span > 0.0);
    let n = y0.len();
    let mut y = y0.clone();
    let mut t = 0.0;
    let mut h = (span / 100.0).min(1e-3).max(span * 1e-9);
    let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);

    while t < span {
        if t + h > span {
            h = span - t;
        }
        k.clear();
        k.push(rhs(&y));
        for stage in 0..6 {
            let mut arg = y.clone();
            for (j, kj) in k.iter().enumerate() {
                let a = A[stage][j];
                if a != 0.0 {
                    arg.axpy(a * h, kj, 1.0);
                }
            }
            k.push(rhs(&arg));
        }
        let mut y5 = y.clone();
        let mut err = DVector::zeros(n);
        for (j, kj) in k.iter().enumerate() {
            if B5[j] != 0.0 {
                y5.axpy(B5[j] * h, kj, 1.0);
            }
            let d = B5[j] - B4[j];
            if d != 0.0 {
                err.axpy(d * h, kj, 1.0);
            }
        }
        let mut scaled: f64 = 0.0;
        for i in 0..n {
            let sc = atol + rtol * y[i].abs().max(y5[i].abs());
            scaled += (err[i] / sc).powi(2);
        }
        let errnorm = (scaled / n as f64).sqrt();
        if errnorm <= 1.0 {
            t += h;
            y = y5;
        }
        let factor = if errnorm > 0.0 {
            (0.9 * errnorm.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };
        h = (h * factor).min(span);
        if h < span * 1e-14 {
            // Cannot make progress; return the best state reached.
            break;
        }
    }
    y
}

/// Tight-tolerance forward reference solution for a model.
pub fn reference_solution(
    model: &dyn OdeModel,
    y0: &DVector<f64>,
    t0: f64,
    tf: f64,
    tol: f64,
) -> DVector<f64> {
    dopri5(&mut |y| model.rhs(y), y0, tf - t0, tol, tol)
}

/// Continuous adjoint reference: solves λ' = −J(y)ᵀλ backwards from tF to
/// t0 alongside the (time-reversed) state equation, starting at the given
/// terminal state and seed.
pub fn reference_adjoint(
    model: &dyn OdeModel,
    y_final: &DVector<f64>,
    lambda_final: &DVector<f64>,
    t0: f64,
    tf: f64,
    tol: f64,
) -> DVector<f64> {
    let n = model.dim();
    let mut z0 = DVector::zeros(2 * n);
    z0.rows_mut(0, n).copy_from(y_final);
    z0.rows_mut(n, n).copy_from(lambda_final);
    // In reversed time s = tF − t: y' = −f(y), λ' = +J(y)ᵀλ.
    let zf = dopri5(
        &mut |z: &DVector<f64>| {
            let y = z.rows(0, n).clone_owned();
            let lam = z.rows(n, n).clone_owned();
            let mut out = DVector::zeros(2 * n);
            out.rows_mut(0, n).copy_from(&(-model.rhs(&y)));
            out.rows_mut(n, n).copy_from(&model.jac_t_vec(&y, &lam));
            out
        },
        &z0,
        tf - t0,
        tol,
        tol,
    );
    zf.rows(n, n).clone_owned()
}

/// Least-squares slope of log(err) against log(h).
pub fn fit_loglog_slope(hs: &[f64], errs: &[f64]) -> f64 {
    assert_eq!(hs.len(), errs.len());
    let pts: Vec<(f64, f64)> = hs
        .iter()
        .zip(errs)
        .filter(|(_, &e)| e > 0.0)
        .map(|(&h, &e)| (h.ln(), e.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
