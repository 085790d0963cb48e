//! Bound-constrained limited-memory BFGS with a strong-Wolfe line search.
//!
//! Bounds are handled by gradient projection: components pressed against a
//! face with an outward-pointing gradient are frozen, the two-loop
//! recursion acts on the remaining subspace, and step lengths are capped
//! at the first box breakpoint. Convergence is measured on the projected
//! gradient, which vanishes exactly at a KKT point of the box.

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert!(
            lower.iter().zip(upper.iter()).all(|(l, u)| l <= u),
            "lower bound above upper bound"
        );
        Bounds { lower, upper }
    }

    fn project(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    /// Number of curvature pairs retained.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the projected-gradient ∞-norm drops below this.
    pub grad_tol: f64,
    /// Stop when the relative cost decrease over one iteration drops below
    /// this; zero disables the criterion.
    pub cost_rel_tol: f64,
    pub bounds: Option<Bounds>,
    /// Armijo constant of the strong Wolfe conditions.
    pub c1: f64,
    /// Curvature constant of the strong Wolfe conditions.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            memory: 10,
            max_iters: 100,
            grad_tol: 1e-6,
            cost_rel_tol: 0.0,
            bounds: None,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    CostTolerance,
    MaxIterations,
    /// No Wolfe point found within the trial budget; the best iterate so
    /// far is returned.
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub grad_inf: f64,
    pub theta: DVector<f64>,
    pub n_cost_evals: usize,
    pub n_grad_evals: usize,
}

#[derive(Debug, Clone)]
pub struct OptimizerTrace {
    pub iterations: Vec<IterationRecord>,
    pub stop: StopReason,
}

impl OptimizerTrace {
    pub fn final_cost(&self) -> f64 {
        self.iterations.last().map(|r| r.cost).unwrap_or(f64::NAN)
    }

    pub fn final_grad_inf(&self) -> f64 {
        self.iterations
            .last()
            .map(|r| r.grad_inf)
            .unwrap_or(f64::NAN)
    }
}

struct Pair {
    s: DVector<f64>,
    y: DVector<f64>,
    rho: f64,
}

/// Components frozen at a bound face (gradient pushes outward).
fn active_set(x: &DVector<f64>, g: &DVector<f64>, bounds: &Option<Bounds>) -> Vec<bool> {
    let mut active = vec![false; x.len()];
    if let Some(b) = bounds {
        for i in 0..x.len() {
            let span = (b.upper[i] - b.lower[i]).max(1.0);
            let eps = 1e-12 * span;
            if (x[i] <= b.lower[i] + eps && g[i] > 0.0)
                || (x[i] >= b.upper[i] - eps && g[i] < 0.0)
            {
                active[i] = true;
            }
        }
    }
    active
}

fn masked(v: &DVector<f64>, active: &[bool]) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| if active[i] { 0.0 } else { v[i] })
}

/// Largest step along d that keeps x inside the box.
fn breakpoint(x: &DVector<f64>, d: &DVector<f64>, bounds: &Option<Bounds>) -> f64 {
    let Some(b) = bounds else {
        return f64::INFINITY;
    };
    let mut alpha_max = f64::INFINITY;
    for i in 0..x.len() {
        if d[i] > 0.0 {
            alpha_max = alpha_max.min((b.upper[i] - x[i]) / d[i]);
        } else if d[i] < 0.0 {
            alpha_max = alpha_max.min((b.lower[i] - x[i]) / d[i]);
        }
    }
    alpha_max.max(0.0)
}

/// Two-loop recursion on the free subspace with γ = sᵀy/yᵀy scaling.
fn lbfgs_direction(g_free: &DVector<f64>, pairs: &[Pair], active: &[bool]) -> DVector<f64> {
    let mut q = g_free.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let s = masked(&p.s, active);
        let a = p.rho * s.dot(&q);
        q.axpy(-a, &masked(&p.y, active), 1.0);
        alphas.push(a);
    }
    if let Some(last) = pairs.last() {
        let gamma = last.s.dot(&last.y) / last.y.dot(&last.y);
        q *= gamma;
    }
    for (p, &a) in pairs.iter().zip(alphas.iter().rev()) {
        let y = masked(&p.y, active);
        let b = p.rho * y.dot(&q);
        q.axpy(a - b, &masked(&p.s, active), 1.0);
    }
    -masked(&q, active)
}

pub fn minimize(
    cost_fn: &mut dyn FnMut(&DVector<f64>) -> Result<f64>,
    grad_fn: &mut dyn FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    x0: &DVector<f64>,
    cfg: &OptimizerConfig,
) -> Result<(DVector<f64>, OptimizerTrace)> {
    assert!(cfg.memory >= 1);
    let mut n_cost = 0usize;
    let mut n_grad = 0usize;

    let mut x = x0.clone();
    if let Some(b) = &cfg.bounds {
        assert_eq!(b.lower.len(), x.len());
        b.project(&mut x);
    }

    let mut f = {
        n_cost += 1;
        cost_fn(&x)?
    };
    let mut g = {
        n_grad += 1;
        grad_fn(&x)?
    };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "cost or gradient" });
    }

    let mut pairs: Vec<Pair> = Vec::new();
    let mut trace = OptimizerTrace {
        iterations: Vec::new(),
        stop: StopReason::MaxIterations,
    };
    let record =
        |trace: &mut OptimizerTrace, it: usize, f: f64, pg: f64, x: &DVector<f64>, nc, ng| {
            trace.iterations.push(IterationRecord {
                iteration: it,
                cost: f,
                grad_inf: pg,
                theta: x.clone(),
                n_cost_evals: nc,
                n_grad_evals: ng,
            });
        };

    for iter in 0..=cfg.max_iters {
        let active = active_set(&x, &g, &cfg.bounds);
        let pg = masked(&g, &active);
        let pg_inf = pg.amax();
        record(&mut trace, iter, f, pg_inf, &x, n_cost, n_grad);

        if pg_inf <= cfg.grad_tol {
            trace.stop = StopReason::GradientTolerance;
            return Ok((x, trace));
        }
        if iter == cfg.max_iters {
            break;
        }

        let mut d = lbfgs_direction(&pg, &pairs, &active);
        let mut dg = d.dot(&g);
        if !(dg < 0.0) {
            // Fall back to steepest descent if memory produced a
            // non-descent direction (can happen right after active-set
            // changes).
            d = -pg.clone();
            dg = d.dot(&g);
            if !(dg < 0.0) {
                trace.stop = StopReason::GradientTolerance;
                return Ok((x, trace));
            }
        }

        let alpha_max = breakpoint(&x, &d, &cfg.bounds);
        if alpha_max <= 0.0 {
            trace.stop = StopReason::LineSearchFailure;
            return Ok((x, trace));
        }

        // Strong Wolfe search along d, capped at the box breakpoint.
        let mut phi = |alpha: f64| -> Result<(f64, f64, DVector<f64>)> {
            let xa = &x + &d * alpha;
            n_cost += 1;
            n_grad += 1;
            let fa = cost_fn(&xa)?;
            let ga = grad_fn(&xa)?;
            if !fa.is_finite() || ga.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "cost or gradient" });
            }
            let da = ga.dot(&d);
            Ok((fa, da, ga))
        };

        let mut accepted: Option<(f64, f64, DVector<f64>)> = None;
        let mut lo = 0.0f64;
        let mut f_lo = f;
        let mut hi: Option<f64> = None;
        let mut f_hi = f64::INFINITY;
        // Until curvature pairs exist the direction carries no scale
        // information; cap the first trial so raw-gradient steps on badly
        // scaled problems stay in the region where f is evaluable.
        let mut alpha = if pairs.is_empty() {
            (1.0 / d.amax().max(1.0)).min(1.0).min(alpha_max)
        } else {
            1.0f64.min(alpha_max)
        };
        let mut trials = 0;
        // Bracket phase followed by bisection zoom; both share the trial
        // budget. A trial where the model blows up (evaluation error or a
        // non-finite value) is treated as infinite cost: it becomes the
        // upper bracket end and the search bisects back toward the last
        // good point.
        while trials < cfg.max_line_search {
            trials += 1;
            let (fa, da, ga) = match phi(alpha) {
                Ok(v) => v,
                Err(_) => {
                    hi = Some(alpha);
                    f_hi = f64::INFINITY;
                    if (alpha - lo).abs() <= 1e-14 * (1.0 + lo.abs()) {
                        break;
                    }
                    alpha = 0.5 * (lo + alpha);
                    continue;
                }
            };
            let armijo = fa <= f + cfg.c1 * alpha * dg;
            if !armijo || (hi.is_none() && fa >= f_lo && trials > 1) {
                hi = Some(alpha);
                f_hi = fa;
            } else if da.abs() <= -cfg.c2 * dg
                || (alpha >= alpha_max * (1.0 - 1e-12) && armijo)
            {
                // Wolfe point, or a sufficient-decrease step pinned at the
                // box face (curvature cannot be satisfied there).
                accepted = Some((alpha, fa, ga));
                break;
            } else if da >= 0.0 {
                hi = Some(lo);
                f_hi = f_lo;
                lo = alpha;
                f_lo = fa;
            } else {
                lo = alpha;
                f_lo = fa;
                if hi.is_none() {
                    let next = (alpha * 2.0).min(alpha_max);
                    if next <= alpha * (1.0 + 1e-12) {
                        // Already at the cap without satisfying Wolfe.
                        accepted = Some((alpha, fa, ga));
                        break;
                    }
                    alpha = next;
                    continue;
                }
            }
            let h = hi.unwrap_or(alpha_max);
            if (h - lo).abs() <= 1e-14 * (1.0 + lo.abs()) {
                if f_lo < f {
                    let (fa, _, ga) = phi(lo.max(h.min(alpha)))?;
                    accepted = Some((lo, fa, ga));
                }
                break;
            }
            let _ = f_hi;
            alpha = 0.5 * (lo + h);
        }

        let Some((alpha, fa, ga)) = accepted else {
            trace.stop = StopReason::LineSearchFailure;
            return Ok((x, trace));
        };

        let mut x_new = &x + &d * alpha;
        if let Some(b) = &cfg.bounds {
            b.project(&mut x_new);
        }
        let s = &x_new - &x;
        let y = &ga - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            pairs.push(Pair {
                rho: 1.0 / sy,
                s,
                y,
            });
            if pairs.len() > cfg.memory {
                pairs.remove(0);
            }
        }

        let f_prev = f;
        x = x_new;
        f = fa;
        g = ga;

        if cfg.cost_rel_tol > 0.0 {
            let rel = (f_prev - f).abs() / f_prev.abs().max(1e-300);
            if rel < cfg.cost_rel_tol {
                let active = active_set(&x, &g, &cfg.bounds);
                record(
                    &mut trace,
                    iter + 1,
                    f,
                    masked(&g, &active).amax(),
                    &x,
                    n_cost,
                    n_grad,
                );
                trace.stop = StopReason::CostTolerance;
                return Ok((x, trace));
            }
        }
    }
    Ok((x, trace))
}
