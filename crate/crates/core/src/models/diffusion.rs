//! 1-D nonlinear-diffusion surrogate: κ u_t = (ν(|u_x|) u_x)_x + f with
//! homogeneous Dirichlet ends, discretized by a conservative finite-volume
//! stencil. The reluctivity-style law ν couples the dynamics to four
//! material parameters, which makes the system a compact stand-in for
//! parameter estimation in a stiff nonlinear field problem.

use nalgebra::DVector;

use crate::model::ParametrizedOde;

/// Saturating material law
///
///   ν(s) = 1/(2s) · (tanh(s/θ₁) + tanh(s/θ₂)³⁰) · (θ₃ + θ₄·s),
///
/// finite for all s ≥ 0 with ν(0) = θ₃/(2θ₁).
#[derive(Debug, Clone)]
pub struct MaterialLaw {
    pub theta: [f64; 4],
}

/// tanh with clamping so the 30th power cannot overflow or lose the
/// saturated value for large arguments.
fn tanh_c(x: f64) -> f64 {
    if x > 20.0 {
        1.0
    } else if x < -20.0 {
        -1.0
    } else {
        x.tanh()
    }
}

impl MaterialLaw {
    pub fn new(theta: [f64; 4]) -> Self {
        assert!(theta[0] > 0.0 && theta[1] > 0.0, "field scales must be positive");
        MaterialLaw { theta }
    }

    pub fn from_vector(theta: &DVector<f64>) -> Self {
        assert_eq!(theta.len(), 4);
        Self::new([theta[0], theta[1], theta[2], theta[3]])
    }

    /// tanh(s/θ₁)/s, with the removable singularity at s = 0 handled by
    /// the series tanh(x)/x = 1 − x²/3 + O(x⁴).
    fn ratio1(&self, s: f64) -> f64 {
        let t1 = self.theta[0];
        if s < 1e-4 * t1 {
            let u = s / t1;
            (1.0 - u * u / 3.0) / t1
        } else {
            tanh_c(s / t1) / s
        }
    }

    fn ratio1_ds(&self, s: f64) -> f64 {
        let t1 = self.theta[0];
        if s < 1e-4 * t1 {
            -2.0 * s / (3.0 * t1 * t1 * t1)
        } else {
            let th = tanh_c(s / t1);
            let sech2 = 1.0 - th * th;
            (sech2 / t1 - th / s) / s
        }
    }

    /// tanh(s/θ₂)³⁰/s; the numerator vanishes like s³⁰, so the quotient is
    /// zero at s = 0 and harmless for any s > 0.
    fn ratio2(&self, s: f64) -> f64 {
        if s == 0.0 {
            return 0.0;
        }
        tanh_c(s / self.theta[1]).powi(30) / s
    }

    fn ratio2_ds(&self, s: f64) -> f64 {
        if s == 0.0 {
            return 0.0;
        }
        let t2 = self.theta[1];
        let th = tanh_c(s / t2);
        let sech2 = 1.0 - th * th;
        (30.0 * th.powi(29) * sech2 / t2 - th.powi(30) / s) / s
    }

    /// ν(s) for s ≥ 0.
    pub fn nu(&self, s: f64) -> f64 {
        let c = self.theta[2] + self.theta[3] * s;
        0.5 * (self.ratio1(s) + self.ratio2(s)) * c
    }

    /// dν/ds.
    pub fn nu_ds(&self, s: f64) -> f64 {
        let c = self.theta[2] + self.theta[3] * s;
        0.5 * (self.ratio1_ds(s) + self.ratio2_ds(s)) * c
            + 0.5 * (self.ratio1(s) + self.ratio2(s)) * self.theta[3]
    }

    /// Gradient of ν with respect to the four parameters.
    pub fn nu_dtheta(&self, s: f64) -> [f64; 4] {
        let [t1, t2, _t3, _t4] = self.theta;
        let c = self.theta[2] + self.theta[3] * s;
        let th1 = tanh_c(s / t1);
        let sech1 = 1.0 - th1 * th1;
        let th2 = tanh_c(s / t2);
        let sech2 = 1.0 - th2 * th2;
        let ratio = self.ratio1(s) + self.ratio2(s);
        [
            -c * sech1 / (2.0 * t1 * t1),
            -15.0 * c * th2.powi(29) * sech2 / (t2 * t2),
            0.5 * ratio,
            0.5 * ratio * s,
        ]
    }
}

/// Finite-volume discretization on `m` interior nodes with Dirichlet zeros
/// at both ends. A constant-in-time source of the given amplitude acts on
/// `source_cells`; `obs_cells` marks the sub-interval whose averaged u_t
/// serves as the scalar observable in estimation experiments.
#[derive(Debug, Clone)]
pub struct Diffusion1D {
    pub m: usize,
    pub length: f64,
    pub kappa: f64,
    pub source_amplitude: f64,
    /// Half-open 0-based node range carrying the source.
    pub source_cells: (usize, usize),
    /// Half-open 0-based node range averaged by the observable.
    pub obs_cells: (usize, usize),
}

impl Diffusion1D {
    pub fn new(m: usize, length: f64, kappa: f64, source_amplitude: f64) -> Self {
        assert!(m >= 3 && length > 0.0 && kappa > 0.0);
        Diffusion1D {
            m,
            length,
            kappa,
            source_amplitude,
            source_cells: (m / 3, 2 * m / 3),
            obs_cells: (m / 3, 2 * m / 3),
        }
    }

    /// The configuration used by the estimation experiments: the source is
    /// strong enough to drive |u_x| into the saturated regime of the true
    /// material law, where θ₄ dominates the response.
    pub fn surrogate() -> Self {
        Self::new(24, 1.0, 1.0, 2.0e7)
    }

    /// True material parameters of the estimation experiments.
    pub fn theta_true() -> DVector<f64> {
        DVector::from_vec(vec![2.88e3, 5.99e7, 4.35e4, 1.89])
    }

    pub fn dx(&self) -> f64 {
        self.length / (self.m + 1) as f64
    }

    /// Interface slopes s_i = (u_{i+1} − u_i)/dx for i = 0..m with the
    /// Dirichlet ghost values u_0 = u_{m+1} = 0.
    fn slopes(&self, u: &DVector<f64>) -> Vec<f64> {
        let dx = self.dx();
        let m = self.m;
        let mut s = Vec::with_capacity(m + 1);
        for i in 0..=m {
            let left = if i == 0 { 0.0 } else { u[i - 1] };
            let right = if i == m { 0.0 } else { u[i] };
            s.push((right - left) / dx);
        }
        s
    }

    /// Divergence of interface quantities: node i gets (q_i − q_{i−1})/(κ·dx).
    fn divergence(&self, q: &[f64]) -> DVector<f64> {
        let scale = 1.0 / (self.kappa * self.dx());
        DVector::from_fn(self.m, |i, _| (q[i + 1] - q[i]) * scale)
    }

    fn source(&self) -> DVector<f64> {
        let (lo, hi) = self.source_cells;
        DVector::from_fn(self.m, |i, _| {
            if i >= lo && i < hi {
                self.source_amplitude / self.kappa
            } else {
                0.0
            }
        })
    }

    /// Average of du/dt over the observation window, evaluated as the same
    /// average of the right-hand side.
    pub fn observable(&self, u: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        let (lo, hi) = self.obs_cells;
        let f = ParametrizedOde::rhs(self, u, theta);
        f.rows(lo, hi - lo).sum() / (hi - lo) as f64
    }

    /// Gradient of `observable` with respect to u, for adjoint seeding.
    pub fn observable_grad_u(&self, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (lo, hi) = self.obs_cells;
        let mut w = DVector::zeros(self.m);
        let inv = 1.0 / (hi - lo) as f64;
        for i in lo..hi {
            w[i] = inv;
        }
        self.jac_t_vec(u, theta, &w)
    }

    /// Gradient of `observable` with respect to θ.
    pub fn observable_grad_theta(&self, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (lo, hi) = self.obs_cells;
        let mut w = DVector::zeros(self.m);
        let inv = 1.0 / (hi - lo) as f64;
        for i in lo..hi {
            w[i] = inv;
        }
        self.dtheta_t_vec(u, theta, &w)
    }
}

impl ParametrizedOde for Diffusion1D {
    fn state_dim(&self) -> usize {
        self.m
    }

    fn param_count(&self) -> usize {
        4
    }

    fn rhs(&self, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let law = MaterialLaw::from_vector(theta);
        let s = self.slopes(u);
        let q: Vec<f64> = s.iter().map(|&si| law.nu(si.abs()) * si).collect();
        self.divergence(&q) + self.source()
    }

    fn jac_vec(&self, u: &DVector<f64>, theta: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let law = MaterialLaw::from_vector(theta);
        let s = self.slopes(u);
        let ds = self.slopes(v);
        // dq/ds = ν(|s|) + ν'(|s|)·|s| since q = ν(|s|)·s is odd in s.
        let dq: Vec<f64> = s
            .iter()
            .zip(&ds)
            .map(|(&si, &dsi)| {
                let a = si.abs();
                (law.nu(a) + law.nu_ds(a) * a) * dsi
            })
            .collect();
        self.divergence(&dq)
    }

    fn jac_t_vec(&self, u: &DVector<f64>, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        // The conservative stencil linearization is symmetric (tridiagonal
        // with matching off-diagonal interface weights), so the transpose
        // action coincides with the forward action.
        self.jac_vec(u, theta, w)
    }

    fn dtheta_vec(&self, u: &DVector<f64>, theta: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let law = MaterialLaw::from_vector(theta);
        let s = self.slopes(u);
        let dq: Vec<f64> = s
            .iter()
            .map(|&si| {
                let g = law.nu_dtheta(si.abs());
                si * (g[0] * p[0] + g[1] * p[1] + g[2] * p[2] + g[3] * p[3])
            })
            .collect();
        self.divergence(&dq)
    }

    fn dtheta_t_vec(
        &self,
        u: &DVector<f64>,
        theta: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        let law = MaterialLaw::from_vector(theta);
        let s = self.slopes(u);
        let scale = 1.0 / (self.kappa * self.dx());
        let m = self.m;
        let mut out = DVector::zeros(4);
        // Node i (0-based) receives (q_{i+1} − q_i)·scale, so interface j
        // feeds node j−1 with +q_j·scale and node j with −q_j·scale; its
        // adjoint weight is (w_{j−1} − w_j)·scale with out-of-range node
        // weights zero.
        for (j, &si) in s.iter().enumerate() {
            let w_hi = if j < m { w[j] } else { 0.0 };
            let w_lo = if j == 0 { 0.0 } else { w[j - 1] };
            let weight = (w_lo - w_hi) * scale;
            let g = law.nu_dtheta(si.abs());
            for c in 0..4 {
                out[c] += si * g[c] * weight;
            }
        }
        out
    }
}
