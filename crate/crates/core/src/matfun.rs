//! Matrix functions φₖ and their ψ linear combinations applied to vectors.
//!
//! The φ family is defined by the series φₖ(z) = Σ_{i≥0} zⁱ/(i+k)!, with
//! φ₀(z) = eᶻ and the recurrence φ_{k+1}(z) = (φₖ(z) − 1/k!)/z. Products
//! φₖ(sA)·b for large A are approximated in a Krylov subspace,
//! φₖ(sA)b ≈ ‖b‖ V φₖ(sH) e₁, with V, H from an Arnoldi process. The small
//! Hessenberg factor is evaluated through one exponential of an augmented
//! matrix, which yields φₖ(sH)e₁ for every k at once.
//!
//! Dense evaluations (`phi_dense`, `expm_dense`) are kept as slow, simple
//! oracles against which the Krylov path is tested.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Parameters controlling the adaptive Arnoldi process.
#[derive(Debug, Clone)]
pub struct KrylovConfig {
    /// Hard cap on the Krylov subspace dimension.
    pub m_max: usize,
    /// Relative residual tolerance for adaptive basis growth.
    pub tol: f64,
    /// Run a second modified Gram-Schmidt pass per vector.
    pub reorthogonalize: bool,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        KrylovConfig {
            m_max: 60,
            tol: 1e-14,
            reorthogonalize: true,
        }
    }
}

impl KrylovConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_max < 1 {
            return Err(Error::Dimension {
                context: "KrylovConfig.m_max",
                expected: 1,
                got: self.m_max,
            });
        }
        if !(self.tol > 0.0) {
            return Err(Error::NonFinite { what: "Krylov tolerance" });
        }
        Ok(())
    }
}

/// Orthonormal Krylov basis with its projected Hessenberg matrix.
///
/// Satisfies A·V_m = V_{m+1}·H̃_m, where H̃_m is (m+1)×m upper-Hessenberg
/// and V₁ = b/‖b‖.
#[derive(Debug, Clone)]
pub struct KrylovBasis {
    /// n × m matrix of orthonormal basis vectors.
    pub v: DMatrix<f64>,
    /// (m+1) × m upper-Hessenberg projection.
    pub h: DMatrix<f64>,
    /// ‖b‖ of the starting vector.
    pub beta: f64,
    /// True if the process terminated early on an invariant subspace.
    pub breakdown: bool,
}

impl KrylovBasis {
    pub fn dim(&self) -> usize {
        self.v.ncols()
    }
}

/// Incremental Arnoldi process with modified Gram-Schmidt.
struct ArnoldiProcess {
    vectors: Vec<DVector<f64>>,
    /// Column j holds H[0..=j+1, j].
    h_cols: Vec<Vec<f64>>,
    beta: f64,
    breakdown: bool,
    reorthogonalize: bool,
}

impl ArnoldiProcess {
    fn start(b: &DVector<f64>, reorthogonalize: bool) -> Result<Self> {
        let beta = b.norm();
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(ArnoldiProcess {
            vectors: vec![b / beta],
            h_cols: Vec::new(),
            beta,
            breakdown: false,
            reorthogonalize,
        })
    }

    fn dim(&self) -> usize {
        self.h_cols.len()
    }

    /// Extends the basis by one vector. Returns false on happy breakdown.
    fn step(&mut self, apply: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>) -> bool {
        if self.breakdown {
            return false;
        }
        let m = self.h_cols.len();
        let mut w = apply(&self.vectors[m]);
        let mut col = vec![0.0; m + 2];
        for (i, vi) in self.vectors.iter().enumerate() {
            let hij = vi.dot(&w);
            w.axpy(-hij, vi, 1.0);
            col[i] = hij;
        }
        if self.reorthogonalize {
            for (i, vi) in self.vectors.iter().enumerate() {
                let corr = vi.dot(&w);
                w.axpy(-corr, vi, 1.0);
                col[i] += corr;
            }
        }
        let hnext = w.norm();
        col[m + 1] = hnext;
        self.h_cols.push(col);
        // Breakdown threshold relative to the column just produced.
        let scale = self.h_cols[m].iter().map(|x| x.abs()).fold(0.0, f64::max);
        if hnext <= 1e-14 * scale.max(1.0) {
            self.breakdown = true;
            return false;
        }
        self.vectors.push(w / hnext);
        true
    }

    /// Square m×m Hessenberg block.
    fn h_square(&self) -> DMatrix<f64> {
        let m = self.dim();
        let mut h = DMatrix::zeros(m, m);
        for j in 0..m {
            for i in 0..=(j + 1).min(m - 1) {
                h[(i, j)] = self.h_cols[j][i];
            }
        }
        h
    }

    /// Subdiagonal entry h_{m+1,m} of the last column.
    fn h_tail(&self) -> f64 {
        let m = self.dim();
        self.h_cols[m - 1][m]
    }

    fn into_basis(self) -> KrylovBasis {
        let m = self.dim();
        let n = self.vectors[0].len();
        let mut v = DMatrix::zeros(n, m);
        for (j, vj) in self.vectors.iter().take(m).enumerate() {
            v.set_column(j, vj);
        }
        let mut h = DMatrix::zeros(m + 1, m);
        for j in 0..m {
            for (i, &x) in self.h_cols[j].iter().enumerate() {
                if i <= m {
                    h[(i, j)] = x;
                }
            }
        }
        KrylovBasis {
            v,
            h,
            beta: self.beta,
            breakdown: self.breakdown,
        }
    }

    /// Combination Σₖ cₖ φₖ(scale·H)e₁ in the projected space, plus the
    /// standard posterior error estimate β·|scale|·h_{m+1,m}·|last entry|.
    fn projected_combination(&self, coeffs: &[f64], scale: f64) -> (DVector<f64>, f64) {
        let m = self.dim();
        let h = self.h_square() * scale;
        let phis = phi_e1_columns(coeffs.len(), &h);
        let mut small = DVector::zeros(m);
        for (k, &c) in coeffs.iter().enumerate() {
            if c != 0.0 {
                small.axpy(c, &phis[k], 1.0);
            }
        }
        let estimate = if self.breakdown {
            0.0
        } else {
            self.beta * scale.abs() * self.h_tail() * small[m - 1].abs()
        };
        (small, estimate)
    }

    fn lift(&self, small: &DVector<f64>) -> DVector<f64> {
        let n = self.vectors[0].len();
        let mut out = DVector::zeros(n);
        for (j, vj) in self.vectors.iter().take(self.dim()).enumerate() {
            out.axpy(self.beta * small[j], vj, 1.0);
        }
        out
    }
}

/// Runs the Arnoldi process on `apply_a` to dimension `cfg.m_max` (or happy
/// breakdown) and returns the resulting basis.
pub fn arnoldi(
    apply_a: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    cfg: &KrylovConfig,
) -> Result<KrylovBasis> {
    cfg.validate()?;
    let n = b.len();
    let mut proc = ArnoldiProcess::start(b, cfg.reorthogonalize)?;
    while proc.dim() < cfg.m_max.min(n) {
        if !proc.step(apply_a) {
            break;
        }
    }
    Ok(proc.into_basis())
}

/// φₖ(scale·A)·b through the Krylov projection.
pub fn phi_times_vector(
    k: usize,
    apply_a: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
    scale: f64,
    b: &DVector<f64>,
    cfg: &KrylovConfig,
) -> Result<DVector<f64>> {
    assert!(k >= 1, "phi_times_vector requires k >= 1");
    let mut coeffs = vec![0.0; k];
    coeffs[k - 1] = 1.0;
    psi_times_vector(&coeffs, apply_a, scale, b, cfg)
}

/// ψ product Σₖ coeffs[k−1]·φₖ(scale·A)·b with a single shared Arnoldi basis.
///
/// The basis is grown adaptively until the last-row residual estimate drops
/// below `cfg.tol` relative to ‖b‖, capped at `cfg.m_max`.
pub fn psi_times_vector(
    coeffs: &[f64],
    apply_a: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
    scale: f64,
    b: &DVector<f64>,
    cfg: &KrylovConfig,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    let n = b.len();
    let norm_b = b.norm();
    if norm_b == 0.0 {
        return Ok(DVector::zeros(n));
    }
    if scale == 0.0 {
        // φₖ(0) = 1/k!
        let mut w = 0.0;
        let mut kfact = 1.0;
        for (k, &c) in coeffs.iter().enumerate() {
            kfact *= (k + 1) as f64;
            w += c / kfact;
        }
        return Ok(b * w);
    }
    let mut proc = ArnoldiProcess::start(b, cfg.reorthogonalize)?;
    let cap = cfg.m_max.min(n);
    let check_every = 4;
    loop {
        let growing = proc.dim() < cap && !proc.breakdown;
        let due = proc.breakdown
            || proc.dim() >= cap
            || (proc.dim() >= 2 && proc.dim() % check_every == 0);
        if due {
            let (small, estimate) = proc.projected_combination(coeffs, scale);
            if estimate <= cfg.tol * norm_b || proc.breakdown {
                return Ok(proc.lift(&small));
            }
            if !growing {
                return Err(Error::KrylovNonConvergence {
                    m_max: cfg.m_max,
                    tol: cfg.tol,
                    estimate: estimate / norm_b,
                });
            }
        }
        if growing {
            proc.step(apply_a);
        }
    }
}

/// ψ(scale·Aᵀ)·b, the adjoint of `psi_times_vector` for a state-independent
/// operator. Callers pass the transpose action of the forward operator.
pub fn psi_transpose_times_vector(
    coeffs: &[f64],
    apply_a_transpose: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
    scale: f64,
    b: &DVector<f64>,
    cfg: &KrylovConfig,
) -> Result<DVector<f64>> {
    psi_times_vector(coeffs, apply_a_transpose, scale, b, cfg)
}

/// φₖ(M)·e₁ for k = 1..=k_max, all from one exponential of the
/// (m+k_max)-dimensional augmented matrix [[M, e₁·e₁ᵀ-block],[0, shift]].
pub fn phi_e1_columns(k_max: usize, m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let dim = m.nrows();
    let aug = dim + k_max;
    let mut a = DMatrix::zeros(aug, aug);
    a.view_mut((0, 0), (dim, dim)).copy_from(m);
    // b = e1 in the first augmented column, then a nilpotent upward shift:
    // column dim+c of exp(a) restricted to the top block equals φ_{c+1}(M)e₁.
    a[(0, dim)] = 1.0;
    for c in 0..k_max.saturating_sub(1) {
        a[(dim + c, dim + c + 1)] = 1.0;
    }
    let e = expm_dense(&a).expect("augmented exponential");
    (0..k_max)
        .map(|c| DVector::from(e.view((0, dim + c), (dim, 1)).column(0).clone_owned()))
        .collect()
}

const PHI_SERIES_THRESHOLD: f64 = 4.0;
const PHI_SERIES_MAX_TERMS: usize = 120;

/// Dense φₖ(Z), the testing oracle.
///
/// Small arguments use the truncated Taylor series directly; larger ones fall
/// back to the block-augmented exponential, which realizes the recurrence
/// φ_{k+1}(z) = (φₖ(z) − 1/k!)/z without explicit division.
pub fn phi_dense(k: usize, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.nrows() != z.ncols() {
        return Err(Error::NonSquare {
            rows: z.nrows(),
            cols: z.ncols(),
        });
    }
    if k == 0 {
        return expm_dense(z);
    }
    let n = z.nrows();
    let norm = one_norm(z);
    if norm <= PHI_SERIES_THRESHOLD {
        // Σ Zⁱ/(i+k)!
        let mut fact = 1.0;
        for i in 1..=k {
            fact *= i as f64;
        }
        let mut acc = DMatrix::identity(n, n) / fact;
        let mut term = DMatrix::identity(n, n) / fact;
        for i in 1..=PHI_SERIES_MAX_TERMS {
            term = (&term * z) / (i + k) as f64;
            acc += &term;
            if one_norm(&term) <= f64::EPSILON * one_norm(&acc) {
                return Ok(acc);
            }
        }
        return Err(Error::SeriesDivergence {
            terms: PHI_SERIES_MAX_TERMS,
            norm,
        });
    }
    // Augmented block matrix [[Z, I, 0...],[0, 0, I...],...] of size (k+1)n:
    // top-right n×n block of its exponential is φₖ(Z).
    let aug = (k + 1) * n;
    let mut a = DMatrix::zeros(aug, aug);
    a.view_mut((0, 0), (n, n)).copy_from(z);
    for b in 0..k {
        for i in 0..n {
            a[(b * n + i, (b + 1) * n + i)] = 1.0;
        }
    }
    let e = expm_dense(&a)?;
    Ok(e.view((0, k * n), (n, n)).clone_owned())
}

/// Scalar convenience wrapper over `phi_dense`.
pub fn phi_scalar(k: usize, z: f64) -> f64 {
    let m = DMatrix::from_element(1, 1, z);
    phi_dense(k, &m).expect("scalar phi")[(0, 0)]
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

// Padé scaling-and-squaring after Higham (2005). Theta bounds for the
// [3/3] .. [13/13] diagonal approximants.
const THETA: [(usize, f64); 5] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
    (13, 5.371920351148152e0),
];

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Dense matrix exponential via order-13 Padé with scaling and squaring.
pub fn expm_dense(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::NonSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let norm = one_norm(a);
    if !norm.is_finite() || norm > 1e12 {
        return Err(Error::ExpOverflow { norm });
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }

    for &(order, theta) in &THETA[..4] {
        if norm <= theta {
            return pade_low(a, order);
        }
    }

    let theta13 = THETA[4].1;
    let squarings = if norm <= theta13 {
        0
    } else {
        (norm / theta13).log2().ceil() as u32
    };
    let a_scaled = a / 2f64.powi(squarings as i32);

    let a2 = &a_scaled * &a_scaled;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let b = &PADE13;
    let id = DMatrix::identity(n, n);

    let u_inner = &a6 * (b[13] * &a6 + b[11] * &a4 + b[9] * &a2)
        + b[7] * &a6
        + b[5] * &a4
        + b[3] * &a2
        + b[1] * &id;
    let u = &a_scaled * u_inner;
    let v = &a6 * (b[12] * &a6 + b[10] * &a4 + b[8] * &a2)
        + b[6] * &a6
        + b[4] * &a4
        + b[2] * &a2
        + b[0] * &id;

    let mut r = solve_pade(&u, &v)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

fn pade_low(a: &DMatrix<f64>, order: usize) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    // b_k = (2m-k)! m! / ((2m)! k! (m-k)!)
    let m = order;
    let mut b = vec![0.0f64; m + 1];
    for k in 0..=m {
        let mut num = 1.0;
        for i in 1..=(m - k) {
            num *= (m - k + i) as f64 / i as f64; // binom(m, k) style build-up below
        }
        // Compute via factorial ratio directly in f64 (orders <= 9, exact enough).
        b[k] = fact(2 * m - k) * fact(m) / (fact(2 * m) * fact(k) * fact(m - k));
        let _ = num;
    }
    let id = DMatrix::identity(n, n);
    let a2 = a * a;
    let mut even = b[0] * &id;
    let mut odd = b[1] * &id;
    let mut pow = id.clone();
    for k in (2..=m).step_by(2) {
        pow = &pow * &a2;
        even += b[k] * &pow;
        if k + 1 <= m {
            odd += b[k + 1] * &pow;
        }
    }
    let u = a * odd;
    solve_pade(&u, &even)
}

fn fact(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product::<f64>().max(1.0)
}

/// Solves (V - U) X = (V + U) for the Padé quotient.
fn solve_pade(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lhs = v - u;
    let rhs = v + u;
    lhs.lu()
        .solve(&rhs)
        .ok_or(Error::ExpOverflow { norm: f64::INFINITY })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rng: &mut StdRng, n: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0) * scale)
    }

    fn random_vector(rng: &mut StdRng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn expm_zero_is_identity() {
        let e = expm_dense(&DMatrix::zeros(3, 3)).unwrap();
        assert!((e - DMatrix::identity(3, 3)).norm() < 1e-15);
    }

    #[test]
    fn expm_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let e = expm_dense(&a).unwrap();
        assert!((e[(0, 0)] - 1f64.exp()).abs() < 1e-14);
        assert!((e[(1, 1)] - (-1f64).exp()).abs() < 1e-15);
        assert!(e[(0, 1)].abs() < 1e-16 && e[(1, 0)].abs() < 1e-16);
    }

    #[test]
    fn expm_nilpotent() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = expm_dense(&a).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((e - expected).norm() < 1e-15);
    }

    #[test]
    fn expm_large_norm_scaling() {
        // e^(tI) = e^t I even for t requiring several squarings
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![20.0, -20.0, 3.0]));
        let e = expm_dense(&a).unwrap();
        assert!((e[(0, 0)] - 20f64.exp()).abs() / 20f64.exp() < 1e-13);
        assert!((e[(1, 1)] - (-20f64).exp()).abs() / (-20f64).exp() < 1e-12);
    }

    #[test]
    fn expm_rejects_non_square() {
        assert!(matches!(
            expm_dense(&DMatrix::zeros(2, 3)),
            Err(Error::NonSquare { .. })
        ));
    }

    #[test]
    fn phi0_of_zero_is_identity() {
        let p = phi_dense(0, &DMatrix::zeros(2, 2)).unwrap();
        assert!((p - DMatrix::identity(2, 2)).norm() < 1e-15);
    }

    #[test]
    fn phi3_of_zero_is_sixth_identity() {
        let p = phi_dense(3, &DMatrix::zeros(2, 2)).unwrap();
        assert!((p - DMatrix::identity(2, 2) / 6.0).norm() < 1e-16);
    }

    #[test]
    fn phi1_scalar_value() {
        // φ₁(1) = e - 1
        assert!((phi_scalar(1, 1.0) - (1f64.exp() - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn phi_recurrence_scalar_grid() {
        // |φ_{k+1}(z) − (φ_k(z) − 1/k!)/z| small across k and z
        let mut kfact = 1.0;
        for k in 1usize..=5 {
            kfact *= k as f64;
            let mut z: f64 = -5.0;
            while z <= 5.0 {
                if z.abs() > 1e-3 {
                    let lhs = phi_scalar(k + 1, z);
                    let rhs = (phi_scalar(k, z) - 1.0 / kfact) / z;
                    assert!(
                        (lhs - rhs).abs() <= 1e-12,
                        "k={k} z={z}: {lhs} vs {rhs}"
                    );
                }
                z += 0.25;
            }
        }
    }

    #[test]
    fn phi_dense_large_norm_fallback() {
        // Diagonal matrix with norm above the series threshold: compare with
        // the scalar closed form φ₂(z) = (e^z - 1 - z)/z².
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![6.0, -7.5]));
        let p = phi_dense(2, &a).unwrap();
        for &z in &[6.0f64, -7.5] {
            let expect = (z.exp() - 1.0 - z) / (z * z);
            let idx = if z == 6.0 { 0 } else { 1 };
            assert!((p[(idx, idx)] - expect).abs() / expect.abs() < 1e-12);
        }
    }

    #[test]
    fn arnoldi_identity_breaks_down() {
        let b = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let basis = arnoldi(&mut |v| v.clone(), &b, &KrylovConfig::default()).unwrap();
        assert_eq!(basis.dim(), 1);
        assert!(basis.breakdown);
        assert!((basis.h[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((basis.v.column(0) * basis.beta - b).norm() < 1e-14);
    }

    #[test]
    fn arnoldi_recovers_eigenvalues() {
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = DMatrix::from_diagonal(&d);
        let b = DVector::from_element(3, 1.0 / 3f64.sqrt());
        let basis = arnoldi(&mut |v| &a * v, &b, &KrylovConfig::default()).unwrap();
        assert_eq!(basis.dim(), 3);
        let h = basis.h.view((0, 0), (3, 3)).clone_owned();
        let mut eigs = h.symmetric_eigenvalues().iter().cloned().collect::<Vec<_>>();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (e, t) in eigs.iter().zip([1.0, 2.0, 3.0]) {
            assert!((e - t).abs() < 1e-10);
        }
    }

    #[test]
    fn arnoldi_relation_and_orthonormality() {
        let mut rng = StdRng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 20, 1.0);
        let b = random_vector(&mut rng, 20);
        let cfg = KrylovConfig {
            m_max: 20,
            ..Default::default()
        };
        let basis = arnoldi(&mut |v| &a * v, &b, &cfg).unwrap();
        let m = basis.dim();
        // orthonormality
        let gram = basis.v.transpose() * &basis.v;
        let dev = (&gram - DMatrix::identity(m, m)).amax();
        assert!(dev <= 1e-12, "orthonormality deviation {dev}");
        // Arnoldi relation A V_m = V_{m+1} H~
        let av = &a * &basis.v;
        let mut v_ext = DMatrix::zeros(20, m + 1);
        v_ext.view_mut((0, 0), (20, m)).copy_from(&basis.v);
        if m < 20 {
            // reconstruct v_{m+1} from residual
            let r = &av.column(m - 1).clone_owned()
                - &(basis.v.clone()
                    * basis.h.view((0, m - 1), (m, 1)).clone_owned());
            let nrm = r.norm();
            if nrm > 0.0 {
                v_ext.set_column(m, &(r / nrm));
            }
        }
        let lhs = av;
        let rhs = &v_ext * &basis.h;
        let rel = (&lhs - &rhs).norm() / a.norm();
        assert!(rel <= 1e-10, "Arnoldi relation residual {rel}");
    }

    #[test]
    fn arnoldi_rejects_zero_vector() {
        let b = DVector::zeros(4);
        assert!(matches!(
            arnoldi(&mut |v: &DVector<f64>| v.clone(), &b, &KrylovConfig::default()),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn phi_times_vector_zero_scale() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 6, 1.0);
        let b = random_vector(&mut rng, 6);
        let out =
            phi_times_vector(1, &mut |v| &a * v, 0.0, &b, &KrylovConfig::default()).unwrap();
        assert!((out - &b).norm() < 1e-15);
    }

    #[test]
    fn phi2_scalar_closed_form() {
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DVector::from_element(1, 1.0);
        let out =
            phi_times_vector(2, &mut |v| &a * v, 1.0, &b, &KrylovConfig::default()).unwrap();
        let expect = (2f64.exp() - 1.0 - 2.0) / 4.0;
        assert!((out[0] - expect).abs() < 1e-13);
    }

    #[test]
    fn phi_krylov_matches_dense() {
        let mut rng = StdRng::seed_from_u64(11);
        let n = 10;
        let a = random_matrix(&mut rng, n, 1.0);
        let b = random_vector(&mut rng, n);
        let cfg = KrylovConfig {
            m_max: n,
            ..Default::default()
        };
        let out = phi_times_vector(1, &mut |v| &a * v, 0.1, &b, &cfg).unwrap();
        let dense = phi_dense(1, &(&a * 0.1)).unwrap() * &b;
        assert!((out - &dense).norm() / dense.norm() < 1e-10);
    }

    #[test]
    fn psi_single_term_equals_phi() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 8, 1.0);
        let b = random_vector(&mut rng, 8);
        let cfg = KrylovConfig {
            m_max: 8,
            ..Default::default()
        };
        let psi = psi_times_vector(&[1.0, 0.0, 0.0], &mut |v| &a * v, 0.3, &b, &cfg).unwrap();
        let phi = phi_times_vector(1, &mut |v| &a * v, 0.3, &b, &cfg).unwrap();
        assert!((psi - phi).norm() < 1e-13);
    }

    #[test]
    fn psi_zero_coefficients() {
        let mut rng = StdRng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 5, 1.0);
        let b = random_vector(&mut rng, 5);
        let out = psi_times_vector(
            &[0.0, 0.0, 0.0],
            &mut |v| &a * v,
            0.5,
            &b,
            &KrylovConfig::default(),
        )
        .unwrap();
        assert!(out.norm() < 1e-14);
    }

    #[test]
    fn psi_at_zero_argument() {
        // p = (1,1,0) at Z = 0 gives (1 + 1/2) b
        let b = DVector::from_vec(vec![2.0, -1.0]);
        let out = psi_times_vector(
            &[1.0, 1.0, 0.0],
            &mut |v: &DVector<f64>| v * 0.0,
            1.0,
            &b,
            &KrylovConfig::default(),
        )
        .unwrap();
        assert!((out - &b * 1.5).norm() < 1e-14);
    }

    #[test]
    fn psi_transpose_symmetric_matches_forward() {
        let mut rng = StdRng::seed_from_u64(5);
        let raw = random_matrix(&mut rng, 7, 1.0);
        let a = (&raw + raw.transpose()) * 0.5;
        let b = random_vector(&mut rng, 7);
        let cfg = KrylovConfig {
            m_max: 7,
            ..Default::default()
        };
        let p = [0.4, 0.3, 0.3];
        let fwd = psi_times_vector(&p, &mut |v| &a * v, 0.2, &b, &cfg).unwrap();
        let adj = psi_transpose_times_vector(&p, &mut |v| &a * v, 0.2, &b, &cfg).unwrap();
        assert!((fwd - adj).norm() < 1e-12);
    }

    #[test]
    fn psi_transpose_identity_dense() {
        // ψ(sA)ᵀ v equals ψ(sAᵀ) v, checked against dense matricization
        let mut rng = StdRng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 8, 1.0);
        let v = random_vector(&mut rng, 8);
        let cfg = KrylovConfig {
            m_max: 8,
            ..Default::default()
        };
        let p = [0.7, 0.2, 0.1];
        let s = 0.37;
        let at = a.transpose();
        let adj = psi_transpose_times_vector(&p, &mut |x| &at * x, s, &v, &cfg).unwrap();
        let mut dense = DMatrix::zeros(8, 8);
        for (k, &c) in p.iter().enumerate() {
            dense += phi_dense(k + 1, &(&a * s)).unwrap() * c;
        }
        let expect = dense.transpose() * &v;
        assert!((adj - &expect).norm() / expect.norm() < 1e-12);
    }

    #[test]
    fn phi1_transpose_nilpotent_by_hand() {
        // A = [[0,1],[0,0]], φ₁(Aᵀ)b for b = (1,0): series terminates,
        // φ₁(Aᵀ) = I + Aᵀ/2, result (1, 1/2).
        let at = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let out = psi_transpose_times_vector(
            &[1.0, 0.0, 0.0],
            &mut |v| &at * v,
            1.0,
            &b,
            &KrylovConfig::default(),
        )
        .unwrap();
        assert!((out[0] - 1.0).abs() < 1e-14);
        assert!((out[1] - 0.5).abs() < 1e-14);
    }
}
