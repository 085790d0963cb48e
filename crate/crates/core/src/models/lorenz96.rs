//! The Lorenz-96 lattice with cyclic coupling, plus its 34-component
//! linear observation operator and the spin-up initial profile.

use nalgebra::{DMatrix, DVector};

use crate::model::OdeModel;

/// Cyclic Lorenz-96 system of dimension K.
///
/// Two sign conventions are supported. The default places the linear term
/// inside the quadratic product,
///
///   dy^j/dt = −y^{j−1}·(y^{j−2} − y^{j+1} − y^j) + F,
///
/// while `standard_form` uses the conventional
///
///   dy^j/dt = −y^{j−1}·(y^{j−2} − y^{j+1}) − y^j + F.
///
/// Both are chaotic at F = 8 and all derivative actions are exact for the
/// selected convention.
#[derive(Debug, Clone)]
pub struct Lorenz96 {
    pub k: usize,
    pub forcing: f64,
    pub standard_form: bool,
}

impl Lorenz96 {
    pub fn grouped_form(k: usize) -> Self {
        assert!(k >= 4, "Lorenz-96 needs at least 4 components");
        Lorenz96 {
            k,
            forcing: 8.0,
            standard_form: false,
        }
    }

    pub fn standard_form(k: usize) -> Self {
        Lorenz96 {
            standard_form: true,
            ..Self::grouped_form(k)
        }
    }

    #[inline]
    fn wrap(&self, j: isize) -> usize {
        j.rem_euclid(self.k as isize) as usize
    }
}

impl OdeModel for Lorenz96 {
    fn dim(&self) -> usize {
        self.k
    }

    fn rhs(&self, y: &DVector<f64>) -> DVector<f64> {
        let k = self.k;
        DVector::from_fn(k, |j, _| {
            let j = j as isize;
            let ym1 = y[self.wrap(j - 1)];
            let ym2 = y[self.wrap(j - 2)];
            let yp1 = y[self.wrap(j + 1)];
            let yj = y[self.wrap(j)];
            if self.standard_form {
                -ym1 * (ym2 - yp1) - yj + self.forcing
            } else {
                -ym1 * (ym2 - yp1 - yj) + self.forcing
            }
        })
    }

    fn jac_vec(&self, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let k = self.k;
        DVector::from_fn(k, |j, _| {
            let j = j as isize;
            let jm1 = self.wrap(j - 1);
            let jm2 = self.wrap(j - 2);
            let jp1 = self.wrap(j + 1);
            let jj = self.wrap(j);
            if self.standard_form {
                -v[jm1] * (y[jm2] - y[jp1]) - y[jm1] * (v[jm2] - v[jp1]) - v[jj]
            } else {
                -v[jm1] * (y[jm2] - y[jp1] - y[jj]) - y[jm1] * (v[jm2] - v[jp1] - v[jj])
            }
        })
    }

    fn jac_t_vec(&self, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        // Scatter form of the transpose: component i of f depends on
        // indices i−2, i−1, i, i+1, so row i of J contributes to those
        // columns of Jᵀw.
        let k = self.k;
        let mut out = DVector::zeros(k);
        for i in 0..k {
            let i = i as isize;
            let im1 = self.wrap(i - 1);
            let im2 = self.wrap(i - 2);
            let ip1 = self.wrap(i + 1);
            let ii = self.wrap(i);
            let wi = w[ii];
            if self.standard_form {
                out[im1] += -(y[im2] - y[ip1]) * wi;
                out[im2] += -y[im1] * wi;
                out[ip1] += y[im1] * wi;
                out[ii] += -wi;
            } else {
                out[im1] += -(y[im2] - y[ip1] - y[ii]) * wi;
                out[im2] += -y[im1] * wi;
                out[ip1] += y[im1] * wi;
                out[ii] += y[im1] * wi;
            }
        }
        out
    }
}

/// Pre-spin-up profile y^j = 1 + 0.1·mod(j, 5) with 1-based j.
pub fn lorenz96_initial_profile(k: usize) -> DVector<f64> {
    DVector::from_fn(k, |i, _| 1.0 + 0.1 * (((i + 1) % 5) as f64))
}

/// The 34×40 observation matrix: components y¹, y³, …, y¹⁹ (odd indices),
/// y²¹ through y⁴⁰, then the four partial sums Σ₁..₁₀, Σ₁..₂₀, Σ₂₁..₄₀ and
/// Σ₃₁..₄₀. The last two sums overlap; the operator is used as listed.
pub fn lorenz96_observation_matrix() -> DMatrix<f64> {
    let mut h = DMatrix::zeros(34, 40);
    let mut row = 0;
    for j in (1..=19).step_by(2) {
        h[(row, j - 1)] = 1.0;
        row += 1;
    }
    for j in 21..=40 {
        h[(row, j - 1)] = 1.0;
        row += 1;
    }
    for (lo, hi) in [(1, 10), (1, 20), (21, 40), (31, 40)] {
        for j in lo..=hi {
            h[(row, j - 1)] = 1.0;
        }
        row += 1;
    }
    assert_eq!(row, 34);
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::adjoint_pair_deviation;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rhs_at_zero_is_forcing() {
        for model in [Lorenz96::grouped_form(40), Lorenz96::standard_form(40)] {
            let f = model.rhs(&DVector::zeros(40));
            assert!(f.iter().all(|&v| v == 8.0));
        }
    }

    #[test]
    fn jv_matches_central_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        for model in [Lorenz96::grouped_form(12), Lorenz96::standard_form(12)] {
            let y = DVector::from_fn(12, |_, _| rng.gen_range(-2.0..2.0));
            let v = DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
            let eps = 1e-6;
            let fd = (model.rhs(&(&y + &v * eps)) - model.rhs(&(&y - &v * eps))) / (2.0 * eps);
            let jv = model.jac_vec(&y, &v);
            assert!((jv - &fd).norm() / fd.norm() < 1e-7);
        }
    }

    #[test]
    fn adjoint_pair_is_exact() {
        let mut rng = StdRng::seed_from_u64(12);
        for model in [Lorenz96::grouped_form(40), Lorenz96::standard_form(40)] {
            assert!(adjoint_pair_deviation(&model, &mut rng, 50) < 1e-13);
        }
    }

    #[test]
    fn cyclic_shift_equivariance() {
        let mut rng = StdRng::seed_from_u64(13);
        let model = Lorenz96::grouped_form(40);
        let y = DVector::from_fn(40, |_, _| rng.gen_range(-2.0..2.0));
        let shift = |x: &DVector<f64>| DVector::from_fn(40, |i, _| x[(i + 39) % 40]);
        let lhs = model.rhs(&shift(&y));
        let rhs = shift(&model.rhs(&y));
        assert!((lhs - rhs).norm() < 1e-14);
    }

    #[test]
    fn initial_profile_values() {
        let y = lorenz96_initial_profile(40);
        // j = 1 → 1.1, j = 5 → 1.0, j = 40 → mod(40,5) = 0 → 1.0
        assert!((y[0] - 1.1).abs() < 1e-15);
        assert!((y[4] - 1.0).abs() < 1e-15);
        assert!((y[39] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn observation_matrix_basis_and_ones() {
        let h = lorenz96_observation_matrix();
        let e1 = DVector::from_fn(40, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let he1 = &h * &e1;
        assert_eq!(he1[0], 1.0);
        assert_eq!(he1.rows(30, 4).as_slice(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(he1.iter().filter(|&&v| v != 0.0).count(), 3);

        let ones = DVector::from_element(40, 1.0);
        let hy = &h * &ones;
        assert!(hy.rows(0, 30).iter().all(|&v| v == 1.0));
        assert_eq!(hy.rows(30, 4).as_slice(), &[10.0, 20.0, 20.0, 10.0]);
    }
}
