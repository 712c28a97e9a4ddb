//! Dense linear algebra helpers shared by the message passing and gradient code.
//!
//! Every SPD inverse goes through a Cholesky factorization guarded by a cheap
//! reciprocal condition estimate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Smallest reciprocal condition estimate accepted before a solve is refused.
pub const RCOND_MIN: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization with a reciprocal condition check on the factor diagonal.
pub fn chol(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let c = Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::Numerical(format!("{what}: matrix is not positive definite")))?;
    let l = c.l_dirty();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if !(lo.is_finite() && hi.is_finite()) || hi == 0.0 || (lo / hi).powi(2) < RCOND_MIN {
        return Err(Error::Numerical(format!(
            "{what}: reciprocal condition estimate below {RCOND_MIN:e}"
        )));
    }
    Ok(c)
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&chol(m, what)?.inverse()))
}

pub fn spd_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Precision `psi psi^T` from its lower Cholesky factor.
pub fn precision_from_factor(psi: &DMatrix<f64>) -> DMatrix<f64> {
    psi * psi.transpose()
}

/// Covariance `(psi psi^T)^{-1}` computed from triangular solves.
pub fn covariance_from_factor(psi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = psi.nrows();
    let inv = psi
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Numerical("singular precision factor".into()))?;
    Ok(symmetrize(&(inv.transpose() * inv)))
}

/// Lower Cholesky factor of the inverse of a covariance matrix.
pub fn factor_from_covariance(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let prec = spd_inverse(cov, "covariance")?;
    Ok(chol(&prec, "precision")?.l())
}

/// `sum_i ln psi_ii`, i.e. half the log determinant of the precision.
pub fn half_log_det_factor(psi: &DMatrix<f64>) -> f64 {
    (0..psi.nrows()).map(|i| psi[(i, i)].ln()).sum()
}

/// `ln N(y | mean, (psi psi^T)^{-1})`.
pub fn mvn_logpdf_factor(y: &DVector<f64>, mean: &DVector<f64>, psi: &DMatrix<f64>) -> f64 {
    let e = y - mean;
    let z = psi.tr_mul(&e);
    -0.5 * (y.len() as f64) * LN_2PI + half_log_det_factor(psi) - 0.5 * z.norm_squared()
}

/// `ln N(y | mean, cov)`.
pub fn mvn_logpdf_cov(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let c = chol(cov, "covariance")?;
    let e = y - mean;
    let sol = c.solve(&e);
    Ok(-0.5 * (y.len() as f64) * LN_2PI - 0.5 * spd_log_det(&c) - 0.5 * e.dot(&sol))
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn sample_mvn_cov<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let l = chol(cov, "covariance")?.l();
    Ok(mean + l * standard_normal_vec(rng, mean.len()))
}

/// Draw from `N(mean, (psi psi^T)^{-1})`.
pub fn sample_mvn_factor<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    psi: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let z = standard_normal_vec(rng, mean.len());
    let x = psi
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::Numerical("singular precision factor".into()))?;
    Ok(mean + x)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Solve `V = Q + A V A^T` by fixed-point iteration. Returns `None` when `A` is not stable.
pub fn stationary_covariance(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if spectral_radius(a) >= 1.0 {
        return None;
    }
    let mut v = q.clone();
    for _ in 0..100_000 {
        let next = symmetrize(&(q + a * &v * a.transpose()));
        let diff = (&next - &v).amax();
        v = next;
        if diff <= 1e-14 * v.amax().max(1.0) {
            break;
        }
    }
    Some(v)
}

/// Lower-triangular entries in column-major order.
pub fn lower_indices(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |j| (j..n).map(move |i| (i, j)))
}

pub fn lower_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        for i in 0..j.min(m.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn factor_round_trip() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let psi = factor_from_covariance(&cov).unwrap();
        let back = covariance_from_factor(&psi).unwrap();
        assert_relative_eq!(back, cov, epsilon = 1e-12);
    }

    #[test]
    fn logpdf_forms_agree() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.7]);
        let psi = factor_from_covariance(&cov).unwrap();
        let y = DVector::from_vec(vec![0.3, -1.1]);
        let mu = DVector::from_vec(vec![0.1, 0.2]);
        let a = mvn_logpdf_cov(&y, &mu, &cov).unwrap();
        let b = mvn_logpdf_factor(&y, &mu, &psi);
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn ill_conditioned_rejected() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-14]));
        assert!(chol(&m, "m").is_err());
    }

    #[test]
    fn stationary_covariance_scalar() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let q = DMatrix::from_element(1, 1, 1.0);
        let v = stationary_covariance(&a, &q).unwrap();
        assert_relative_eq!(v[(0, 0)], 1.0 / 0.75, epsilon = 1e-12);
        assert!(stationary_covariance(&DMatrix::from_element(1, 1, 1.0), &q).is_none());
    }
}
