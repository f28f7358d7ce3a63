//! Symmetric positive-definite factorizations and small spectral routines.

use super::{Matrix, Scalar};
use crate::error::{Error, Result};

/// Pivots at or below this value mark the matrix as degenerate.
pub const PIVOT_FLOOR: f64 = 1e-12;
/// Absolute symmetry tolerance, scaled by `max(1, max|m|)`.
pub const SYMMETRY_TOL: f64 = 1e-10;

fn check_symmetric<T: Scalar>(m: &Matrix<T>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::shape("cholesky_spd", "square matrix", format!("{:?}", m.shape())));
    }
    let asym = m.asymmetry();
    let tol = T::lit(SYMMETRY_TOL) * m.max_abs().max(T::one());
    if asym > tol {
        return Err(Error::NotSymmetric(asym.as_f64()));
    }
    Ok(())
}

/// Lower-triangular `L` with `L Lᵀ = m`.
///
/// Only the lower triangle of `m` is read after the symmetry check.
pub fn cholesky_spd<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    check_symmetric(m)?;
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    let floor = T::lit(PIVOT_FLOOR);
    for j in 0..n {
        let mut diag = m.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            diag -= v * v;
        }
        if !(diag > floor) {
            return Err(Error::NotPositiveDefinite {
                index: j,
                value: diag.as_f64(),
            });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// `ln det m = 2 Σ ln L_ii`.
pub fn logdet_spd<T: Scalar>(m: &Matrix<T>) -> Result<T> {
    let l = cholesky_spd(m)?;
    Ok(logdet_from_cholesky(&l))
}

pub fn logdet_from_cholesky<T: Scalar>(l: &Matrix<T>) -> T {
    let two = T::lit(2.0);
    (0..l.rows()).map(|i| l.get(i, i).ln()).sum::<T>() * two
}

/// `m⁻¹` from a Cholesky factor of `m`; the result is exactly symmetric.
pub fn inverse_from_cholesky<T: Scalar>(l: &Matrix<T>) -> Matrix<T> {
    let n = l.rows();
    // Forward substitution for L⁻¹ (lower triangular).
    let mut linv = Matrix::zeros(n, n);
    for j in 0..n {
        linv.set(j, j, T::one() / l.get(j, j));
        for i in j + 1..n {
            let mut s = T::zero();
            for k in j..i {
                s += l.get(i, k) * linv.get(k, j);
            }
            linv.set(i, j, -s / l.get(i, i));
        }
    }
    // m⁻¹ = L⁻ᵀ L⁻¹
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = T::zero();
            for k in i..n {
                s += linv.get(k, i) * linv.get(k, j);
            }
            inv.set(i, j, s);
            inv.set(j, i, s);
        }
    }
    inv
}

pub fn spd_inverse<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(inverse_from_cholesky(&cholesky_spd(m)?))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted descending.
pub fn jacobi_eigenvalues<T: Scalar>(m: &Matrix<T>) -> Result<Vec<T>> {
    check_symmetric(m)?;
    let n = m.rows();
    let mut a = m.clone();
    let tol = T::epsilon() * T::lit(1e-2);
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j) * a.get(i, j))
            .sum();
        let total: T = a.as_slice().iter().map(|&v| v * v).sum();
        if off <= tol * tol * total.max(T::min_positive_value()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: Vec<T> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    Ok(eig)
}

/// Singular values by one-sided (Hestenes) Jacobi orthogonalization, sorted descending.
///
/// Returns `min(rows, cols)` values.
pub fn singular_values<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    // Orthogonalize the columns of whichever orientation has fewer of them.
    let a = if m.cols() > m.rows() { m.clone() } else { m.transpose() };
    // Work on rows of `a` (= columns of the thin orientation).
    let k = a.rows();
    let len = a.cols();
    let mut rows: Vec<Vec<T>> = (0..k).map(|i| a.row(i).to_vec()).collect();
    let tol = T::epsilon() * T::lit(10.0);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let (alpha, beta, gamma) = {
                    let (rp, rq) = (&rows[p], &rows[q]);
                    let mut alpha = T::zero();
                    let mut beta = T::zero();
                    let mut gamma = T::zero();
                    for t in 0..len {
                        alpha += rp[t] * rp[t];
                        beta += rq[t] * rq[t];
                        gamma += rp[t] * rq[t];
                    }
                    (alpha, beta, gamma)
                };
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == T::zero() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for idx in 0..len {
                    let xp = rows[p][idx];
                    let xq = rows[q][idx];
                    rows[p][idx] = c * xp - s * xq;
                    rows[q][idx] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<T> = rows
        .iter()
        .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).expect("finite singular values"));
    sv.truncate(m.rows().min(m.cols()));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cholesky_identity_and_diagonal() {
        assert_eq!(cholesky_spd(&Matrix::<f64>::identity(3)).unwrap(), Matrix::identity(3));
        let l = cholesky_spd(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert_eq!(l, Matrix::from_diag(&[2.0, 3.0]));
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(5, 5, &mut rng);
        let m = a.matmul_t(&a).add(&Matrix::identity(5));
        let l = cholesky_spd(&m).unwrap();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_eq!(l.get(i, j), 0.0);
            }
        }
        let rel = l.matmul_t(&l).sub(&m).frobenius_norm() / m.frobenius_norm();
        assert!(rel < 1e-9, "relative error {rel}");
    }

    #[test]
    fn cholesky_rejects_degenerate_and_asymmetric() {
        let singular = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky_spd(&singular),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
        let neg = Matrix::from_diag(&[1.0, -2.0]);
        assert!(matches!(logdet_spd(&neg), Err(Error::NotPositiveDefinite { .. })));
        let asym = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky_spd(&asym), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn logdet_small_cases() {
        assert_eq!(logdet_spd(&Matrix::<f64>::identity(4)).unwrap(), 0.0);
        let v = logdet_spd(&Matrix::from_diag(&[2.0, 3.0])).unwrap();
        assert!((v - 6f64.ln()).abs() < 1e-12);
        assert!((v - 1.791759).abs() < 1e-6);
    }

    #[test]
    fn inverse_is_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(6, 6, &mut rng);
        let m = a.matmul_t(&a).add(&Matrix::identity(6));
        let inv = spd_inverse(&m).unwrap();
        let err = inv.matmul(&m).sub(&Matrix::identity(6)).max_abs();
        assert!(err < 1e-10);
        assert_eq!(inv.asymmetry(), 0.0);
    }

    #[test]
    fn jacobi_diagonal_and_known_2x2() {
        let e = jacobi_eigenvalues(&Matrix::from_diag(&[1.0, 5.0, 3.0])).unwrap();
        assert_eq!(e, vec![5.0, 3.0, 1.0]);
        let m = Matrix::<f64>::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = jacobi_eigenvalues(&m).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_values_match_eigen_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c) in &[(4, 8), (8, 4), (5, 5)] {
            let z = random(r, c, &mut rng);
            let sv = singular_values(&z);
            let small = if r <= c { z.matmul_t(&z) } else { z.t_matmul(&z) };
            let eig = jacobi_eigenvalues(&small).unwrap();
            assert_eq!(sv.len(), r.min(c));
            for (s, e) in sv.iter().zip(&eig) {
                assert!((s * s - e).abs() < 1e-10, "{s} vs {e}");
            }
        }
    }

    #[test]
    fn works_in_single_precision() {
        let v = logdet_spd(&Matrix::from_diag(&[2.0f32, 3.0])).unwrap();
        assert!((v - 6f32.ln()).abs() < 1e-6);
    }
}
