//! Cyclic Jacobi eigenvalues for small dense symmetric matrices.

use crate::error::{LabError, Result};
use crate::scalar::Scalar;

pub const MAX_SWEEPS: usize = 100;

/// Largest `|a_ij - a_ji|` relative to `max(1, max |a_ij|)`.
pub fn asymmetry<S: Scalar>(a: &[S], n: usize) -> S {
    let scale = a.iter().fold(S::one(), |m, v| m.max(v.abs()));
    let mut worst = S::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[i * n + j] - a[j * n + i]).abs());
        }
    }
    worst / scale
}

fn off_diagonal_norm<S: Scalar>(a: &[S], n: usize) -> S {
    let mut total = S::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total = total + a[i * n + j] * a[i * n + j];
            }
        }
    }
    total.sqrt()
}

/// Eigenvalues (ascending) of a row-major symmetric `n x n` matrix.
///
/// Sweeps until the off-diagonal Frobenius norm is at most
/// `1e-12 * max(|trace|, ||A||_F)`, which is `1e-12 * trace` for PSD input.
pub fn symmetric_eigenvalues<S: Scalar>(matrix: &[S], n: usize) -> Result<Vec<S>> {
    if matrix.len() != n * n {
        return Err(LabError::Input(format!("matrix has {} entries, expected {}", matrix.len(), n * n)));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Input("matrix has non-finite entries".into()));
    }
    let sym_tol = S::lit(1e-12).max(S::epsilon() * S::lit(64.0));
    if asymmetry(matrix, n) > sym_tol {
        return Err(LabError::Input("matrix is not symmetric".into()));
    }
    let mut a = matrix.to_vec();
    // symmetrize exactly
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = (a[i * n + j] + a[j * n + i]) * S::lit(0.5);
            a[i * n + j] = avg;
            a[j * n + i] = avg;
        }
    }
    let trace: S = (0..n).map(|i| a[i * n + i]).sum();
    let frobenius = a.iter().map(|&v| v * v).sum::<S>().sqrt();
    let tol = S::lit(1e-12).max(S::epsilon()) * trace.abs().max(frobenius);

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a, n) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (S::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let t = if theta == S::zero() { S::one() } else { t };
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = S::zero();
                a[q * n + p] = S::zero();
            }
        }
    }
    if off_diagonal_norm(&a, n) > tol * S::lit(1e3) {
        return Err(LabError::Domain("Jacobi iteration did not converge".into()));
    }
    let mut eig: Vec<S> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_identity_and_diagonal() {
        let c = 2.5;
        let mut m = vec![0.0; 9];
        for i in 0..3 {
            m[i * 3 + i] = c;
        }
        assert_eq!(symmetric_eigenvalues(&m, 3).unwrap()[0], c);
        let d = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        assert_eq!(symmetric_eigenvalues(&d, 3).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn two_by_two_closed_form() {
        let m = [2.0f64, 1.0, 1.0, 2.0];
        let e = symmetric_eigenvalues(&m, 2).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = [1.0, 2.0, 0.0, 1.0];
        assert!(matches!(symmetric_eigenvalues(&m, 2), Err(LabError::Input(_))));
    }

    #[test]
    fn f32_matrix() {
        let m = [4.0f32, 1.0, 1.0, 3.0];
        let e = symmetric_eigenvalues(&m, 2).unwrap();
        let expect = 3.5 - (1.25f32).sqrt();
        assert!((e[0] - expect).abs() < 1e-5);
    }
}
