use nalgebra::{DMatrix, SymmetricEigen};

use super::{NumericsError, Result};

/// Row-major `[m,k] · [k,n]` in f64.
pub fn matmul_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    super::tensor::matmul_into(a, b, &mut out, m, k, n);
    out
}

pub fn frobenius_norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Principal square root of a symmetric PSD `n×n` matrix (row-major) via a
/// symmetric eigendecomposition. Eigenvalues down to `-1e-8` are clamped to
/// zero; the input must be symmetric to within `1e-6` (relative to its scale).
pub fn matrix_sqrt_psd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n || n == 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "matrix_sqrt_psd",
            lhs: vec![a.len()],
            rhs: vec![n, n],
        });
    }
    let scale = 1.0 + a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((a[i * n + j] - a[j * n + i]).abs());
        }
    }
    if asym > 1e-6 * scale {
        return Err(NumericsError::NotSymmetric(asym));
    }
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[i * n + j] + a[j * n + i]));
    let eig = SymmetricEigen::new(m);
    let floor = -1e-8 * scale;
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < floor) {
        return Err(NumericsError::Invalid(format!(
            "matrix_sqrt_psd: negative eigenvalue {bad:e}"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let b = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((0..n * n).map(|idx| b[(idx / n, idx % n)]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn identity_and_diagonal() {
        let i = matrix_sqrt_psd(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(i.len(), 4);
        assert!((i[0] - 1.0).abs() < 1e-12 && i[1].abs() < 1e-12 && (i[3] - 1.0).abs() < 1e-12);
        let d = matrix_sqrt_psd(&[4.0, 0.0, 0.0, 9.0], 2).unwrap();
        assert!((d[0] - 2.0).abs() < 1e-12 && (d[3] - 3.0).abs() < 1e-12 && d[1].abs() < 1e-12);
    }

    #[test]
    fn random_gram_reconstructs() {
        let mut rng = Rng::new(17);
        for _ in 0..10 {
            let m: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let mt: Vec<f64> = (0..16).map(|i| m[(i % 4) * 4 + i / 4]).collect();
            let a = matmul_f64(&mt, &m, 4, 4, 4);
            let b = matrix_sqrt_psd(&a, 4).unwrap();
            let bb = matmul_f64(&b, &b, 4, 4, 4);
            let err: Vec<f64> = bb.iter().zip(&a).map(|(x, y)| x - y).collect();
            assert!(frobenius_norm(&err) <= 1e-5 * (1.0 + frobenius_norm(&a)));
            for i in 0..4 {
                for j in 0..4 {
                    assert!((b[i * 4 + j] - b[j * 4 + i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rejects_asymmetric() {
        assert!(matches!(
            matrix_sqrt_psd(&[1.0, 0.5, 0.0, 1.0], 2),
            Err(NumericsError::NotSymmetric(_))
        ));
    }

    #[test]
    fn clamps_tiny_negative_eigenvalues() {
        let b = matrix_sqrt_psd(&[1.0, 1.0, 1.0, 1.0 - 1e-12], 2).unwrap();
        assert!(b.iter().all(|v| v.is_finite()));
    }
}
