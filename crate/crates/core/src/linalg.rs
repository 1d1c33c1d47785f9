//! Small dense helpers shared by the geometry, twist and transport code.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Frobenius norm of `m - mᵀ`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm()
}

/// Smallest eigenvalue of a symmetric matrix. Only the lower triangle is
/// trusted for dimensions above two.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        0 => f64::INFINITY,
        1 => m[(0, 0)],
        2 => {
            let a = m[(0, 0)];
            let d = m[(1, 1)];
            let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
            let mean = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            mean - rad
        }
        _ => SymmetricEigen::new(symmetric_part(m))
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min),
    }
}

/// exp(s·M) for symmetric M, in closed form for n ≤ 2 and through the
/// eigendecomposition otherwise.
pub fn expm_symmetric(m: &DMatrix<f64>, s: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 1 {
        return DMatrix::from_element(1, 1, (s * m[(0, 0)]).exp());
    }
    if n == 2 {
        let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
        let half = 0.5 * (a + d);
        let delta = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        let scale = (s * half).exp();
        let ch = (s * delta).cosh();
        // sinh(sΔ)/Δ, continuous at Δ = 0.
        let sh = if (s * delta).abs() < 1e-8 {
            s
        } else {
            (s * delta).sinh() / delta
        };
        return DMatrix::from_row_slice(
            2,
            2,
            &[
                scale * (ch + sh * (a - half)),
                scale * sh * b,
                scale * sh * b,
                scale * (ch + sh * (d - half)),
            ],
        );
    }
    let eig = SymmetricEigen::new(symmetric_part(m));
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| (s * l).exp()));
    q * d * q.transpose()
}

/// Orthogonal factor of the polar decomposition `M = U P`.
pub fn polar_orthogonal(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 1 {
        let v = m[(0, 0)];
        if v == 0.0 || !v.is_finite() {
            return Err(Error::Numeric("polar projection of a singular map".into()));
        }
        return Ok(DMatrix::from_element(1, 1, v.signum()));
    }
    if n == 2 {
        let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        let det = a * d - b * c;
        // Nearest rotation or reflection in closed form.
        let (p, q, r, s) = if det >= 0.0 {
            (a + d, b - c, c - b, a + d)
        } else {
            (a - d, b + c, b + c, d - a)
        };
        let norm = (p * p + q * q).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric("polar projection of a singular map".into()));
        }
        return Ok(DMatrix::from_row_slice(2, 2, &[p / norm, q / norm, r / norm, s / norm]));
    }
    let svd = m.clone().svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => Ok(u * vt),
        _ => Err(Error::Numeric("SVD failed in polar projection".into())),
    }
}

/// Spectral condition number and inverse of a square matrix.
pub fn inverse_with_condition(m: &DMatrix<f64>) -> (Option<DMatrix<f64>>, f64) {
    let n = m.nrows();
    if n == 1 {
        let v = m[(0, 0)];
        if v == 0.0 || !v.is_finite() {
            return (None, f64::INFINITY);
        }
        return (Some(DMatrix::from_element(1, 1, 1.0 / v)), 1.0);
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    (m.clone().try_inverse(), cond)
}

/// Operator 2-norm.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Upper-triangular frame `E = L^{-T}` from the Cholesky factor `g = L Lᵀ`,
/// together with `E^{-1} = Lᵀ` and `L`.
pub fn cholesky_frame(g: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = g.nrows();
    if n == 1 {
        let v = g[(0, 0)];
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Numeric(format!("metric {v} is not positive definite")));
        }
        let s = v.sqrt();
        return Ok((
            DMatrix::from_element(1, 1, 1.0 / s),
            DMatrix::from_element(1, 1, s),
            DMatrix::from_element(1, 1, s),
        ));
    }
    let chol =
        nalgebra::Cholesky::new(g.clone()).ok_or_else(|| Error::Numeric("metric is not positive definite".into()))?;
    let l = chol.l();
    let lt = l.transpose();
    let e = lt
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
    Ok((e, lt, l))
}

/// Pairwise summation; fixed reduction order independent of threading.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error (sample standard deviation / √n).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn min_eigenvalue_matches_general_solver() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, -1.0]);
        let general = SymmetricEigen::new(m.clone()).eigenvalues.min();
        assert_relative_eq!(min_eigenvalue(&m), general, epsilon = 1e-14);
    }

    #[test]
    fn expm_is_contractive_for_positive_generators() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let e = expm_symmetric(&m, -0.3);
        assert!(operator_norm(&e) <= (-0.3 * min_eigenvalue(&m)).exp() + 1e-15);
    }

    #[test]
    fn expm_closed_form_matches_eigen() {
        for m in [[1.0, 0.5, 0.5, 2.0], [3.0, 0.0, 0.0, 3.0], [-1.0, 2.0, 2.0, 0.5]] {
            let m = DMatrix::from_row_slice(2, 2, &m);
            for s in [-0.7f64, 1e-3, 1.3] {
                let eig = SymmetricEigen::new(m.clone());
                let want = &eig.eigenvectors
                    * DMatrix::from_diagonal(&eig.eigenvalues.map(|l: f64| (s * l).exp()))
                    * eig.eigenvectors.transpose();
                assert_relative_eq!(expm_symmetric(&m, s), want, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn polar_factor_is_orthogonal() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 0.9]);
        let u = polar_orthogonal(&m).unwrap();
        let id = &u.transpose() * &u;
        assert_relative_eq!(id, DMatrix::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn cholesky_frame_orthonormalises() {
        let g = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let (e, einv, _) = cholesky_frame(&g).unwrap();
        assert_relative_eq!(e.transpose() * &g * &e, DMatrix::identity(3, 3), epsilon = 1e-12);
        assert_relative_eq!(&einv * &e, DMatrix::identity(3, 3), epsilon = 1e-12);
    }

    #[test]
    fn stderr_of_constant_sample_is_zero() {
        let (m, s) = mean_stderr(&[2.5; 100]);
        assert_eq!(m, 2.5);
        assert_eq!(s, 0.0);
    }
}
