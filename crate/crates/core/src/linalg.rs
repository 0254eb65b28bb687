//! Small dense numerical primitives: matrix exponential, spectral radius,
//! projection onto stable matrices, and PSD-tolerant factorizations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Slack on the spectral radius below which a matrix counts as stable.
pub const STABILITY_TOLERANCE: f64 = 1e-10;

const SIGMA_TOLERANCE: f64 = 1e-12;
const MAX_CONSTRAINT_ROUNDS: usize = 1000;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

/// Lower-triangular factor `L` with `L L^T = m` for a symmetric PSD matrix.
///
/// Zero pivots are accepted when the rest of their column vanishes too, so
/// singular (e.g. all-zero) covariances factor exactly. Returns `None` if the
/// matrix is not PSD within a relative tolerance.
pub fn psd_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return None;
    }
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() || d < -tol {
            return None;
        }
        if d <= tol {
            // Semidefinite direction: the remaining column must vanish.
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > 1e-7 * scale.max(f64::MIN_POSITIVE) {
                    return None;
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// `psd_cholesky` with diagonal jitter escalating by 10x from `start` to
/// `max` on failure.
pub fn cholesky_with_jitter(m: &DMatrix<f64>, start: f64, max: f64) -> Result<DMatrix<f64>> {
    if let Some(l) = psd_cholesky(m) {
        return Ok(l);
    }
    let n = m.nrows();
    let mut jitter = start;
    while jitter <= max * (1.0 + 1e-9) {
        let jittered = m + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(l) = psd_cholesky(&jittered) {
            log::debug!("cholesky succeeded with jitter {jitter:e}");
            return Ok(l);
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization { cov: m.clone() })
}

/// Cholesky factor of a symmetric positive-definite matrix with jitter
/// escalation; used where an inverse is needed.
pub(crate) fn spd_cholesky(m: &DMatrix<f64>, start: f64, max: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let n = m.nrows();
    let mut jitter = start;
    while jitter <= max * (1.0 + 1e-9) {
        if let Some(c) = (m + DMatrix::<f64>::identity(n, n) * jitter).cholesky() {
            log::debug!("cholesky succeeded with jitter {jitter:e}");
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization { cov: m.clone() })
}

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
const THETA13: f64 = 5.371_920_351_148_152;

/// `exp(F * dt)` by scaling and squaring with a degree-13 Padé approximant.
pub fn matrix_exponential(f: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    if f.ncols() != n {
        return Err(Error::Dimension(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            n,
            f.ncols()
        )));
    }
    if !(dt >= 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be >= 0, got {dt}")));
    }
    let a = f * dt;
    let eye = DMatrix::<f64>::identity(n, n);
    if n == 0 || a.iter().all(|v| *v == 0.0) {
        return Ok(eye);
    }
    let norm1 = a
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let s = if norm1 > THETA13 {
        (norm1 / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a = a * 2f64.powi(-s);
    let b = &PADE13;
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = &a * (&a6 * u_inner + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &eye * b[1]);
    let v_inner = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * v_inner + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &eye * b[0];

    let numer = &v + &u;
    let denom = &v - &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::Numerical("singular Padé denominator".into()))?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!(
            "spectral radius needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let eig = a.complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Least-squares closest matrix with largest singular value at most one,
/// found by constraint generation.
///
/// Matrices that are already stable are returned unchanged. Otherwise each
/// round adds the half-space `<u v^T, X> <= 1` built from the current top
/// singular pair, and re-solves `min ||X - A||_F` over all generated
/// half-spaces.
pub fn project_to_stable(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return a.clone();
    }
    match spectral_radius(a) {
        Ok(rho) if rho <= 1.0 + STABILITY_TOLERANCE => return a.clone(),
        _ => {}
    }
    let mut constraints: Vec<DMatrix<f64>> = Vec::new();
    let mut x = a.clone();
    for _ in 0..MAX_CONSTRAINT_ROUNDS {
        let Some((sigma, g)) = top_singular_pair(&x) else {
            break;
        };
        if sigma <= 1.0 + SIGMA_TOLERANCE {
            return x;
        }
        constraints.push(g);
        x = project_onto_halfspaces(a, &constraints);
    }
    clip_singular_values(&x)
}

fn top_singular_pair(x: &DMatrix<f64>) -> Option<(f64, DMatrix<f64>)> {
    let svd = x.clone().svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let (imax, sigma) = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, s)| if s > best.1 { (i, s) } else { best },
        );
    let g = u.column(imax) * v_t.row(imax);
    Some((sigma, g))
}

/// Euclidean projection of `a` onto `{X : <G_k, X> <= 1 for all k}` by dual
/// coordinate ascent (every `G_k` has unit Frobenius norm).
fn project_onto_halfspaces(a: &DMatrix<f64>, constraints: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut x = a.clone();
    let mut lambda = vec![0.0; constraints.len()];
    for _ in 0..100_000 {
        let mut max_step = 0.0f64;
        for (k, g) in constraints.iter().enumerate() {
            let viol = g.dot(&x) - 1.0;
            let step = viol.max(-lambda[k]);
            if step != 0.0 {
                lambda[k] += step;
                x -= g * step;
                max_step = max_step.max(step.abs());
            }
        }
        if max_step <= 1e-15 {
            break;
        }
    }
    x
}

fn clip_singular_values(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut svd = x.clone().svd(true, true);
    for s in svd.singular_values.iter_mut() {
        *s = s.min(1.0);
    }
    svd.recompose().unwrap_or_else(|_| x.clone())
}

/// Solves the symmetric positive (semi-)definite system `m X = rhs`,
/// adding `jitter * I` when `m` is singular.
pub(crate) fn solve_spd(m: &DMatrix<f64>, rhs: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.solve(rhs));
    }
    let n = m.nrows();
    let jittered = m + DMatrix::<f64>::identity(n, n) * jitter;
    if let Some(c) = jittered.clone().cholesky() {
        return Ok(c.solve(rhs));
    }
    jittered
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Numerical("singular system after jitter".into()))
}

/// Exact discretization of `x' = F x + G u` with `u` held constant over
/// each step: returns `(exp(F dt), int_0^dt exp(F s) ds G)`.
pub fn discretize_zoh(f: &DMatrix<f64>, g: &DMatrix<f64>, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = f.nrows();
    let m = g.ncols();
    if g.nrows() != n {
        return Err(Error::Dimension(format!(
            "input matrix has {} rows, dynamics has {n}",
            g.nrows()
        )));
    }
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, f.ncols())).copy_from(f);
    aug.view_mut((0, n), (n, m)).copy_from(g);
    let e = matrix_exponential(&aug, dt)?;
    Ok((e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn rk4_propagate(f: &DMatrix<f64>, dt: f64, steps: usize) -> DMatrix<f64> {
        let n = f.nrows();
        let h = dt / steps as f64;
        let mut x = DMatrix::<f64>::identity(n, n);
        for _ in 0..steps {
            let k1 = f * &x;
            let k2 = f * (&x + &k1 * (h / 2.0));
            let k3 = f * (&x + &k2 * (h / 2.0));
            let k4 = f * (&x + &k3 * h);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        x
    }

    #[test]
    fn zoh_scalar_closed_form() {
        let f = DMatrix::from_element(1, 1, -0.5);
        let g = DMatrix::from_element(1, 1, 2.0);
        let (a, b) = discretize_zoh(&f, &g, 0.25).unwrap();
        let want_a = (-0.125f64).exp();
        assert!((a[(0, 0)] - want_a).abs() < 1e-15);
        assert!((b[(0, 0)] - 2.0 * (1.0 - want_a) / 0.5).abs() < 1e-14);
    }

    #[test]
    fn expm_of_zero_is_identity() {
        for d in 1..5 {
            let e = matrix_exponential(&DMatrix::zeros(d, d), 1.0).unwrap();
            assert_eq!(e, DMatrix::identity(d, d));
        }
    }

    #[test]
    fn expm_nilpotent_and_diagonal() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = matrix_exponential(&f, 1.0).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((e - want).abs().max() < 1e-14);

        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        let e = matrix_exponential(&f, 0.5).unwrap();
        assert!((e[(0, 0)] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((e[(1, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn expm_large_norm_uses_squaring() {
        let f = DMatrix::from_row_slice(2, 2, &[-30.0, 4.0, 1.0, -20.0]);
        let e = matrix_exponential(&f, 1.0).unwrap();
        let oracle = rk4_propagate(&f, 1.0, 20_000);
        let rel = (&e - &oracle).norm() / oracle.norm();
        assert!(rel < 1e-9, "rel {rel}");
    }

    #[test]
    fn expm_rejects_non_square() {
        assert!(matches!(
            matrix_exponential(&DMatrix::zeros(2, 3), 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn spectral_radius_simple_cases() {
        assert!((spectral_radius(&DMatrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -1.2]));
        assert!((spectral_radius(&d).unwrap() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn spectral_radius_of_similar_companion_matrix() {
        // Characteristic polynomial with roots 0.2, -0.4, 0.6 +- 0.7i; the
        // largest root modulus (0.9219544457292886) comes from numpy.roots.
        let c = [-1.0, 0.53, 0.266, -0.068];
        let mut comp = DMatrix::<f64>::zeros(4, 4);
        for j in 0..4 {
            comp[(0, j)] = -c[j];
        }
        for i in 1..4 {
            comp[(i, i - 1)] = 1.0;
        }
        let p = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.3, -0.2, 0.1, 0.0, 1.5, 0.4, -0.3, 0.2, 0.1, 0.8, 0.5, -0.1, 0.2, 0.3, 1.2,
            ],
        );
        let a = &p * comp * p.clone().try_inverse().unwrap();
        let rho = spectral_radius(&a).unwrap();
        assert!((rho - 0.921_954_445_729_288_6).abs() < 1e-10, "rho {rho}");
    }

    #[test]
    fn project_keeps_stable_and_zero() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.9, 0.5]));
        assert_eq!(project_to_stable(&a), a);
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(project_to_stable(&z), z);
    }

    #[test]
    fn project_diagonal_clips_exactly() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.2, 0.5]));
        let p = project_to_stable(&a);
        assert_eq!(p, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5])));
    }

    #[test]
    fn project_diagonal_beats_grid_of_stable_diagonals() {
        // Exhaustive search over diagonal candidates with |d_i| <= 1.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.2, 0.5]));
        let p = project_to_stable(&a);
        let dist = (&p - &a).norm();
        let mut best = f64::INFINITY;
        for i in 0..=200 {
            for j in 0..=200 {
                let d1 = -1.0 + i as f64 * 0.01;
                let d2 = -1.0 + j as f64 * 0.01;
                let cand = DMatrix::from_diagonal(&DVector::from_vec(vec![d1, d2]));
                best = best.min((cand - &a).norm());
            }
        }
        assert!(dist <= best + 1e-12);
    }

    #[test]
    fn psd_cholesky_handles_singular() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(psd_cholesky(&z).unwrap(), z);
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let rank1 = &v * v.transpose();
        let l = psd_cholesky(&rank1).unwrap();
        assert!((&l * l.transpose() - rank1).abs().max() < 1e-12);
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(psd_cholesky(&indef).is_none());
        assert!(matches!(
            cholesky_with_jitter(&indef, 1e-12, 1e-6),
            Err(Error::Factorization { .. })
        ));
    }
}
