//! Dense symmetric positive-definite factorizations with a relative,
//! escalating jitter policy, and the Schur-complement extraction of the
//! diagonal blocks of an inverse.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor together with the diagonal jitter that was needed.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    chol: Cholesky<f64, Dyn>,
    /// Absolute amount added to the diagonal (0 when none was needed).
    pub jitter: f64,
}

impl CholeskyFactor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }

    /// `L z`, mapping standard normals to `N(0, M)`.
    pub fn mul_l(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().lower_triangle() * z
    }

    /// Solves `L^T x = z`, mapping standard normals to `N(0, M^{-1})` when
    /// `M` is a precision matrix.
    pub fn solve_lt(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .tr_solve_lower_triangular(z)
            .expect("Cholesky factor has a positive diagonal")
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn try_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let c = Cholesky::new(m.clone())?;
    c.l_dirty()
        .diagonal()
        .iter()
        .all(|d| d.is_finite() && *d > 0.0)
        .then_some(c)
}

/// Cholesky factorization of a symmetric matrix (lower triangle is read).
///
/// On failure, `1e-8 * mean(diag)` is added to the diagonal and escalated
/// tenfold up to `1e-4 * mean(diag)`.
pub fn chol_psd(m: &DMatrix<f64>) -> Result<CholeskyFactor> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "Cholesky of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if let Some(chol) = try_cholesky(m) {
        return Ok(CholeskyFactor { chol, jitter: 0.0 });
    }
    let n = m.nrows();
    let mean_diag = m.diagonal().sum() / n.max(1) as f64;
    if !(mean_diag.is_finite() && mean_diag > 0.0) {
        return Err(Error::NotPositiveDefinite { max_jitter: 0.0 });
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * mean_diag;
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = try_cholesky(&shifted) {
            return Ok(CholeskyFactor { chol, jitter });
        }
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        max_jitter: JITTER_MAX * mean_diag,
    })
}

/// `log |M|` as twice the sum of the log Cholesky diagonal.
pub fn logdet_psd(m: &DMatrix<f64>) -> Result<f64> {
    Ok(chol_psd(m)?.logdet())
}

/// Symmetric inverse through the Cholesky factor.
pub fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(chol_psd(m)?.inverse())
}

/// Diagonal blocks of `sigma^{-1}` for a contiguous block layout, without
/// forming the full inverse.
///
/// Each step splits the current matrix as `[[A, B], [B^T, D]]` with `D` the
/// trailing block. The trailing block of the inverse is `(D - B^T A^{-1} B)^{-1}`,
/// and the leading block of the inverse is the inverse of
/// `A - B D^{-1} B^T`, on which the recursion continues.
pub fn block_diag_of_inverse(
    sigma: &DMatrix<f64>,
    block_sizes: &[usize],
) -> Result<Vec<DMatrix<f64>>> {
    let n: usize = block_sizes.iter().sum();
    if !sigma.is_square() || sigma.nrows() != n {
        return Err(Error::Dimension(format!(
            "block sizes sum to {n} but matrix is {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if block_sizes.contains(&0) {
        return Err(Error::InvalidArgument("zero-sized block".into()));
    }
    let q = block_sizes.len();
    let mut out = vec![DMatrix::zeros(0, 0); q];
    let mut work = sigma.clone();
    let mut lead = n;
    for k in (1..q).rev() {
        let size = block_sizes[k];
        lead -= size;
        let a = work.view((0, 0), (lead, lead)).into_owned();
        let b = work.view((0, lead), (lead, size)).into_owned();
        let d = work.view((lead, lead), (size, size)).into_owned();

        let a_inv_b = chol_psd(&a)?.solve(&b);
        let mut schur = &d - b.transpose() * a_inv_b;
        symmetrize(&mut schur);
        out[k] = invert_spd(&schur)?;

        let d_inv_bt = chol_psd(&d)?.solve(&b.transpose());
        let mut next = a - &b * d_inv_bt;
        symmetrize(&mut next);
        work = next;
    }
    out[0] = invert_spd(&work)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * (n as f64 * 0.1)
    }

    fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn identity_factor() {
        let f = chol_psd(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(f.l(), DMatrix::identity(3, 3));
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn reconstruction_50() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_spd(50, &mut rng);
        let l = chol_psd(&m).unwrap().l();
        assert!(rel_frob(&(&l * l.transpose()), &m) <= 1e-10);
    }

    #[test]
    fn rank_deficient_gets_jitter() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let f = chol_psd(&m).unwrap();
        assert!(f.jitter > 0.0);
        assert!(f.jitter <= 1e-4 * m.diagonal().mean() * 1.000001);
    }

    #[test]
    fn indefinite_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(chol_psd(&m), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn logdet_cases() {
        assert_eq!(logdet_psd(&DMatrix::identity(4, 4)).unwrap(), 0.0);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert!((logdet_psd(&d).unwrap() - 6f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn logdet_matches_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_spd(30, &mut rng);
        let eig = m.clone().symmetric_eigenvalues();
        let oracle: f64 = eig.iter().map(|e| e.ln()).sum();
        assert!((logdet_psd(&m).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn block_inverse_identity() {
        let blocks = block_diag_of_inverse(&DMatrix::identity(7, 7), &[2, 3, 2]).unwrap();
        for (b, s) in blocks.iter().zip([2, 3, 2]) {
            assert_eq!(b, &DMatrix::<f64>::identity(s, s));
        }
    }

    #[test]
    fn block_inverse_matches_dense_60() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(60, &mut rng);
        let dense = invert_spd(&m).unwrap();
        let blocks = block_diag_of_inverse(&m, &[20, 20, 20]).unwrap();
        for (k, b) in blocks.iter().enumerate() {
            let want = dense.view((20 * k, 20 * k), (20, 20)).into_owned();
            assert!(rel_frob(b, &want) < 1e-8);
        }
    }

    #[test]
    fn block_inverse_rejects_bad_layout() {
        assert!(block_diag_of_inverse(&DMatrix::identity(4, 4), &[2, 1]).is_err());
        assert!(block_diag_of_inverse(&DMatrix::identity(4, 4), &[4, 0]).is_err());
    }
}
