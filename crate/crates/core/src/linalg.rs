use nalgebra::{DMatrix, DVector};

/// Symmetrizes in place: `A <- (A + A') / 2`.
pub(crate) fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Inverse of a symmetric positive definite matrix via Cholesky, adding a
/// ridge of `ridge_rel * trace / d` when the factorization fails.
/// Returns the inverse and whether the ridge was needed.
pub(crate) fn spd_inverse(a: &DMatrix<f64>, ridge_rel: f64) -> Option<(DMatrix<f64>, bool)> {
    if let Some(ch) = a.clone().cholesky() {
        let mut inv = ch.inverse();
        symmetrize(&mut inv);
        return Some((inv, false));
    }
    let d = a.nrows().max(1) as f64;
    let tr = a.trace().abs().max(f64::MIN_POSITIVE);
    let mut ridge = ridge_rel * tr / d;
    for _ in 0..8 {
        let mut b = a.clone();
        for i in 0..a.nrows() {
            b[(i, i)] += ridge;
        }
        if let Some(ch) = b.cholesky() {
            let mut inv = ch.inverse();
            symmetrize(&mut inv);
            return Some((inv, true));
        }
        ridge *= 100.0;
    }
    None
}

/// Solves the SPD system `A x = b`, falling back to a ridge as in [`spd_inverse`].
pub(crate) fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, ridge_rel: f64) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let d = a.nrows().max(1) as f64;
    let mut ridge = ridge_rel * a.trace().abs().max(f64::MIN_POSITIVE) / d;
    for _ in 0..8 {
        let mut m = a.clone();
        for i in 0..a.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(ch) = m.cholesky() {
            return Some(ch.solve(b));
        }
        ridge *= 100.0;
    }
    None
}

/// Eigenvalues of a symmetric matrix floored at `floor_rel * max_eig`.
/// Returns `None` when the largest eigenvalue is not positive.
pub(crate) fn floor_eigen(a: &DMatrix<f64>, floor_rel: f64) -> Option<(DMatrix<f64>, usize)> {
    let mut s = a.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || !max.is_finite() {
        return None;
    }
    let floor = floor_rel * max;
    let mut floored = 0;
    let vals = eig.eigenvalues.map(|v| {
        if v < floor {
            floored += 1;
            floor
        } else {
            v
        }
    });
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    Some((out, floored))
}

/// Lower Cholesky factor, with eigenvalue flooring if needed.
pub(crate) fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.l());
    }
    let (fixed, _) = floor_eigen(a, 1e-12)?;
    fixed.cholesky().map(|c| c.l())
}

/// Column means of a matrix.
pub(crate) fn col_means(g: &DMatrix<f64>) -> DVector<f64> {
    let n = g.nrows().max(1) as f64;
    DVector::from_iterator(g.ncols(), g.column_iter().map(|c| c.sum() / n))
}
