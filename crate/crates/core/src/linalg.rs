use nalgebra::{DMatrix, DVector};

/// Kronecker product `a ⊗ b`.
pub(crate) fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// `a ⊗ I_m`.
pub(crate) fn kron_identity(a: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let k = a.nrows();
    let mut out = DMatrix::zeros(k * m, a.ncols() * m);
    for c in 0..a.ncols() {
        for r in 0..k {
            let v = a[(r, c)];
            if v != 0.0 {
                for j in 0..m {
                    out[(r * m + j, c * m + j)] = v;
                }
            }
        }
    }
    out
}

/// Block-diagonal matrix from equally sized square blocks.
pub(crate) fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let m = blocks.first().map_or(0, |b| b.nrows());
    let n = blocks.len() * m;
    let mut out = DMatrix::zeros(n, n);
    for (k, b) in blocks.iter().enumerate() {
        out.view_mut((k * m, k * m), (m, m)).copy_from(b);
    }
    out
}

/// Column-stacking vectorisation.
pub(crate) fn vec_cols(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

pub(crate) fn unvec_cols(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Largest eigenvalue modulus. Dense Schur for moderate sizes, a power-growth
/// estimate beyond that.
pub(crate) fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() <= 600 {
        a.clone()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    } else {
        power_growth(a, 3000)
    }
}

fn power_growth(a: &DMatrix<f64>, iters: usize) -> f64 {
    let n = a.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i % 7) as f64 * 0.1);
    v /= v.norm();
    let mut log_growth = 0.0;
    let warmup = iters / 3;
    for it in 0..iters {
        v = a * v;
        let nv = v.norm();
        if nv == 0.0 {
            return 0.0;
        }
        v /= nv;
        if it >= warmup {
            log_growth += nv.ln();
        }
    }
    (log_growth / (iters - warmup) as f64).exp()
}

pub(crate) fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_identity_matches_kronecker() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(kron_identity(&a, 3), kron(&a, &DMatrix::identity(3, 3)));
    }

    #[test]
    fn spectral_radius_routes_agree() {
        let a = DMatrix::from_fn(12, 12, |i, j| ((i * 7 + j * 3) % 5) as f64 / 20.0);
        let exact = spectral_radius(&a);
        assert!((power_growth(&a, 3000) - exact).abs() < 1e-3 * exact);
    }
}
