use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub(crate) fn select_vector(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&r| v[r]))
}

pub(crate) fn select_block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub(crate) fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

pub(crate) fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// `x^T A^{-1} x` using the lower factor of `A`.
pub(crate) fn quadratic_form(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> f64 {
    let y = chol
        .l()
        .solve_lower_triangular(x)
        .expect("cholesky factor has a positive diagonal");
    y.norm_squared()
}

pub(crate) fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
