use nalgebra::{DMatrix, DVector};

/// Column mean and unbiased covariance of row-vector samples.
pub(crate) fn mean_and_covariance(rows: &[&[f64]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let mut mean = DVector::zeros(d);
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let centered = DVector::from_iterator(d, r.iter().zip(mean.iter()).map(|(v, m)| v - m));
        cov.ger(1.0, &centered, &centered, 1.0);
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues in descending
/// order; eigenvectors are the columns of the returned matrix.
pub(crate) fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Flips each row so that its first non-negligible entry is positive.
pub(crate) fn canonical_row_signs(m: &mut DMatrix<f64>) {
    for r in 0..m.nrows() {
        let scale = m.row(r).amax();
        let first = m
            .row(r)
            .iter()
            .copied()
            .find(|v| v.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE));
        if matches!(first, Some(v) if v < 0.0) {
            m.row_mut(r).neg_mut();
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
