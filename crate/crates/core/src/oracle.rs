//! Reference implementations shared by unit tests.

use nalgebra::{DMatrix, DVector, SVD};

/// Enumerates every support, solves the unconstrained least-squares
/// problem on it and keeps the best feasible objective.
pub fn brute_force_nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    brute_force_nnls_solution(a, b).0
}

/// Like [`brute_force_nnls`] but also returns the minimizer.
pub fn brute_force_nnls_solution(a: &DMatrix<f64>, b: &DVector<f64>) -> (f64, DVector<f64>) {
    let k = a.ncols();
    let mut best = (b.norm_squared(), DVector::zeros(k));
    for mask in 1u32..(1 << k) {
        let cols: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let sub = a.select_columns(&cols);
        let svd = SVD::new(sub.clone(), true, true);
        let c = svd.solve(b, 1e-14).unwrap();
        if c.iter().all(|&v| v >= 0.0) {
            let obj = (sub * &c - b).norm_squared();
            if obj < best.0 {
                let mut full = DVector::zeros(k);
                for (pos, &col) in cols.iter().enumerate() {
                    full[col] = c[pos];
                }
                best = (obj, full);
            }
        }
    }
    best
}
