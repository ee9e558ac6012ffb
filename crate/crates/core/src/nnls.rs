//! Non-negative least squares.
//!
//! Minimizes `||A c - b||^2 + lambda ||c||^2` subject to `c >= 0` with the
//! Lawson-Hanson active-set method. Every pivot re-solves the full passive
//! set from the normal equations; rank-deficient passive sets fall back to
//! the minimum-norm solution. Candidate ties are broken by lowest index.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix, Storage, SVD, U1};

use crate::error::{check_dim, Error, Result};
use crate::types::GroupDictionary;

/// Relative factor for the default KKT tolerance, applied to `||A^T b||_inf`.
pub const DEFAULT_RELATIVE_TOLERANCE: f64 = 1e-10;

/// Pivot budget per design column.
pub const PIVOTS_PER_COLUMN: usize = 10;

#[derive(Debug, Clone, Copy)]
pub struct NnlsProblem<'a> {
    pub design: &'a DMatrix<f64>,
    pub target: &'a DVector<f64>,
    pub ridge_lambda: f64,
    /// KKT stationarity tolerance. `None` selects the relative default.
    pub tolerance: Option<f64>,
}

impl<'a> NnlsProblem<'a> {
    pub fn new(design: &'a DMatrix<f64>, target: &'a DVector<f64>) -> Self {
        Self {
            design,
            target,
            ridge_lambda: 0.0,
            tolerance: None,
        }
    }

    pub fn ridge(mut self, lambda: f64) -> Self {
        self.ridge_lambda = lambda;
        self
    }

    pub fn tolerance(mut self, tol: f64) -> Self {
        self.tolerance = Some(tol);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub coefficients: DVector<f64>,
    /// `||A c - b||_2`, excluding the ridge term.
    pub residual_norm: f64,
    /// Indices of strictly positive coefficients.
    pub active_set: Vec<usize>,
    /// Number of pivots (columns moved into the passive set).
    pub iterations: usize,
    /// Tolerance the KKT conditions were solved to.
    pub tolerance: f64,
}

pub fn solve_nnls(p: &NnlsProblem<'_>) -> Result<NnlsSolution> {
    let (d, k) = p.design.shape();
    check_dim("NNLS target length", d, p.target.len())?;
    if k == 0 {
        return Err(Error::Invalid("NNLS design needs at least one column".into()));
    }
    if !(p.ridge_lambda >= 0.0) {
        return Err(Error::Invalid("ridge lambda must be non-negative".into()));
    }
    if let Some(t) = p.tolerance {
        if !(t > 0.0) {
            return Err(Error::Invalid("NNLS tolerance must be positive".into()));
        }
    }
    if p.design.iter().chain(p.target.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("NNLS problem"));
    }

    let mut gram = p.design.tr_mul(p.design);
    for i in 0..k {
        gram[(i, i)] += p.ridge_lambda;
    }
    let rhs = p.design.tr_mul(p.target);
    let tol = p.tolerance.unwrap_or_else(|| default_tolerance(&rhs));
    let (coefficients, iterations) = lawson_hanson(&gram, &rhs, tol, PIVOTS_PER_COLUMN * k)?;
    let residual_norm = (p.design * &coefficients - p.target).norm();
    Ok(NnlsSolution {
        active_set: positive_indices(&coefficients),
        coefficients,
        residual_norm,
        iterations,
        tolerance: tol,
    })
}

pub(crate) fn default_tolerance(rhs: &DVector<f64>) -> f64 {
    (DEFAULT_RELATIVE_TOLERANCE * rhs.amax()).max(f64::MIN_POSITIVE)
}

fn positive_indices(c: &DVector<f64>) -> Vec<usize> {
    c.iter()
        .enumerate()
        .filter_map(|(i, &v)| (v > 0.0).then_some(i))
        .collect()
}

/// Active-set NNLS on the normal equations `G c = r`, `c >= 0`.
///
/// Returns the solution and the number of pivots taken.
pub(crate) fn lawson_hanson(
    gram: &DMatrix<f64>,
    rhs: &DVector<f64>,
    tol: f64,
    max_pivots: usize,
) -> Result<(DVector<f64>, usize)> {
    let k = rhs.len();
    let mut x = DVector::<f64>::zeros(k);
    let mut passive = vec![false; k];
    // Columns whose positive gradient turned out to be round-off; cleared
    // whenever x moves.
    let mut blocked = vec![false; k];
    let mut w = rhs.clone();
    let mut pivots = 0;

    loop {
        let mut pick: Option<usize> = None;
        for j in 0..k {
            if passive[j] || blocked[j] || w[j] <= tol {
                continue;
            }
            if pick.map_or(true, |p| w[j] > w[p]) {
                pick = Some(j);
            }
        }
        let Some(j) = pick else { break };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::NoConvergence { iterations: max_pivots });
        }
        passive[j] = true;

        let mut first = true;
        loop {
            let idx: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
            let s = solve_passive(gram, rhs, &idx);
            if s.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (pos, &i) in idx.iter().enumerate() {
                    x[i] = s[pos];
                }
                blocked.fill(false);
                break;
            }
            if first {
                let pos_j = idx.iter().position(|&i| i == j).unwrap();
                if s[pos_j] <= 0.0 {
                    passive[j] = false;
                    blocked[j] = true;
                    break;
                }
            }
            first = false;

            // Step from x towards s until the first passive coefficient hits zero.
            let mut alpha = f64::INFINITY;
            let mut leaving = idx[0];
            for (pos, &i) in idx.iter().enumerate() {
                if s[pos] <= 0.0 {
                    let a = x[i] / (x[i] - s[pos]);
                    if a < alpha {
                        alpha = a;
                        leaving = i;
                    }
                }
            }
            for (pos, &i) in idx.iter().enumerate() {
                x[i] += alpha * (s[pos] - x[i]);
            }
            x[leaving] = 0.0;
            for &i in &idx {
                if x[i] <= 0.0 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            blocked.fill(false);
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        w = rhs - gram * &x;
    }
    Ok((x, pivots))
}

/// Solves the normal equations restricted to `idx`, falling back to the
/// minimum-norm solution when the restricted Gram matrix is singular.
fn solve_passive(gram: &DMatrix<f64>, rhs: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    let g = gram.select_rows(idx).select_columns(idx);
    let r = DVector::from_iterator(idx.len(), idx.iter().map(|&i| rhs[i]));
    let scale = g.diagonal().amax();
    if let Some(chol) = Cholesky::new(g.clone()) {
        let l = chol.l_dirty();
        let min_pivot = (0..idx.len()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot > 1e-12 * scale {
            return chol.solve(&r);
        }
    }
    let svd = SVD::new(g, true, true);
    let eps = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    svd.solve(&r, eps).expect("U and V were computed")
}

/// Coefficients of a group-masked NNLS solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSolution {
    /// Full-length (`M`) coefficient vector; blocks outside the active
    /// groups are exactly zero.
    pub coefficients: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Set when no group was active: the item is pure background and the
    /// coefficients are all zero.
    pub empty_active_set: bool,
}

/// NNLS over a fixed dictionary, restricted to the atoms of a set of
/// groups. Keeps `B^T B` so repeated solves only slice it.
#[derive(Debug, Clone)]
pub struct GroupSolver<'a> {
    dict: &'a GroupDictionary,
    gram: DMatrix<f64>,
    ridge_lambda: f64,
}

impl<'a> GroupSolver<'a> {
    pub fn new(dict: &'a GroupDictionary, ridge_lambda: f64) -> Result<Self> {
        if !(ridge_lambda >= 0.0) {
            return Err(Error::Invalid("ridge lambda must be non-negative".into()));
        }
        let mut gram = dict.atoms().tr_mul(dict.atoms());
        for i in 0..gram.nrows() {
            gram[(i, i)] += ridge_lambda;
        }
        Ok(Self {
            dict,
            gram,
            ridge_lambda,
        })
    }

    pub fn dictionary(&self) -> &GroupDictionary {
        self.dict
    }

    pub fn ridge_lambda(&self) -> f64 {
        self.ridge_lambda
    }

    pub fn solve<S>(&self, x: &Matrix<f64, Dyn, U1, S>, active: &[usize]) -> Result<MaskedSolution>
    where
        S: Storage<f64, Dyn, U1>,
    {
        let dict = self.dict;
        check_dim("embedding dimension", dict.dim(), x.len())?;
        let m = dict.n_atoms();
        if let Some(&bad) = active.iter().find(|&&j| j >= dict.n_groups()) {
            return Err(Error::Invalid(format!("concept index {bad} out of range")));
        }
        let mut groups = active.to_vec();
        groups.sort_unstable();
        groups.dedup();
        if groups.is_empty() {
            return Ok(MaskedSolution {
                coefficients: DVector::zeros(m),
                residual_norm: x.norm(),
                iterations: 0,
                empty_active_set: true,
            });
        }
        let cols = dict.columns_of(&groups);
        let gram = self.gram.select_rows(&cols).select_columns(&cols);
        let rhs = DVector::from_iterator(
            cols.len(),
            cols.iter().map(|&c| dict.atom(c).dot(x)),
        );
        let tol = default_tolerance(&rhs);
        let (c, iterations) = lawson_hanson(&gram, &rhs, tol, PIVOTS_PER_COLUMN * cols.len())?;
        let mut coefficients = DVector::zeros(m);
        let mut residual = x.clone_owned();
        for (pos, &col) in cols.iter().enumerate() {
            if c[pos] != 0.0 {
                coefficients[col] = c[pos];
                residual.axpy(-c[pos], &dict.atom(col), 1.0);
            }
        }
        Ok(MaskedSolution {
            coefficients,
            residual_norm: residual.norm(),
            iterations,
            empty_active_set: false,
        })
    }
}

/// Solves NNLS for `x` using only the atoms of the `active` groups.
pub fn solve_group_masked<S: Storage<f64, Dyn, U1>>(
    dict: &GroupDictionary,
    x: &Matrix<f64, Dyn, U1, S>,
    active: &[usize],
) -> Result<MaskedSolution> {
    GroupSolver::new(dict, 0.0)?.solve(x, active)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_force_nnls as brute_force;
    use crate::types::Tolerances;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn objective(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>) -> f64 {
        (a * c - b).norm_squared()
    }

    fn assert_kkt(p: &NnlsProblem<'_>, s: &NnlsSolution) {
        let g = p.design.tr_mul(&(p.design * &s.coefficients - p.target))
            + p.ridge_lambda * &s.coefficients;
        for i in 0..g.len() {
            assert!(s.coefficients[i] >= 0.0);
            if s.coefficients[i] > 0.0 {
                assert!(g[i].abs() <= s.tolerance * 10.0, "g[{i}]={}", g[i]);
            } else {
                assert!(g[i] >= -s.tolerance * 10.0, "g[{i}]={}", g[i]);
            }
        }
    }

    #[test]
    fn single_column_cases() {
        let b = DVector::from_vec(vec![0.6, 0.8]);
        let a = DMatrix::from_column_slice(2, 1, b.as_slice());
        let s = solve_nnls(&NnlsProblem::new(&a, &b)).unwrap();
        assert!((s.coefficients[0] - 1.0).abs() < 1e-14);
        assert!(s.residual_norm < 1e-14);

        let neg = -&b;
        let s = solve_nnls(&NnlsProblem::new(&a, &neg)).unwrap();
        assert_eq!(s.coefficients[0], 0.0);
        assert!((s.residual_norm - 1.0).abs() < 1e-14);
        assert!(s.active_set.is_empty());
    }

    #[test]
    fn matches_support_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let a = random(&mut rng, 10, 6);
            let b = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
            let p = NnlsProblem::new(&a, &b);
            let s = solve_nnls(&p).unwrap();
            let oracle = brute_force(&a, &b);
            assert!((objective(&a, &b, &s.coefficients) - oracle).abs() < 1e-8);
            assert_kkt(&p, &s);
        }
    }

    #[test]
    fn rank_deficient_design() {
        // duplicated column
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = random(&mut rng, 6, 3);
        let c0 = a.column(0).into_owned();
        a.set_column(2, &c0);
        let b = &c0 * 2.0 + a.column(1) * 0.5;
        let s = solve_nnls(&NnlsProblem::new(&a, &b)).unwrap();
        assert!(s.residual_norm < 1e-10);
        assert!((s.coefficients[0] + s.coefficients[2] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn ridge_solution_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = random(&mut rng, 8, 5);
            let b = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
            let s1 = solve_nnls(&NnlsProblem::new(&a, &b).ridge(0.1)).unwrap();
            let perm = [3, 0, 4, 1, 2];
            let ap = a.select_columns(&perm);
            let s2 = solve_nnls(&NnlsProblem::new(&ap, &b).ridge(0.1)).unwrap();
            for (pos, &orig) in perm.iter().enumerate() {
                assert!((s1.coefficients[orig] - s2.coefficients[pos]).abs() < 1e-8);
            }
            assert_kkt(&NnlsProblem::new(&a, &b).ridge(0.1), &s1);
        }
    }

    #[test]
    fn dropping_a_coefficient_never_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let a = random(&mut rng, 10, 6);
            let b = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
            let s = solve_nnls(&NnlsProblem::new(&a, &b)).unwrap();
            for &drop in &s.active_set {
                let keep: Vec<usize> = (0..6).filter(|&i| i != drop).collect();
                let sub = a.select_columns(&keep);
                let r = solve_nnls(&NnlsProblem::new(&sub, &b)).unwrap();
                assert!(r.residual_norm >= s.residual_norm - 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_problems() {
        let a = DMatrix::<f64>::zeros(3, 2);
        let b = DVector::<f64>::zeros(4);
        assert!(matches!(
            solve_nnls(&NnlsProblem::new(&a, &b)),
            Err(Error::DimensionMismatch { .. })
        ));
        let b = DVector::<f64>::zeros(3);
        assert!(solve_nnls(&NnlsProblem::new(&a, &b).ridge(-1.0)).is_err());
        let empty = DMatrix::<f64>::zeros(3, 0);
        assert!(solve_nnls(&NnlsProblem::new(&empty, &b)).is_err());
        let s = solve_nnls(&NnlsProblem::new(&a, &b)).unwrap();
        assert_eq!(s.coefficients, DVector::zeros(2));
    }

    fn random_dict(rng: &mut ChaCha8Rng, d: usize, sizes: Vec<usize>) -> GroupDictionary {
        let m: usize = sizes.iter().sum();
        let mut atoms = random(rng, d, m);
        for mut c in atoms.column_iter_mut() {
            c.normalize_mut();
        }
        GroupDictionary::new(atoms, sizes, &Tolerances::default()).unwrap()
    }

    #[test]
    fn masked_exact_atom() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dict = random_dict(&mut rng, 12, vec![2, 2, 2]);
        let x = dict.atom(3) * 1.5;
        let s = solve_group_masked(&dict, &x, &[0, 1, 2]).unwrap();
        assert!((s.coefficients[3] - 1.5).abs() < 1e-9);
        assert!(s.residual_norm < 1e-9);
    }

    #[test]
    fn masked_outside_cone_is_apex() {
        let atoms = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let dict = GroupDictionary::new(atoms, vec![1, 1], &Tolerances::default()).unwrap();
        let x = DVector::from_vec(vec![-1.0, 0.5, 0.3]);
        let s = solve_group_masked(&dict, &x, &[0]).unwrap();
        assert_eq!(s.coefficients, DVector::zeros(2));
        assert!((s.residual_norm - x.norm()).abs() < 1e-15);
    }

    #[test]
    fn masked_empty_set_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dict = random_dict(&mut rng, 5, vec![1, 1]);
        let x = DVector::from_element(5, 1.0);
        let s = solve_group_masked(&dict, &x, &[]).unwrap();
        assert!(s.empty_active_set);
        assert_eq!(s.coefficients, DVector::zeros(2));
        assert!(solve_group_masked(&dict, &x, &[2]).is_err());
    }

    #[test]
    fn masked_reduces_to_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dict = random_dict(&mut rng, 10, vec![2, 2, 2]);
            let x = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
            let first = rng.random_range(0..3);
            let second = (first + rng.random_range(1..3)) % 3;
            let active = [first, second];
            let s = solve_group_masked(&dict, &x, &active).unwrap();

            let mut sorted = active;
            sorted.sort();
            let cols = dict.columns_of(&sorted);
            let dense = solve_nnls(&NnlsProblem::new(&dict.atoms().select_columns(&cols), &x)).unwrap();
            let other = 3 - first - second;
            for m in dict.group_range(other) {
                assert_eq!(s.coefficients[m], 0.0);
            }
            for (pos, &c) in cols.iter().enumerate() {
                assert!((s.coefficients[c] - dense.coefficients[pos]).abs() < 1e-8);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest};

        proptest! {
            #[test]
            fn residual_never_exceeds_target(seed in any::<u64>(), k in 1usize..7) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(&mut rng, 9, k);
                let b = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
                let s = solve_nnls(&NnlsProblem::new(&a, &b)).unwrap();
                prop_assert!(s.residual_norm <= b.norm() + 1e-12);
                prop_assert!(s.coefficients.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
