//! Rank-1 atom updates.
//!
//! For atom `m`, `E` holds the residuals of the items that use the atom
//! with its own contribution added back. The simultaneous update takes the
//! leading singular pair of `E`, picks the atom polarity whose thresholded
//! coefficients explain the most energy, and clamps the coefficients at
//! zero. The alternating update does one (or more) block-coordinate steps
//! starting from the previous coefficients.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{check_dim, Error, Result};
use crate::types::ZERO_NORM;

/// Cap on power iterations for the leading singular pair.
pub const POWER_ITERATION_CAP: usize = 200;
/// Convergence threshold on the change of the right singular vector.
pub const POWER_ITERATION_TOL: f64 = 1e-10;

/// Atom polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Positive => Sign::Negative,
            Sign::Negative => Sign::Positive,
        }
    }
}

/// Majority sign rule: positive iff `||max(0, beta)|| >= ||max(0, -beta)||`.
pub fn optimal_sign(beta: &[f64]) -> Sign {
    let (pos, neg) = beta.iter().fold((0.0, 0.0), |(p, n), &b| {
        if b > 0.0 {
            (p + b * b, n)
        } else {
            (p, n + b * b)
        }
    });
    if pos >= neg {
        Sign::Positive
    } else {
        Sign::Negative
    }
}

/// `max(0, sign * beta)`, elementwise.
pub fn thresholded(beta: &DVector<f64>, sign: Sign) -> DVector<f64> {
    let s = sign.value();
    beta.map(|b| (s * b).max(0.0))
}

/// Residual matrix for one atom over its support.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualWorkspace {
    /// Item indices where the atom is active.
    pub support: Vec<usize>,
    /// `d x |support|` residual with the atom's own contribution restored.
    pub residual: DMatrix<f64>,
    pub previous_atom: DVector<f64>,
    /// Previous coefficients of the atom on `support`.
    pub previous_coefficients: DVector<f64>,
}

impl ResidualWorkspace {
    pub fn new(
        support: Vec<usize>,
        residual: DMatrix<f64>,
        previous_atom: DVector<f64>,
        previous_coefficients: DVector<f64>,
    ) -> Result<Self> {
        check_dim("residual columns", support.len(), residual.ncols())?;
        check_dim("previous coefficients", support.len(), previous_coefficients.len())?;
        check_dim("previous atom", residual.nrows(), previous_atom.len())?;
        Ok(Self {
            support,
            residual,
            previous_atom,
            previous_coefficients,
        })
    }

    /// Builds `E = [x_l - sum_{k != m} b_k A_kl]` for the items in `support`.
    pub fn assemble(
        x: &DMatrix<f64>,
        atoms: &DMatrix<f64>,
        coefficients: &DMatrix<f64>,
        m: usize,
        support: Vec<usize>,
    ) -> Self {
        let mut residual = x.select_columns(&support);
        for (c, &l) in support.iter().enumerate() {
            let mut col = residual.column_mut(c);
            for k in 0..atoms.ncols() {
                let a = coefficients[(k, l)];
                if k != m && a != 0.0 {
                    col.axpy(-a, &atoms.column(k), 1.0);
                }
            }
        }
        let previous_coefficients =
            DVector::from_iterator(support.len(), support.iter().map(|&l| coefficients[(m, l)]));
        Self {
            support,
            residual,
            previous_atom: atoms.column(m).into_owned(),
            previous_coefficients,
        }
    }

    /// `||E - b beta^T||_F^2`.
    pub fn error_with(&self, atom: &DVector<f64>, coefficients: &DVector<f64>) -> f64 {
        let mut r = self.residual.clone();
        r.ger(-1.0, atom, coefficients, 1.0);
        r.norm_squared()
    }

    /// Error of the atom and coefficients currently in place.
    pub fn error_before(&self) -> f64 {
        self.error_with(&self.previous_atom, &self.previous_coefficients)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomUpdateResult {
    /// Unit-norm replacement atom.
    pub new_atom: DVector<f64>,
    /// Non-negative coefficients on the workspace support.
    pub new_coefficients: DVector<f64>,
    pub sign: Sign,
    /// Least-squares coefficients before sign selection and thresholding
    /// (`E^T b` for the unsigned direction `b`).
    pub raw_coefficients: DVector<f64>,
    pub error_before: f64,
    pub error_after: f64,
    /// `||E||_F` was below the zero threshold; atom kept, coefficients zeroed.
    pub zero_residual: bool,
    /// Alternating update degenerated and the simultaneous update was used.
    pub fell_back: bool,
}

/// Leading singular pair `(u, v, sigma)` of `e`.
///
/// Power iteration on `E^T E` seeded with `warm_start` (or the largest
/// column). A dense SVD is used for fewer than three columns and when the
/// iteration hits its cap (small spectral gap).
pub fn leading_singular_pair(
    e: &DMatrix<f64>,
    warm_start: Option<&DVector<f64>>,
) -> (DVector<f64>, DVector<f64>, f64) {
    let n = e.ncols();
    if n < 3 {
        return dense_leading_pair(e);
    }

    let mut v = match warm_start {
        Some(w) if w.norm() > ZERO_NORM => w.normalize(),
        _ => {
            let (best, _) = e
                .column_iter()
                .enumerate()
                .fold((0, -1.0), |acc, (i, c)| {
                    let n = c.norm_squared();
                    if n > acc.1 {
                        (i, n)
                    } else {
                        acc
                    }
                });
            let seed = e.tr_mul(&e.column(best));
            if seed.norm() > ZERO_NORM {
                seed.normalize()
            } else {
                DVector::from_element(n, 1.0 / (n as f64).sqrt())
            }
        }
    };
    let mut converged = false;
    for _ in 0..POWER_ITERATION_CAP {
        let ev = e * &v;
        let w = e.tr_mul(&ev);
        let norm = w.norm();
        if norm <= ZERO_NORM * ZERO_NORM {
            converged = true;
            break;
        }
        let next = w / norm;
        let change = (&next - &v).norm();
        v = next;
        if change < POWER_ITERATION_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return dense_leading_pair(e);
    }
    let ev = e * &v;
    let sigma = ev.norm();
    let u = if sigma > 0.0 { ev / sigma } else { ev };
    (u, v, sigma)
}

fn dense_leading_pair(e: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>, f64) {
    let svd = SVD::new(e.clone(), true, true);
    let k = svd.singular_values.imax();
    let u = svd.u.as_ref().unwrap().column(k).into_owned();
    let v = svd.v_t.as_ref().unwrap().row(k).transpose();
    (u, v, svd.singular_values[k])
}

/// Rank-1 SVD update with the majority sign rule and non-negative
/// thresholding.
pub fn update_atom_simultaneous(ws: &ResidualWorkspace) -> Result<AtomUpdateResult> {
    if ws.support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let error_before = ws.error_before();
    let total = ws.residual.norm();
    if total < ZERO_NORM {
        let zeros = DVector::zeros(ws.support.len());
        return Ok(AtomUpdateResult {
            new_atom: ws.previous_atom.clone(),
            error_after: ws.error_with(&ws.previous_atom, &zeros),
            new_coefficients: zeros.clone(),
            raw_coefficients: zeros,
            sign: Sign::Positive,
            error_before,
            zero_residual: true,
            fell_back: false,
        });
    }
    let warm = (ws.previous_coefficients.norm() > 0.0).then_some(&ws.previous_coefficients);
    let (u, _, _) = leading_singular_pair(&ws.residual, warm);
    // Least-squares coefficients for the unit direction u; equals sigma * v
    // at convergence and makes the error identity exact regardless.
    let beta = ws.residual.tr_mul(&u);
    let sign = optimal_sign(beta.as_slice());
    let new_atom = u * sign.value();
    let new_coefficients = thresholded(&beta, sign);
    let error_after = ws.error_with(&new_atom, &new_coefficients);
    Ok(AtomUpdateResult {
        new_atom,
        new_coefficients,
        sign,
        raw_coefficients: beta,
        error_before,
        error_after,
        zero_residual: false,
        fell_back: false,
    })
}

/// Block-coordinate update: least-squares atom from the previous
/// coefficients, normalized, then thresholded least-squares coefficients.
/// Further `power_iterations - 1` rounds repeat the pair of steps, which is
/// a power method on `E^T E` with clamping.
pub fn update_atom_alternating(
    ws: &ResidualWorkspace,
    power_iterations: usize,
) -> Result<AtomUpdateResult> {
    if ws.support.is_empty() {
        return Err(Error::EmptySupport);
    }
    if power_iterations == 0 {
        return Err(Error::Invalid("power_iterations must be at least 1".into()));
    }
    if ws.previous_coefficients.iter().all(|&b| b == 0.0) {
        return Err(Error::Invalid(
            "alternating update needs non-zero previous coefficients".into(),
        ));
    }
    let e = &ws.residual;
    let direction = e * &ws.previous_coefficients;
    let norm = direction.norm();
    if norm < ZERO_NORM {
        let mut r = update_atom_simultaneous(ws)?;
        r.fell_back = true;
        return Ok(r);
    }
    let mut atom = direction / norm;
    let raw = e.tr_mul(&atom);
    let mut coefficients = raw.map(|b| b.max(0.0));
    for _ in 1..power_iterations {
        let direction = e * &coefficients;
        let norm = direction.norm();
        if norm < ZERO_NORM {
            break;
        }
        atom = direction / norm;
        coefficients = e.tr_mul(&atom).map(|b| b.max(0.0));
    }
    let error_after = ws.error_with(&atom, &coefficients);
    Ok(AtomUpdateResult {
        new_atom: atom,
        new_coefficients: coefficients,
        sign: Sign::Positive,
        raw_coefficients: raw,
        error_before: ws.error_before(),
        error_after,
        zero_residual: false,
        fell_back: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn workspace(e: DMatrix<f64>, prev: DVector<f64>) -> ResidualWorkspace {
        let n = e.ncols();
        let d = e.nrows();
        let mut atom = DVector::zeros(d);
        atom[0] = 1.0;
        ResidualWorkspace::new((0..n).collect(), e, atom, prev).unwrap()
    }

    fn random_ws(rng: &mut ChaCha8Rng, d: usize, n: usize) -> ResidualWorkspace {
        let e = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
        let prev = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
        workspace(e, prev)
    }

    #[test]
    fn sign_rule() {
        assert_eq!(optimal_sign(&[3.0, -1.0]), Sign::Positive);
        assert_eq!(optimal_sign(&[-3.0, 1.0]), Sign::Negative);
        assert_eq!(optimal_sign(&[1.0, -1.0]), Sign::Positive);
        assert_eq!(optimal_sign(&[]), Sign::Positive);
    }

    #[test]
    fn exact_rank_one_non_negative() {
        let u = DVector::from_vec(vec![0.0, 0.6, 0.8, 0.0]);
        let v = DVector::from_vec(vec![1.0, 2.0, 0.5, 3.0]);
        let ws = workspace(&u * v.transpose(), DVector::from_element(4, 1.0));
        let r = update_atom_simultaneous(&ws).unwrap();
        assert!((&r.new_atom - &u).amax() < 1e-10);
        assert!((&r.new_coefficients - &v).amax() < 1e-10);
        assert!(r.error_after < 1e-18);
        assert_eq!(r.sign, Sign::Positive);
    }

    #[test]
    fn exact_rank_one_sign_flip() {
        let u = DVector::from_vec(vec![0.6, 0.0, -0.8]);
        let v = DVector::from_vec(vec![-1.0, -2.0, -0.5]);
        let ws = workspace(&u * v.transpose(), DVector::from_element(3, 1.0));
        let r = update_atom_simultaneous(&ws).unwrap();
        assert!((&r.new_atom + &u).amax() < 1e-10);
        assert!((&r.new_coefficients + &v).amax() < 1e-10);
        assert!(r.error_after < 1e-18);
    }

    #[test]
    fn zero_residual_keeps_atom() {
        let ws = workspace(DMatrix::zeros(3, 4), DVector::from_element(4, 1.0));
        let r = update_atom_simultaneous(&ws).unwrap();
        assert!(r.zero_residual);
        assert_eq!(r.new_atom, ws.previous_atom);
        assert_eq!(r.new_coefficients, DVector::zeros(4));
    }

    #[test]
    fn empty_support_is_an_error() {
        let ws = workspace(DMatrix::zeros(3, 0), DVector::zeros(0));
        assert!(matches!(update_atom_simultaneous(&ws), Err(Error::EmptySupport)));
        assert!(matches!(update_atom_alternating(&ws, 1), Err(Error::EmptySupport)));
    }

    #[test]
    fn power_iteration_matches_dense_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let ws = random_ws(&mut rng, 12, 20);
            let (u, _, sigma) = leading_singular_pair(&ws.residual, Some(&ws.previous_coefficients));
            let svd = SVD::new(ws.residual.clone(), true, false);
            assert!((sigma - svd.singular_values[0]).abs() < 1e-8 * sigma);
            let dense_u = svd.u.unwrap().column(0).into_owned();
            assert!((u.dot(&dense_u).abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn sign_is_optimal_and_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let ws = random_ws(&mut rng, 12, 20);
            let r = update_atom_simultaneous(&ws).unwrap();
            let total = ws.residual.norm_squared();
            let opposite = r.sign.flip();
            let flipped_err =
                ws.error_with(&(&r.new_atom * -1.0), &thresholded(&r.raw_coefficients, opposite));
            assert!(r.error_after <= flipped_err);
            let identity = |s: Sign| total - thresholded(&r.raw_coefficients, s).norm_squared();
            assert!((r.error_after - identity(r.sign)).abs() <= 1e-8 * total);
            assert!((flipped_err - identity(opposite)).abs() <= 1e-8 * total);
        }
    }

    #[test]
    fn alternating_first_column_closed_form() {
        let e = DMatrix::from_column_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let ws = workspace(e.clone(), DVector::from_vec(vec![1.0, 0.0, 0.0]));
        let r = update_atom_alternating(&ws, 1).unwrap();
        let expected = e.column(0).normalize();
        assert!((&r.new_atom - expected).amax() < 1e-15);
        assert!(r.new_coefficients.iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn alternating_equals_simultaneous_on_rank_one() {
        let u = DVector::from_vec(vec![0.0, 0.6, 0.0, 0.8]);
        let v = DVector::from_vec(vec![0.2, 0.0, 0.7, 0.4, 0.1]).normalize();
        let ws = workspace(&u * v.transpose() * 2.5, v.clone());
        let a = update_atom_alternating(&ws, 1).unwrap();
        let s = update_atom_simultaneous(&ws).unwrap();
        assert!((&a.new_atom - &s.new_atom).amax() < 1e-12);
        assert!((&a.new_coefficients - &s.new_coefficients).amax() < 1e-12);
        assert!((&a.new_coefficients - &v * 2.5).amax() < 1e-12);
    }

    #[test]
    fn alternating_bound_and_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let ws = random_ws(&mut rng, 12, 20);
            let sigma = SVD::new(ws.residual.clone(), false, false).singular_values[0];
            for iters in [1, 3] {
                let r = update_atom_alternating(&ws, iters).unwrap();
                assert!(r.raw_coefficients.map(|b| b.max(0.0)).norm_squared() <= sigma * sigma + 1e-8);
                assert!((r.new_atom.norm() - 1.0).abs() < 1e-9);
                assert!(r.new_coefficients.iter().all(|&c| c >= 0.0));
            }
        }
    }

    #[test]
    fn alternating_falls_back_on_zero_direction() {
        // previous coefficients orthogonal to the row space of E
        let e = DMatrix::from_column_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let mut ws = workspace(e, DVector::from_vec(vec![1.0, -1.0, 0.0]));
        ws.previous_coefficients = DVector::from_vec(vec![1.0, -1.0, 0.0]);
        let r = update_atom_alternating(&ws, 1).unwrap();
        assert!(r.fell_back);
    }

    #[test]
    fn assemble_restores_own_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let atoms = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let coeffs = DMatrix::from_fn(3, 5, |_, _| rng.random_range(0.0..1.0));
        let x = &atoms * &coeffs;
        let ws = ResidualWorkspace::assemble(&x, &atoms, &coeffs, 1, vec![0, 2, 4]);
        for (c, &l) in ws.support.iter().enumerate() {
            let expected = atoms.column(1) * coeffs[(1, l)];
            assert!((ws.residual.column(c) - expected).amax() < 1e-12);
        }
        assert!(ws.error_before() < 1e-20);
    }
}
