//! Per-concept decomposition of embeddings against a trained dictionary,
//! greedy non-negative sparse coding and atom co-occurrence.

use nalgebra::{DMatrix, DVector, Dyn, Matrix, Storage, U1};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::nnls::{solve_nnls, GroupSolver, NnlsProblem};
use crate::types::{Component, Decomposition, EmbeddingMatrix, GroupDictionary};

/// Coefficients above this magnitude count as active atoms.
pub const ACTIVE_THRESHOLD: f64 = 1e-8;

/// Correlations and gains below this fraction of `||x||` (resp. `||x||^2`)
/// are treated as round-off by the greedy coders.
const GREEDY_RELATIVE_FLOOR: f64 = 1e-12;

/// Splits `x` into one component per concept using the atoms of the
/// `active` concepts. Inactive concepts get zero components.
pub fn decompose_full<S: Storage<f64, Dyn, U1>>(
    dict: &GroupDictionary,
    x: &Matrix<f64, Dyn, U1, S>,
    active: &[usize],
) -> Result<Decomposition> {
    decompose_with(&GroupSolver::new(dict, 0.0)?, x, active)
}

fn decompose_with<S: Storage<f64, Dyn, U1>>(
    solver: &GroupSolver<'_>,
    x: &Matrix<f64, Dyn, U1, S>,
    active: &[usize],
) -> Result<Decomposition> {
    let dict = solver.dictionary();
    let sol = solver.solve(x, active)?;
    let mut residual = x.clone_owned();
    let components = (0..dict.n_groups())
        .map(|j| {
            let range = dict.group_range(j);
            let coefficients = sol.coefficients.rows(range.start, range.len()).into_owned();
            let vector = dict.atoms().columns(range.start, range.len()) * &coefficients;
            residual -= &vector;
            Component {
                concept: j,
                vector,
                coefficients,
            }
        })
        .collect();
    Ok(Decomposition {
        components,
        residual,
    })
}

/// [`decompose_full`] for every column of `x`, with per-item active sets.
pub fn decompose_batch(
    dict: &GroupDictionary,
    x: &EmbeddingMatrix,
    active: &[Vec<usize>],
) -> Result<Vec<Decomposition>> {
    check_dim("active sets", x.len(), active.len())?;
    let solver = GroupSolver::new(dict, 0.0)?;
    (0..x.len())
        .into_par_iter()
        .map(|i| decompose_with(&solver, &x.column(i), &active[i]).map_err(|e| e.at_item(i)))
        .collect()
}

/// Closest point to `x` in the cone spanned by concept `j`'s atoms.
pub fn project_concept<S: Storage<f64, Dyn, U1>>(
    dict: &GroupDictionary,
    x: &Matrix<f64, Dyn, U1, S>,
    j: usize,
) -> Result<Component> {
    let mut d = decompose_full(dict, x, &[j])?;
    Ok(d.components.swap_remove(j))
}

/// [`project_concept`] for every column of `x`.
pub fn project_concept_batch(
    dict: &GroupDictionary,
    x: &EmbeddingMatrix,
    j: usize,
) -> Result<Vec<DVector<f64>>> {
    let solver = GroupSolver::new(dict, 0.0)?;
    let range = dict.group_range(j);
    let block = dict.atoms().columns(range.start, range.len());
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let sol = solver.solve(&x.column(i), &[j]).map_err(|e| e.at_item(i))?;
            Ok(block * sol.coefficients.rows(range.start, range.len()))
        })
        .collect()
}

/// Output of a greedy sparse coder.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    /// Full-length (`M`) non-negative coefficients.
    pub coefficients: DVector<f64>,
    /// Atoms (or groups, for the group coder) in selection order.
    pub selected: Vec<usize>,
    /// `||x||` followed by the residual norm after each selection.
    pub residual_norms: Vec<f64>,
}

impl SparseCode {
    pub fn residual_norm(&self) -> f64 {
        *self.residual_norms.last().expect("starts with ||x||")
    }

    /// Atoms whose coefficient exceeds [`ACTIVE_THRESHOLD`].
    pub fn active_atoms(&self) -> Vec<usize> {
        active_atoms(&self.coefficients)
    }
}

fn active_atoms(c: &DVector<f64>) -> Vec<usize> {
    c.iter()
        .enumerate()
        .filter(|(_, &v)| v > ACTIVE_THRESHOLD)
        .map(|(m, _)| m)
        .collect()
}

/// NNLS restricted to `cols`; returns the full coefficient vector and the
/// residual.
fn solve_on(
    atoms: &DMatrix<f64>,
    x: &DVector<f64>,
    cols: &[usize],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let design = atoms.select_columns(cols);
    let sol = solve_nnls(&NnlsProblem::new(&design, x))?;
    let mut full = DVector::zeros(atoms.ncols());
    for (pos, &c) in cols.iter().enumerate() {
        full[c] = sol.coefficients[pos];
    }
    let residual = x - design * &sol.coefficients;
    Ok((full, residual))
}

/// Non-negative orthogonal matching pursuit.
///
/// Adds the atom with the largest positive correlation with the residual,
/// then re-solves NNLS on the selected atoms. Stops after `max_atoms`
/// selections (0 means no limit), once the residual norm is at most
/// `residual_tol`, or when no atom correlates positively.
pub fn sparse_code_nn_omp<S: Storage<f64, Dyn, U1>>(
    dict: &GroupDictionary,
    x: &Matrix<f64, Dyn, U1, S>,
    max_atoms: usize,
    residual_tol: f64,
) -> Result<SparseCode> {
    check_dim("embedding dimension", dict.dim(), x.len())?;
    if max_atoms == 0 && !(residual_tol > 0.0) {
        return Err(Error::Invalid("need max_atoms >= 1 or residual_tol > 0".into()));
    }
    let atoms = dict.atoms();
    let x = x.clone_owned();
    let limit = if max_atoms == 0 { dict.n_atoms() } else { max_atoms.min(dict.n_atoms()) };
    let mut coefficients = DVector::zeros(dict.n_atoms());
    let mut residual = x.clone();
    let mut selected = Vec::new();
    let mut residual_norms = vec![x.norm()];
    let floor = GREEDY_RELATIVE_FLOOR * x.norm();
    while selected.len() < limit && residual.norm() > residual_tol {
        let corr = atoms.tr_mul(&residual);
        let mut best: Option<(usize, f64)> = None;
        for (m, &c) in corr.iter().enumerate() {
            if c > floor && !selected.contains(&m) && best.map_or(true, |(_, b)| c > b) {
                best = Some((m, c));
            }
        }
        let Some((m, _)) = best else { break };
        selected.push(m);
        let (c, r) = solve_on(atoms, &x, &selected)?;
        coefficients = c;
        residual = r;
        residual_norms.push(residual.norm());
    }
    Ok(SparseCode {
        coefficients,
        selected,
        residual_norms,
    })
}

/// Group-structured greedy coder.
///
/// Each step projects the current residual onto the cone of every
/// unselected group and picks the group with the largest reduction of the
/// squared residual norm, then re-solves NNLS on the union of selected
/// groups. Stops after `max_groups` groups or when no group reduces the
/// residual.
pub fn sparse_code_group_omp<S: Storage<f64, Dyn, U1>>(
    dict: &GroupDictionary,
    x: &Matrix<f64, Dyn, U1, S>,
    max_groups: usize,
) -> Result<SparseCode> {
    check_dim("embedding dimension", dict.dim(), x.len())?;
    if max_groups == 0 {
        return Err(Error::Invalid("max_groups must be at least 1".into()));
    }
    let solver = GroupSolver::new(dict, 0.0)?;
    let x = x.clone_owned();
    let mut coefficients = DVector::zeros(dict.n_atoms());
    let mut residual = x.clone();
    let mut selected: Vec<usize> = Vec::new();
    let mut residual_norms = vec![x.norm()];
    let floor = GREEDY_RELATIVE_FLOOR * x.norm_squared();
    while selected.len() < max_groups.min(dict.n_groups()) {
        let before = residual.norm_squared();
        let mut best: Option<(usize, f64)> = None;
        for g in (0..dict.n_groups()).filter(|g| !selected.contains(g)) {
            let proj = solver.solve(&residual, &[g])?;
            let gain = before - proj.residual_norm * proj.residual_norm;
            if gain > floor && best.map_or(true, |(_, b)| gain > b) {
                best = Some((g, gain));
            }
        }
        let Some((g, _)) = best else { break };
        selected.push(g);
        let sol = solver.solve(&x, &selected)?;
        residual = &x - dict.atoms() * &sol.coefficients;
        coefficients = sol.coefficients;
        residual_norms.push(residual.norm());
    }
    Ok(SparseCode {
        coefficients,
        selected,
        residual_norms,
    })
}

/// Row-normalized atom co-occurrence counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Cooccurrence {
    /// `C[m, k]` = fraction of codes using atom `m` that also use atom `k`.
    pub matrix: DMatrix<f64>,
    /// Atoms that were never active; their rows are zero except for a unit
    /// diagonal.
    pub never_active: Vec<usize>,
}

/// Counts how often pairs of atoms are simultaneously active across
/// `codes` (each a length-`M` coefficient vector), normalizing every row by
/// its diagonal count.
pub fn cooccurrence_matrix<'a>(
    codes: impl IntoIterator<Item = &'a DVector<f64>>,
) -> Result<Cooccurrence> {
    let mut counts: Option<DMatrix<f64>> = None;
    for code in codes {
        let c = counts.get_or_insert_with(|| DMatrix::zeros(code.len(), code.len()));
        check_dim("code length", c.nrows(), code.len())?;
        let act = active_atoms(code);
        for &m in &act {
            for &k in &act {
                c[(m, k)] += 1.0;
            }
        }
    }
    let mut matrix = counts.ok_or_else(|| Error::Invalid("no codes to count".into()))?;
    let mut never_active = Vec::new();
    for m in 0..matrix.nrows() {
        let diag = matrix[(m, m)];
        if diag == 0.0 {
            never_active.push(m);
            matrix[(m, m)] = 1.0;
        } else {
            matrix.row_mut(m).unscale_mut(diag);
        }
    }
    Ok(Cooccurrence {
        matrix,
        never_active,
    })
}
