//! Shared numeric types: embedding matrices, labels, dictionaries and
//! coefficients, plus the normalization pipelines applied at ingestion.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Norm below which a vector is treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Numerical tolerances used when validating invariants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Allowed deviation of a unit vector's norm from 1.
    pub norm: f64,
    /// Allowed error in reconstruction identities.
    pub reconstruction: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            norm: 1e-9,
            reconstruction: 1e-10,
        }
    }
}

/// Which preprocessing pipeline has been applied to an [`EmbeddingMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationState {
    Raw,
    Unit,
    UnitCenteredUnit,
    TokenwiseUnit { tokens: usize },
}

/// A `d x N` matrix holding one embedding per column.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: DMatrix<f64>,
    state: NormalizationState,
}

impl EmbeddingMatrix {
    /// Wraps raw embeddings. Entries must be finite.
    pub fn from_raw(data: DMatrix<f64>) -> Result<Self> {
        Self::with_state(data, NormalizationState::Raw, &Tolerances::default())
    }

    /// Wraps embeddings that already went through `state`'s pipeline. The
    /// claimed state is verified against the column norms.
    pub fn with_state(
        data: DMatrix<f64>,
        state: NormalizationState,
        tol: &Tolerances,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding matrix"));
        }
        if let NormalizationState::TokenwiseUnit { tokens } = state {
            if tokens == 0 || data.nrows() % tokens != 0 {
                return Err(Error::Invalid(format!(
                    "dimension {} is not divisible into {} tokens",
                    data.nrows(),
                    tokens
                )));
            }
        }
        let m = Self { data, state };
        if !m.state_holds(tol.norm) {
            return Err(Error::Invalid(format!(
                "columns do not satisfy the {:?} normalization",
                state
            )));
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn state(&self) -> NormalizationState {
        self.state
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn column(&self, i: usize) -> DVectorView<'_, f64> {
        self.data.column(i)
    }

    /// Columns `indices`, in that order, with the same normalization state.
    pub fn select(&self, indices: &[usize]) -> EmbeddingMatrix {
        EmbeddingMatrix {
            data: self.data.select_columns(indices),
            state: self.state,
        }
    }

    /// Re-checks column norms against the recorded normalization state.
    pub fn state_holds(&self, tol: f64) -> bool {
        let unit = |v: f64| (v - 1.0).abs() <= tol;
        match self.state {
            NormalizationState::Raw => true,
            NormalizationState::Unit | NormalizationState::UnitCenteredUnit => {
                self.data.column_iter().all(|c| unit(c.norm()))
            }
            NormalizationState::TokenwiseUnit { tokens } => {
                let width = self.dim() / tokens;
                self.data.column_iter().all(|c| {
                    (0..tokens).all(|t| unit(c.rows(t * width, width).norm()))
                })
            }
        }
    }

    /// Scales every column to unit norm.
    pub fn unit_normalize(&self) -> Result<EmbeddingMatrix> {
        let mut data = self.data.clone();
        normalize_columns(&mut data, "column")?;
        Ok(EmbeddingMatrix {
            data,
            state: NormalizationState::Unit,
        })
    }
}

fn normalize_columns(data: &mut DMatrix<f64>, what: &'static str) -> Result<()> {
    for (i, mut col) in data.column_iter_mut().enumerate() {
        let n = col.norm();
        if n < ZERO_NORM {
            return Err(Error::ZeroVector {
                what,
                index: i,
                threshold: ZERO_NORM,
            });
        }
        col /= n;
    }
    Ok(())
}

/// Unit-normalizes each column, subtracts `mean`, and normalizes again.
///
/// `mean` is an externally supplied vector (typically the modality-gap mean
/// shipped with the embedding model).
pub fn normalize_clip_style(x: &EmbeddingMatrix, mean: &DVector<f64>) -> Result<EmbeddingMatrix> {
    check_dim("mean vector", x.dim(), mean.len())?;
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mean vector"));
    }
    let mut data = x.data.clone();
    normalize_columns(&mut data, "column")?;
    for mut col in data.column_iter_mut() {
        col -= mean;
    }
    normalize_columns(&mut data, "centered column")?;
    Ok(EmbeddingMatrix {
        data,
        state: NormalizationState::UnitCenteredUnit,
    })
}

/// Mean of the columns of `x`.
///
/// Not the canonical centering vector: the clip-style pipeline expects a
/// mean computed on a reference corpus by the embedding's provider. This
/// helper exists for corpora where no such vector is available.
pub fn corpus_mean_noncanonical(x: &EmbeddingMatrix) -> Result<DVector<f64>> {
    if x.is_empty() {
        return Err(Error::Invalid("cannot average an empty corpus".into()));
    }
    Ok(x.data.column_mean())
}

/// A batch of token embeddings. Item `i` is column `i`, formed by
/// concatenating `tokens` vectors of length `token_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    tokens: usize,
    token_dim: usize,
    data: DMatrix<f64>,
}

impl TokenBatch {
    pub fn new(data: DMatrix<f64>, tokens: usize, token_dim: usize) -> Result<Self> {
        if tokens == 0 || token_dim == 0 {
            return Err(Error::Invalid("token count and width must be positive".into()));
        }
        check_dim("token layout", tokens * token_dim, data.nrows())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("token batch"));
        }
        Ok(Self {
            tokens,
            token_dim,
            data,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }
}

/// Normalizes every token of every item separately. No mean is removed.
pub fn normalize_tokenwise(batch: &TokenBatch) -> Result<EmbeddingMatrix> {
    let mut data = batch.data.clone();
    let (t_count, width) = (batch.tokens, batch.token_dim);
    for (i, mut col) in data.column_iter_mut().enumerate() {
        for t in 0..t_count {
            let mut tok = col.rows_mut(t * width, width);
            let n = tok.norm();
            if n < ZERO_NORM {
                return Err(Error::ZeroVector {
                    what: "token",
                    index: i * t_count + t,
                    threshold: ZERO_NORM,
                });
            }
            tok /= n;
        }
    }
    Ok(EmbeddingMatrix {
        data,
        state: NormalizationState::TokenwiseUnit { tokens: t_count },
    })
}

/// Binary `N x S` multi-label matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptLabelMatrix {
    names: Vec<String>,
    n_items: usize,
    entries: Vec<u8>,
}

impl ConceptLabelMatrix {
    /// Builds a label matrix from rows of 0/1 values. Rows without any
    /// active concept are rejected.
    pub fn new(names: Vec<String>, rows: &[Vec<u8>]) -> Result<Self> {
        let s = names.len();
        if s == 0 {
            return Err(Error::Invalid("label matrix needs at least one concept".into()));
        }
        let mut entries = Vec::with_capacity(rows.len() * s);
        for (i, row) in rows.iter().enumerate() {
            check_dim("label row width", s, row.len())?;
            if row.iter().any(|&v| v > 1) {
                return Err(Error::Invalid(format!("label row {i} has a non-binary entry")));
            }
            if row.iter().all(|&v| v == 0) {
                return Err(Error::Invalid(format!("label row {i} has no active concept")));
            }
            entries.extend_from_slice(row);
        }
        Ok(Self {
            names,
            n_items: rows.len(),
            entries,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_concepts(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, item: usize, concept: usize) -> bool {
        self.entries[item * self.names.len() + concept] == 1
    }

    pub fn row(&self, item: usize) -> &[u8] {
        let s = self.names.len();
        &self.entries[item * s..(item + 1) * s]
    }

    /// Active concepts of `item`, ascending.
    pub fn active(&self, item: usize) -> Vec<usize> {
        self.row(item)
            .iter()
            .enumerate()
            .filter_map(|(j, &v)| (v == 1).then_some(j))
            .collect()
    }

    /// Items in which `concept` is present, ascending.
    pub fn items_with(&self, concept: usize) -> Vec<usize> {
        (0..self.n_items).filter(|&i| self.get(i, concept)).collect()
    }

    pub fn select(&self, items: &[usize]) -> ConceptLabelMatrix {
        let s = self.names.len();
        let mut entries = Vec::with_capacity(items.len() * s);
        for &i in items {
            entries.extend_from_slice(self.row(i));
        }
        ConceptLabelMatrix {
            names: self.names.clone(),
            n_items: items.len(),
            entries,
        }
    }

    pub fn mean_active(&self) -> f64 {
        if self.n_items == 0 {
            return 0.0;
        }
        self.entries.iter().map(|&v| v as f64).sum::<f64>() / self.n_items as f64
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.entries.chunks(self.names.len())
    }
}

/// Dictionary `B = [B_1 ... B_S]` of unit-norm atoms partitioned into
/// concept groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDictionary {
    atoms: DMatrix<f64>,
    group_sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl GroupDictionary {
    pub fn new(atoms: DMatrix<f64>, group_sizes: Vec<usize>, tol: &Tolerances) -> Result<Self> {
        if group_sizes.is_empty() || group_sizes.contains(&0) {
            return Err(Error::Invalid("every group needs at least one atom".into()));
        }
        check_dim("dictionary atom count", group_sizes.iter().sum(), atoms.ncols())?;
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dictionary"));
        }
        for (m, col) in atoms.column_iter().enumerate() {
            if (col.norm() - 1.0).abs() > tol.norm {
                return Err(Error::Invalid(format!(
                    "atom {m} has norm {} (expected unit norm)",
                    col.norm()
                )));
            }
        }
        Ok(Self::from_parts(atoms, group_sizes))
    }

    pub(crate) fn from_parts(atoms: DMatrix<f64>, group_sizes: Vec<usize>) -> Self {
        let offsets = group_offsets(&group_sizes);
        Self {
            atoms,
            group_sizes,
            offsets,
        }
    }

    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn atom(&self, m: usize) -> DVectorView<'_, f64> {
        self.atoms.column(m)
    }

    /// Column range of group `j`.
    pub fn group_range(&self, j: usize) -> Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    pub fn group(&self, j: usize) -> DMatrix<f64> {
        let r = self.group_range(j);
        self.atoms.columns(r.start, r.len()).into_owned()
    }

    pub fn group_of_atom(&self, m: usize) -> usize {
        // offsets is sorted; the last offset <= m names the group
        self.offsets.partition_point(|&o| o <= m) - 1
    }

    /// Atom indices belonging to `groups`, in ascending group order.
    pub fn columns_of(&self, groups: &[usize]) -> Vec<usize> {
        groups.iter().flat_map(|&j| self.group_range(j)).collect()
    }

    pub(crate) fn atoms_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.atoms
    }
}

pub(crate) fn group_offsets(sizes: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(sizes.len() + 1);
    offsets.push(0);
    let mut acc = 0;
    for &s in sizes {
        acc += s;
        offsets.push(acc);
    }
    offsets
}

/// Non-negative `M x N` coefficient matrix whose row blocks mirror the
/// dictionary groups.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    data: DMatrix<f64>,
    group_sizes: Vec<usize>,
}

impl CoefficientMatrix {
    pub fn new(data: DMatrix<f64>, group_sizes: Vec<usize>) -> Result<Self> {
        check_dim("coefficient rows", group_sizes.iter().sum(), data.nrows())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficient matrix"));
        }
        if data.iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("coefficients must be non-negative".into()));
        }
        Ok(Self { data, group_sizes })
    }

    pub(crate) fn zeros(group_sizes: &[usize], n_items: usize) -> Self {
        Self {
            data: DMatrix::zeros(group_sizes.iter().sum(), n_items),
            group_sizes: group_sizes.to_vec(),
        }
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.data
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn n_items(&self) -> usize {
        self.data.ncols()
    }

    /// True when every block of an absent concept is exactly zero.
    pub fn respects_labels(&self, labels: &ConceptLabelMatrix) -> bool {
        if labels.n_items() != self.n_items() || labels.n_concepts() != self.group_sizes.len() {
            return false;
        }
        let offsets = group_offsets(&self.group_sizes);
        (0..self.n_items()).all(|i| {
            (0..self.group_sizes.len()).all(|j| {
                labels.get(i, j)
                    || (offsets[j]..offsets[j + 1]).all(|m| self.data[(m, i)] == 0.0)
            })
        })
    }
}

/// One concept's share of a decomposed embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub concept: usize,
    pub vector: DVector<f64>,
    pub coefficients: DVector<f64>,
}

/// An embedding split into per-concept components plus a residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub components: Vec<Component>,
    pub residual: DVector<f64>,
}

impl Decomposition {
    /// Sum of the components and the residual.
    pub fn recombine(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(self.residual.clone(), |acc, c| acc + &c.vector)
    }

    pub fn component(&self, concept: usize) -> Option<&Component> {
        self.components.iter().find(|c| c.concept == concept)
    }
}

/// Synthesizes `B * alpha`.
pub fn reconstruct(dict: &GroupDictionary, alpha: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("coefficient vector", dict.n_atoms(), alpha.len())?;
    Ok(dict.atoms() * alpha)
}
