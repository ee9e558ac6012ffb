//! Word captions for concept groups and orthogonal alignment of embedding
//! spaces.

use nalgebra::{DMatrix, DVector, SVD};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::nnls::GroupSolver;
use crate::types::{normalize_clip_style, EmbeddingMatrix, GroupDictionary, ZERO_NORM};

/// Word embeddings that were normalized, mean-centered and re-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    embeddings: EmbeddingMatrix,
}

impl Vocabulary {
    /// Preprocesses raw word embeddings. Without `mean`, the mean of the
    /// unit-normalized vocabulary itself is removed.
    pub fn preprocess(words: Vec<String>, raw: DMatrix<f64>, mean: Option<&DVector<f64>>) -> Result<Self> {
        check_dim("word list", raw.ncols(), words.len())?;
        if words.is_empty() {
            return Err(Error::Invalid("vocabulary is empty".into()));
        }
        let raw = EmbeddingMatrix::from_raw(raw)?;
        let mean = match mean {
            Some(m) => m.clone(),
            None => raw.unit_normalize()?.data().column_mean(),
        };
        Ok(Self {
            words,
            embeddings: normalize_clip_style(&raw, &mean)?,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Caption {
    pub word: String,
    /// `min_{a >= 0} ||w - B_j a||`.
    pub error: f64,
}

/// The `top_n` words best reconstructed by a non-negative combination of
/// concept `j`'s atoms, by ascending error with ties broken by the word.
pub fn word_captions(
    dict: &GroupDictionary,
    j: usize,
    vocab: &Vocabulary,
    top_n: usize,
) -> Result<Vec<Caption>> {
    if j >= dict.n_groups() {
        return Err(Error::Invalid(format!("concept index {j} out of range")));
    }
    let emb = vocab.embeddings();
    check_dim("vocabulary dimension", dict.dim(), emb.dim())?;
    let solver = GroupSolver::new(dict, 0.0)?;
    let errors: Vec<f64> = (0..vocab.len())
        .into_par_iter()
        .map(|w| solver.solve(&emb.column(w), &[j]).map(|s| s.residual_norm))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..vocab.len()).collect();
    order.sort_by(|&a, &b| {
        errors[a]
            .total_cmp(&errors[b])
            .then_with(|| vocab.words[a].cmp(&vocab.words[b]))
    });
    Ok(order
        .into_iter()
        .take(top_n)
        .map(|w| Caption {
            word: vocab.words[w].clone(),
            error: errors[w],
        })
        .collect())
}

/// Orthogonal `R` minimizing `||R X - Y||_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    pub rotation: DMatrix<f64>,
}

impl AlignmentMap {
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("vector dimension", self.rotation.ncols(), v.len())?;
        Ok(&self.rotation * v)
    }

    /// `||R^T R - I||_F`.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.rotation.ncols();
        (self.rotation.tr_mul(&self.rotation) - DMatrix::identity(n, n)).norm()
    }
}

/// Solves the orthogonal Procrustes problem for paired columns of `x`
/// (source space) and `y` (target space): `R = U V^T` from the SVD
/// `Y X^T = U S V^T`.
pub fn procrustes_align(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<AlignmentMap> {
    check_dim("paired columns", x.ncols(), y.ncols())?;
    check_dim("space dimension", x.nrows(), y.nrows())?;
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("alignment pairs"));
    }
    let cross = y * x.transpose();
    let svd = SVD::new(cross, true, true);
    let top = svd.singular_values.max();
    if !(top > ZERO_NORM) {
        return Err(Error::DegenerateCrossCovariance);
    }
    let u = svd.u.expect("computed");
    let v_t = svd.v_t.expect("computed");
    Ok(AlignmentMap { rotation: u * v_t })
}
