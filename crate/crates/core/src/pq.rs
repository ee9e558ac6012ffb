//! Per-token codebook quantization of tokenized embeddings and
//! lookup-table scoring.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::types::{EmbeddingMatrix, NormalizationState, Tolerances, ZERO_NORM};

/// `K` unit-norm codewords of width `d_T`, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codewords: DMatrix<f64>,
}

impl Codebook {
    pub fn new(codewords: DMatrix<f64>, tol: &Tolerances) -> Result<Self> {
        if codewords.ncols() == 0 || codewords.ncols() > u16::MAX as usize + 1 {
            return Err(Error::Invalid(format!(
                "codebook size {} must lie in 1..=65536",
                codewords.ncols()
            )));
        }
        for (k, c) in codewords.column_iter().enumerate() {
            let n = c.norm();
            if !n.is_finite() || (n - 1.0).abs() > tol.norm {
                return Err(Error::Invalid(format!("codeword {k} has norm {n}, expected 1")));
            }
        }
        Ok(Self { codewords })
    }

    /// Normalizes every codeword first.
    pub fn from_raw(mut codewords: DMatrix<f64>) -> Result<Self> {
        for (k, mut c) in codewords.column_iter_mut().enumerate() {
            let n = c.norm();
            if n < ZERO_NORM {
                return Err(Error::ZeroVector {
                    what: "codeword",
                    index: k,
                    threshold: ZERO_NORM,
                });
            }
            c.unscale_mut(n);
        }
        Self::new(codewords, &Tolerances::default())
    }

    pub fn codewords(&self) -> &DMatrix<f64> {
        &self.codewords
    }

    pub fn len(&self) -> usize {
        self.codewords.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.ncols() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.codewords.nrows()
    }

    /// Index of the nearest codeword in Euclidean distance, ties to the
    /// lower index.
    pub fn nearest(&self, token: &DVector<f64>) -> u16 {
        let mut best = (0usize, f64::INFINITY);
        for (k, c) in self.codewords.column_iter().enumerate() {
            let dist = (token - c).norm_squared();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best.0 as u16
    }
}

/// Codeword ids, `tokens x N`, column-major by item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedPool {
    tokens: usize,
    indices: Vec<u16>,
}

impl QuantizedPool {
    pub fn new(tokens: usize, indices: Vec<u16>) -> Result<Self> {
        if tokens == 0 || indices.len() % tokens != 0 {
            return Err(Error::Invalid(format!(
                "{} indices do not form items of {tokens} tokens",
                indices.len()
            )));
        }
        Ok(Self { tokens, indices })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn item(&self, i: usize) -> &[u16] {
        &self.indices[i * self.tokens..(i + 1) * self.tokens]
    }

    /// Replaces every token by its codeword.
    pub fn reconstruct(&self, codebook: &Codebook) -> Result<EmbeddingMatrix> {
        let w = codebook.token_dim();
        if let Some(&bad) = self.indices.iter().find(|&&k| k as usize >= codebook.len()) {
            return Err(Error::Invalid(format!("codeword id {bad} exceeds codebook size")));
        }
        let data = DMatrix::from_fn(self.tokens * w, self.len(), |r, i| {
            let k = self.item(i)[r / w] as usize;
            codebook.codewords[(r % w, k)]
        });
        EmbeddingMatrix::from_raw(data)
    }
}

fn token_count(pool: &EmbeddingMatrix, codebook: &Codebook) -> Result<usize> {
    let NormalizationState::TokenwiseUnit { tokens } = pool.state() else {
        return Err(Error::Invalid("pool must be tokenwise normalized".into()));
    };
    check_dim("pool dimension", tokens * codebook.token_dim(), pool.dim())?;
    Ok(tokens)
}

/// Maps every token of every pool item to its nearest codeword.
pub fn quantize_pool(pool: &EmbeddingMatrix, codebook: &Codebook) -> Result<QuantizedPool> {
    let tokens = token_count(pool, codebook)?;
    let w = codebook.token_dim();
    let per_item: Vec<Vec<u16>> = (0..pool.len())
        .into_par_iter()
        .map(|i| {
            let col = pool.column(i);
            (0..tokens)
                .map(|t| codebook.nearest(&col.rows(t * w, w).into_owned()))
                .collect()
        })
        .collect();
    QuantizedPool::new(tokens, per_item.concat())
}

/// `G[t, k] = q^t . c_k / ||q||` for one query (or component) `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    table: DMatrix<f64>,
}

impl LookupTable {
    pub fn build(query: &DVector<f64>, tokens: usize, codebook: &Codebook) -> Result<Self> {
        let w = codebook.token_dim();
        check_dim("query dimension", tokens * w, query.len())?;
        let n = query.norm();
        let scale = if n < ZERO_NORM { 0.0 } else { 1.0 / n };
        let mut table = DMatrix::zeros(tokens, codebook.len());
        for t in 0..tokens {
            let row = codebook.codewords.tr_mul(&query.rows(t * w, w)) * scale;
            table.set_row(t, &row.transpose());
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }

    pub fn score(&self, codes: &[u16]) -> f64 {
        codes
            .iter()
            .enumerate()
            .map(|(t, &k)| self.table[(t, k as usize)])
            .sum()
    }
}

/// Scores every quantized candidate as `sum_t G[t, k_t]`. Each score equals
/// `q . x~ / ||q||` for the reconstructed candidate `x~`; since every `x~`
/// has norm `sqrt(tokens)`, ranking by it ranks by cosine.
pub fn lut_score(query: &DVector<f64>, codebook: &Codebook, pool: &QuantizedPool) -> Result<Vec<f64>> {
    let lut = LookupTable::build(query, pool.tokens(), codebook)?;
    if let Some(&bad) = pool.indices().iter().find(|&&k| k as usize >= codebook.len()) {
        return Err(Error::Invalid(format!("codeword id {bad} exceeds codebook size")));
    }
    Ok((0..pool.len()).into_par_iter().map(|i| lut.score(pool.item(i))).collect())
}
