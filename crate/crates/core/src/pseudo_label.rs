//! Zero-shot multi-label assignment from concept prototype embeddings.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::types::{ConceptLabelMatrix, EmbeddingMatrix, Tolerances, ZERO_NORM};

/// One unit-norm prototype per concept (e.g. the text embedding of the
/// concept word).
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPrototypes {
    vectors: DMatrix<f64>,
    names: Vec<String>,
}

impl ConceptPrototypes {
    pub fn new(vectors: DMatrix<f64>, names: Vec<String>, tol: &Tolerances) -> Result<Self> {
        check_dim("prototype names", vectors.ncols(), names.len())?;
        for (j, c) in vectors.column_iter().enumerate() {
            let n = c.norm();
            if !n.is_finite() {
                return Err(Error::NonFinite("prototype"));
            }
            if (n - 1.0).abs() > tol.norm {
                return Err(Error::Invalid(format!("prototype {j} has norm {n}, expected 1")));
            }
        }
        Ok(Self { vectors, names })
    }

    /// Normalizes every column first.
    pub fn from_raw(mut vectors: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        for (j, mut c) in vectors.column_iter_mut().enumerate() {
            let n = c.norm();
            if n < ZERO_NORM {
                return Err(Error::ZeroVector {
                    what: "prototype",
                    index: j,
                    threshold: ZERO_NORM,
                });
            }
            c.unscale_mut(n);
        }
        Self::new(vectors, names, &Tolerances::default())
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }
}

/// Marks the `s_tilde` concepts with the highest cosine similarity to each
/// item as active. Ties go to the lower concept index.
pub fn zero_shot_multilabel(
    x: &EmbeddingMatrix,
    prototypes: &ConceptPrototypes,
    s_tilde: usize,
) -> Result<ConceptLabelMatrix> {
    check_dim("prototype dimension", x.dim(), prototypes.dim())?;
    let s = prototypes.len();
    if s_tilde == 0 || s_tilde > s {
        return Err(Error::Invalid(format!(
            "active concept count {s_tilde} must lie in 1..={s}"
        )));
    }
    let rows: Vec<Vec<u8>> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let col = x.column(i);
            let n = col.norm();
            if n < ZERO_NORM {
                return Err(Error::ZeroVector {
                    what: "item",
                    index: i,
                    threshold: ZERO_NORM,
                });
            }
            let sims = prototypes.vectors.tr_mul(&col) / n;
            let mut order: Vec<usize> = (0..s).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            let mut row = vec![0u8; s];
            for &j in &order[..s_tilde] {
                row[j] = 1;
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    ConceptLabelMatrix::new(prototypes.names.clone(), &rows)
}

/// Mean number of active concepts per item, rounded half away from zero.
pub fn estimate_s_tilde(labels: &ConceptLabelMatrix) -> usize {
    round_half_away(labels.mean_active())
}

fn round_half_away(v: f64) -> usize {
    // f64::round rounds half away from zero
    v.round().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::random_unit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(s: usize) -> Vec<String> {
        (0..s).map(|j| format!("c{j}")).collect()
    }

    #[test]
    fn self_similarity_wins() {
        let w = ConceptPrototypes::from_raw(DMatrix::identity(3, 3), names(3)).unwrap();
        let x = EmbeddingMatrix::from_raw(DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0])).unwrap();
        let l = zero_shot_multilabel(&x, &w, 1).unwrap();
        assert_eq!(l.row(0), &[0, 1, 0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let w = ConceptPrototypes::from_raw(DMatrix::identity(3, 3), names(3)).unwrap();
        let x = EmbeddingMatrix::from_raw(DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0])).unwrap();
        let l = zero_shot_multilabel(&x, &w, 2).unwrap();
        assert_eq!(l.row(0), &[1, 1, 0]);
    }

    #[test]
    fn matches_sort_oracle_and_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = 8;
        let s = 6;
        let protos: Vec<_> = (0..s).map(|_| random_unit(&mut rng, d)).collect();
        let w = ConceptPrototypes::new(DMatrix::from_columns(&protos), names(s), &Tolerances::default())
            .unwrap();
        let data = DMatrix::from_fn(d, 40, |_, _| rng.random_range(-1.0..1.0));
        let x = EmbeddingMatrix::from_raw(data.clone()).unwrap();
        let scaled = EmbeddingMatrix::from_raw(data.clone() * 3.0).unwrap();
        let l = zero_shot_multilabel(&x, &w, 2).unwrap();
        assert_eq!(l, zero_shot_multilabel(&scaled, &w, 2).unwrap());
        for i in 0..40 {
            let c = data.column(i);
            let mut sims: Vec<(f64, usize)> =
                protos.iter().enumerate().map(|(j, p)| (p.dot(&c) / c.norm(), j)).collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut want = vec![0u8; s];
            want[sims[0].1] = 1;
            want[sims[1].1] = 1;
            assert_eq!(l.row(i), want.as_slice());
            assert_eq!(l.row(i).iter().map(|&v| v as usize).sum::<usize>(), 2);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = ConceptPrototypes::from_raw(DMatrix::identity(3, 3), names(3)).unwrap();
        let x = EmbeddingMatrix::from_raw(DMatrix::identity(4, 1)).unwrap();
        assert!(matches!(zero_shot_multilabel(&x, &w, 1), Err(Error::DimensionMismatch { .. })));
        let x = EmbeddingMatrix::from_raw(DMatrix::identity(3, 1)).unwrap();
        assert!(zero_shot_multilabel(&x, &w, 0).is_err());
        assert!(zero_shot_multilabel(&x, &w, 4).is_err());
        assert!(ConceptPrototypes::new(DMatrix::identity(3, 3) * 2.0, names(3), &Tolerances::default())
            .is_err());
    }

    #[test]
    fn s_tilde_rounding() {
        assert_eq!(round_half_away(2.467), 2);
        assert_eq!(round_half_away(2.303), 2);
        assert_eq!(round_half_away(2.5), 3);
        let l = ConceptLabelMatrix::new(names(4), &vec![vec![1, 1, 1, 0]; 5]).unwrap();
        assert_eq!(estimate_s_tilde(&l), 3);
    }
}
