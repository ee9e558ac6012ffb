//! Dictionary initialization.

use nalgebra::{DMatrix, DVector, SVD};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::learn::atom::optimal_sign;
use crate::types::{ConceptLabelMatrix, EmbeddingMatrix, GroupDictionary, ZERO_NORM};

/// Scale of the perturbation used to fill atoms beyond a group's
/// numerical rank.
const RANK_FILL_PERTURBATION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Per-concept truncated SVD with majority-rule signs.
    #[default]
    Svd,
    /// Random labelled samples as atoms. Kept for comparison only; the SVD
    /// initialization reaches lower error.
    RandomSamples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitOutput {
    pub dictionary: GroupDictionary,
    /// Concepts whose data had fewer than `M_j` significant singular values.
    /// Their surplus atoms are perturbed copies of the leading ones.
    pub rank_deficient: Vec<usize>,
}

fn check_groups(x: &EmbeddingMatrix, labels: &ConceptLabelMatrix, group_sizes: &[usize]) -> Result<()> {
    check_dim("label rows", x.len(), labels.n_items())?;
    check_dim("group count", labels.n_concepts(), group_sizes.len())?;
    if group_sizes.contains(&0) {
        return Err(Error::Invalid("every group needs at least one atom".into()));
    }
    Ok(())
}

/// Initializes group `j` from the top `M_j` left singular vectors of the
/// embeddings labelled with concept `j`, each signed so that its right
/// singular vector is mostly non-negative.
pub fn svd_init(
    x: &EmbeddingMatrix,
    labels: &ConceptLabelMatrix,
    group_sizes: &[usize],
) -> Result<InitOutput> {
    check_groups(x, labels, group_sizes)?;
    let d = x.dim();
    let total: usize = group_sizes.iter().sum();
    if total > d {
        log::warn!("dictionary has {total} atoms in dimension {d}; concept cones will overlap");
    }
    let mut atoms = DMatrix::zeros(d, total);
    let mut rank_deficient = Vec::new();
    let mut offset = 0;
    for (j, &size) in group_sizes.iter().enumerate() {
        let items = labels.items_with(j);
        if items.len() < size {
            return Err(Error::InsufficientSamples {
                concept: j,
                available: items.len(),
                required: size,
            });
        }
        let svd = SVD::new(x.data().select_columns(&items), true, true);
        let u = svd.u.as_ref().expect("computed");
        let v_t = svd.v_t.as_ref().expect("computed");
        let sigma = &svd.singular_values;
        if sigma[0] < ZERO_NORM {
            return Err(Error::RankDeficient { concept: j });
        }
        let rank = sigma.iter().take(size).filter(|&&s| s >= ZERO_NORM).count();
        for k in 0..rank {
            let right: Vec<f64> = v_t.row(k).iter().copied().collect();
            let sign = optimal_sign(&right);
            atoms.set_column(offset + k, &(u.column(k) * sign.value()));
        }
        if rank < size {
            log::warn!("concept {j}: only {rank} of {size} singular values are significant");
            rank_deficient.push(j);
            let mut rng = ChaCha8Rng::seed_from_u64(j as u64);
            for k in rank..size {
                let base = atoms.column(offset + k % rank).into_owned();
                let noise = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                let atom: DVector<f64> = base + noise * RANK_FILL_PERTURBATION;
                atoms.set_column(offset + k, &atom.normalize());
            }
        }
        offset += size;
    }
    Ok(InitOutput {
        dictionary: GroupDictionary::from_parts(atoms, group_sizes.to_vec()),
        rank_deficient,
    })
}

/// Uses `M_j` distinct random items of concept `j` (normalized) as atoms.
pub fn random_sample_init(
    x: &EmbeddingMatrix,
    labels: &ConceptLabelMatrix,
    group_sizes: &[usize],
    seed: u64,
) -> Result<InitOutput> {
    check_groups(x, labels, group_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = group_sizes.iter().sum();
    let mut atoms = DMatrix::zeros(x.dim(), total);
    let mut offset = 0;
    for (j, &size) in group_sizes.iter().enumerate() {
        let items = labels.items_with(j);
        if items.len() < size {
            return Err(Error::InsufficientSamples {
                concept: j,
                available: items.len(),
                required: size,
            });
        }
        for (k, pick) in sample(&mut rng, items.len(), size).into_iter().enumerate() {
            let col = x.column(items[pick]);
            let n = col.norm();
            if n < ZERO_NORM {
                return Err(Error::ZeroVector {
                    what: "sampled item",
                    index: items[pick],
                    threshold: ZERO_NORM,
                });
            }
            atoms.set_column(offset + k, &(col / n));
        }
        offset += size;
    }
    Ok(InitOutput {
        dictionary: GroupDictionary::from_parts(atoms, group_sizes.to_vec()),
        rank_deficient: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn labels_all(n: usize, s: usize) -> ConceptLabelMatrix {
        let names = (0..s).map(|j| format!("c{j}")).collect();
        ConceptLabelMatrix::new(names, &vec![vec![1; s]; n]).unwrap()
    }

    #[test]
    fn rank_one_data_gives_positive_atom() {
        let u = DVector::from_vec(vec![0.0, 0.6, 0.8]);
        let data = DMatrix::from_columns(&[u.clone(), u.clone(), u.clone()]);
        let x = EmbeddingMatrix::from_raw(data).unwrap();
        let out = svd_init(&x, &labels_all(3, 1), &[1]).unwrap();
        assert!((out.dictionary.atom(0) - &u).amax() < 1e-12);

        let neg = EmbeddingMatrix::from_raw(DMatrix::from_columns(&[-&u, -&u, -&u])).unwrap();
        let out = svd_init(&neg, &labels_all(3, 1), &[1]).unwrap();
        assert!((out.dictionary.atom(0) + &u).amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_group_is_filled_and_flagged() {
        let u = DVector::from_vec(vec![0.0, 0.6, 0.8]);
        let x = EmbeddingMatrix::from_raw(DMatrix::from_columns(&[u.clone(), u.clone(), u.clone()]))
            .unwrap();
        let out = svd_init(&x, &labels_all(3, 1), &[2]).unwrap();
        assert_eq!(out.rank_deficient, vec![0]);
        assert!((out.dictionary.atom(1).norm() - 1.0).abs() < 1e-12);
        assert!(out.dictionary.atom(1).dot(&u) > 0.99);
    }

    #[test]
    fn span_matches_dense_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let data = DMatrix::from_fn(16, 40, |_, _| rng.random_range(-1.0..1.0));
        let x = EmbeddingMatrix::from_raw(data.clone()).unwrap();
        let out = svd_init(&x, &labels_all(40, 1), &[3]).unwrap();
        // projector onto the oracle top-3 left singular subspace
        let svd = SVD::new(data, true, false);
        let u3 = svd.u.unwrap().columns(0, 3).into_owned();
        let b = out.dictionary.atoms();
        // cosines of principal angles are the singular values of U3^T B
        let cosines = SVD::new(u3.tr_mul(b), false, false).singular_values;
        for c in cosines.iter() {
            assert!((1.0 - c).abs() < 1e-8, "principal angle cosine {c}");
        }
    }

    #[test]
    fn insufficient_samples() {
        let x = EmbeddingMatrix::from_raw(DMatrix::identity(4, 2)).unwrap();
        assert!(matches!(
            svd_init(&x, &labels_all(2, 1), &[3]),
            Err(Error::InsufficientSamples { concept: 0, available: 2, required: 3 })
        ));
    }

    #[test]
    fn zero_data_is_rank_deficient() {
        let x = EmbeddingMatrix::from_raw(DMatrix::zeros(4, 3)).unwrap();
        assert!(matches!(
            svd_init(&x, &labels_all(3, 1), &[1]),
            Err(Error::RankDeficient { concept: 0 })
        ));
    }

    #[test]
    fn random_sample_init_uses_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = DMatrix::from_fn(5, 10, |_, _| rng.random_range(-1.0..1.0));
        let x = EmbeddingMatrix::from_raw(data).unwrap();
        let a = random_sample_init(&x, &labels_all(10, 2), &[2, 3], 9).unwrap();
        let b = random_sample_init(&x, &labels_all(10, 2), &[2, 3], 9).unwrap();
        assert_eq!(a, b);
        for m in 0..5 {
            assert!((a.dictionary.atom(m).norm() - 1.0).abs() < 1e-12);
        }
    }
}
