//! Planted group-sparse data for tests, benchmarks and demos.
//!
//! Each concept owns `atoms_per_concept` random unit atoms. Every item
//! activates a random set of concepts and, inside each active concept, a
//! random non-empty subset of its atoms with positive weights. Items are
//! scaled to unit norm before noise is added, so the planted pair
//! `(B*, A*)` reconstructs the clean data exactly.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CoefficientMatrix, ConceptLabelMatrix, EmbeddingMatrix, GroupDictionary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub concepts: usize,
    pub dim: usize,
    pub atoms_per_concept: usize,
    pub items: usize,
    pub min_active: usize,
    pub max_active: usize,
    /// Standard deviation of i.i.d. Gaussian noise per coordinate.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            concepts: 5,
            dim: 64,
            atoms_per_concept: 4,
            items: 2000,
            min_active: 1,
            max_active: 3,
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedDataset {
    /// Noisy embeddings (raw state; clean columns are unit norm).
    pub embeddings: EmbeddingMatrix,
    pub labels: ConceptLabelMatrix,
    pub dictionary: GroupDictionary,
    pub coefficients: CoefficientMatrix,
}

impl PlantedDataset {
    /// Objective of the planted solution on the (noisy) embeddings.
    pub fn planted_objective(&self) -> f64 {
        crate::learn::objective(&self.embeddings, &self.dictionary, &self.coefficients)
    }

    /// Splits items into two datasets sharing the planted dictionary.
    pub fn split(&self, first: &[usize], second: &[usize]) -> (PlantedDataset, PlantedDataset) {
        let part = |idx: &[usize]| PlantedDataset {
            embeddings: self.embeddings.select(idx),
            labels: self.labels.select(idx),
            dictionary: self.dictionary.clone(),
            coefficients: CoefficientMatrix::new(
                self.coefficients.data().select_columns(idx),
                self.coefficients.group_sizes().to_vec(),
            )
            .expect("subset of a valid matrix"),
        };
        (part(first), part(second))
    }
}

pub fn generate(cfg: &PlantedConfig) -> Result<PlantedDataset> {
    let s = cfg.concepts;
    let d0 = cfg.atoms_per_concept;
    if s == 0 || d0 == 0 || cfg.dim == 0 || cfg.items == 0 {
        return Err(Error::Invalid("planted model sizes must be positive".into()));
    }
    if cfg.min_active == 0 || cfg.min_active > cfg.max_active || cfg.max_active > s {
        return Err(Error::Invalid("need 1 <= min_active <= max_active <= concepts".into()));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::Invalid("noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = s * d0;
    let mut atoms = DMatrix::from_fn(cfg.dim, m, |_, _| StandardNormal.sample(&mut rng));
    for mut c in atoms.column_iter_mut() {
        c.normalize_mut();
    }

    let mut coeffs = DMatrix::zeros(m, cfg.items);
    let mut rows = Vec::with_capacity(cfg.items);
    for i in 0..cfg.items {
        let k = rng.random_range(cfg.min_active..=cfg.max_active);
        let mut row = vec![0u8; s];
        for j in sample(&mut rng, s, k) {
            row[j] = 1;
            let used = rng.random_range(1..=d0);
            for a in sample(&mut rng, d0, used) {
                coeffs[(j * d0 + a, i)] = rng.random_range(0.2..1.0);
            }
        }
        rows.push(row);
    }
    let mut clean = &atoms * &coeffs;
    for i in 0..cfg.items {
        let n = clean.column(i).norm();
        clean.column_mut(i).unscale_mut(n);
        coeffs.column_mut(i).unscale_mut(n);
    }
    let noise = DMatrix::from_fn(cfg.dim, cfg.items, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * cfg.noise
    });
    let names = (0..s).map(|j| format!("concept{j}")).collect();
    Ok(PlantedDataset {
        embeddings: EmbeddingMatrix::from_raw(clean + noise)?,
        labels: ConceptLabelMatrix::new(names, &rows)?,
        dictionary: GroupDictionary::from_parts(atoms, vec![d0; s]),
        coefficients: CoefficientMatrix::new(coeffs, vec![d0; s])?,
    })
}

/// Random unit vector of dimension `d`.
pub fn random_unit(rng: &mut impl Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng)).normalize()
}
