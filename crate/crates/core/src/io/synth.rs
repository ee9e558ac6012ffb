//! Writes a planted dataset as a complete on-disk dataset: embeddings,
//! labels, sub-labels, prototypes, a vocabulary, a codebook and manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::container::{file_sha256, write_matrix, Dtype};
use crate::io::labels::{write_labels, write_names};
use crate::io::manifest::{DatasetManifest, Preprocess, Splits};
use crate::io::atomic_write;
use crate::synthetic::{generate, random_unit, PlantedConfig, PlantedDataset};

/// Distractor words added to the vocabulary next to one word per atom.
const DISTRACTORS: usize = 32;
/// Codewords in the synthetic token codebook.
const CODEWORDS: usize = 64;

/// Files produced by [`write_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    /// Manifest with unit-normalized embeddings.
    pub manifest: PathBuf,
    /// Same data, tokenwise normalized with a codebook, when requested.
    pub token_manifest: Option<PathBuf>,
    pub dataset: PlantedDataset,
}

/// Generates a planted dataset and writes it under `dir`. Items are split
/// 60/10/10/20 into train/validation/query/pool by a seeded shuffle. The
/// sub-label of an item under an active concept names its largest planted
/// atom. With `tokens`, a tokenwise manifest and codebook are also written.
pub fn write_synthetic(dir: &Path, cfg: &PlantedConfig, tokens: Option<usize>) -> Result<SyntheticFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = generate(cfg)?;
    let n = cfg.items;
    let d0 = cfg.atoms_per_concept;

    write_matrix(&dir.join("embeddings.slcs"), data.embeddings.data(), Dtype::F64)?;
    write_labels(&dir.join("labels.csv"), &data.labels)?;

    let mut sub = String::from("item,parent_concept,sub_label\n");
    let a = data.coefficients.data();
    for i in 0..n {
        for j in data.labels.active(i) {
            let best = (0..d0).max_by(|&p, &q| a[(j * d0 + p, i)].total_cmp(&a[(j * d0 + q, i)]).then(q.cmp(&p)));
            let _ = writeln!(sub, "{i},{},atom{}", data.labels.names()[j], best.unwrap_or(0));
        }
    }
    atomic_write(&dir.join("sub_labels.csv"), sub.as_bytes())?;

    let atoms = data.dictionary.atoms();
    let protos = DMatrix::from_fn(cfg.dim, cfg.concepts, |r, j| {
        (0..d0).map(|p| atoms[(r, j * d0 + p)]).sum::<f64>()
    });
    write_matrix(&dir.join("prototypes.slcs"), &protos, Dtype::F64)?;
    write_names(&dir.join("prototype_names.json"), data.labels.names())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut words = Vec::new();
    let mut vocab = DMatrix::zeros(cfg.dim, atoms.ncols() + DISTRACTORS);
    for m in 0..atoms.ncols() {
        words.push(format!("{}_atom{}", data.labels.names()[m / d0], m % d0));
        vocab.set_column(m, &atoms.column(m));
    }
    for w in 0..DISTRACTORS {
        words.push(format!("distractor{w}"));
        vocab.set_column(atoms.ncols() + w, &random_unit(&mut rng, cfg.dim));
    }
    write_matrix(&dir.join("vocabulary.slcs"), &vocab, Dtype::F64)?;
    atomic_write(&dir.join("vocabulary.txt"), (words.join("\n") + "\n").as_bytes())?;
    write_matrix(&dir.join("vocabulary_mean.slcs"), &DMatrix::zeros(cfg.dim, 1), Dtype::F64)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let cut = |f: usize| n * f / 10;
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let splits = Splits {
        train: sorted(&order[..cut(6)]),
        validation: sorted(&order[cut(6)..cut(7)]),
        query: sorted(&order[cut(7)..cut(8)]),
        pool: sorted(&order[cut(8)..]),
    };

    let files = [
        "embeddings.slcs",
        "labels.csv",
        "sub_labels.csv",
        "prototypes.slcs",
        "prototype_names.json",
        "vocabulary.slcs",
        "vocabulary.txt",
        "vocabulary_mean.slcs",
    ];
    let mut hashes = BTreeMap::new();
    for f in files {
        hashes.insert(f.to_string(), file_sha256(&dir.join(f))?);
    }
    let manifest = DatasetManifest {
        name: "planted".into(),
        embedding: "synthetic".into(),
        embeddings: "embeddings.slcs".into(),
        labels: "labels.csv".into(),
        sub_labels: Some("sub_labels.csv".into()),
        prototypes: Some("prototypes.slcs".into()),
        prototype_names: Some("prototype_names.json".into()),
        vocabulary: Some("vocabulary.slcs".into()),
        vocabulary_words: Some("vocabulary.txt".into()),
        vocabulary_mean: Some("vocabulary_mean.slcs".into()),
        codebook: None,
        preprocess: Preprocess::Unit,
        mean: None,
        tokens: None,
        splits,
        hashes,
        base: dir.to_path_buf(),
    };
    let manifest_path = dir.join("manifest.json");
    write_manifest(&manifest_path, &manifest)?;

    let token_manifest = match tokens {
        None => None,
        Some(t) => {
            if t == 0 || cfg.dim % t != 0 {
                return Err(Error::Invalid(format!("dimension {} is not a multiple of {t} tokens", cfg.dim)));
            }
            let td = cfg.dim / t;
            let mut cb = DMatrix::zeros(td, CODEWORDS);
            for k in 0..CODEWORDS {
                let c: DVector<f64> = random_unit(&mut rng, td);
                cb.set_column(k, &c);
            }
            write_matrix(&dir.join("codebook.slcs"), &cb, Dtype::F64)?;
            let mut m = manifest.clone();
            m.name = "planted-tokens".into();
            m.preprocess = Preprocess::Tokenwise;
            m.tokens = Some(t);
            m.codebook = Some("codebook.slcs".into());
            m.hashes.insert("codebook.slcs".into(), file_sha256(&dir.join("codebook.slcs"))?);
            let p = dir.join("manifest_tokens.json");
            write_manifest(&p, &m)?;
            Some(p)
        }
    };
    Ok(SyntheticFiles {
        manifest: manifest_path,
        token_manifest,
        dataset: data,
    })
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    atomic_write(path, &json)
}
