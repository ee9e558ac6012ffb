//! Dataset manifests: where a dataset's files live, how embeddings are
//! preprocessed and how items split into train/validation/query/pool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::{file_sha256, read_matrix};
use crate::io::labels::{read_labels, read_names, read_sub_labels, read_word_list};
use crate::io::read_file;
use crate::pq::Codebook;
use crate::pseudo_label::ConceptPrototypes;
use crate::retrieval::SubLabels;
use crate::text::Vocabulary;
use crate::types::{
    normalize_clip_style, normalize_tokenwise, ConceptLabelMatrix, EmbeddingMatrix, Tolerances,
    TokenBatch,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// Use the stored embeddings as they are.
    #[default]
    None,
    /// Unit-normalize each embedding.
    Unit,
    /// Unit-normalize, subtract the manifest's `mean`, re-normalize.
    Clip,
    /// Unit-normalize each of `tokens` equal-width tokens.
    Tokenwise,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub query: Vec<usize>,
    pub pool: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    /// Name of the embedding model, carried into metric tables.
    #[serde(default)]
    pub embedding: String,
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub sub_labels: Option<PathBuf>,
    #[serde(default)]
    pub prototypes: Option<PathBuf>,
    #[serde(default)]
    pub prototype_names: Option<PathBuf>,
    #[serde(default)]
    pub vocabulary: Option<PathBuf>,
    #[serde(default)]
    pub vocabulary_words: Option<PathBuf>,
    #[serde(default)]
    pub vocabulary_mean: Option<PathBuf>,
    #[serde(default)]
    pub codebook: Option<PathBuf>,
    #[serde(default)]
    pub preprocess: Preprocess,
    /// Centering vector (`d x 1` container) for [`Preprocess::Clip`].
    #[serde(default)]
    pub mean: Option<PathBuf>,
    #[serde(default)]
    pub tokens: Option<usize>,
    #[serde(default)]
    pub splits: Splits,
    /// SHA-256 per referenced path (as written in the manifest).
    #[serde(default)]
    pub hashes: BTreeMap<String, String>,
    /// Directory the relative paths are resolved against; not serialized.
    #[serde(skip)]
    pub base: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut m: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn referenced(&self) -> Vec<&PathBuf> {
        let mut v = vec![&self.embeddings, &self.labels];
        for p in [
            &self.sub_labels,
            &self.prototypes,
            &self.prototype_names,
            &self.vocabulary,
            &self.vocabulary_words,
            &self.vocabulary_mean,
            &self.codebook,
            &self.mean,
        ]
        .into_iter()
        .flatten()
        {
            v.push(p);
        }
        v
    }

    /// Checks that referenced files exist and match their recorded hashes.
    pub fn verify_files(&self) -> Result<()> {
        for p in self.referenced() {
            let full = self.resolve(p);
            if !full.exists() {
                return Err(Error::io(
                    &full,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file not found"),
                ));
            }
            if let Some(expected) = self.hashes.get(&p.to_string_lossy().into_owned()) {
                let found = file_sha256(&full)?;
                if &found != expected {
                    return Err(Error::HashMismatch {
                        path: full,
                        expected: expected.clone(),
                        found,
                    });
                }
            }
        }
        Ok(())
    }

    /// Checks split indices against `n_items` and pairwise disjointness.
    pub fn verify_splits(&self, n_items: usize) -> Result<()> {
        let s = &self.splits;
        let named = [
            ("train", &s.train),
            ("validation", &s.validation),
            ("query", &s.query),
            ("pool", &s.pool),
        ];
        let mut owner: Vec<Option<&str>> = vec![None; n_items];
        for (name, idx) in named {
            for &i in idx {
                if i >= n_items {
                    return Err(Error::Invalid(format!("{name} split index {i} >= {n_items} items")));
                }
                if let Some(other) = owner[i] {
                    return Err(Error::Invalid(format!(
                        "item {i} appears in both the {other} and {name} splits"
                    )));
                }
                owner[i] = Some(name);
            }
        }
        Ok(())
    }
}

/// A loaded dataset: raw and preprocessed embeddings with labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Embeddings as stored (used for zero-shot labelling).
    pub raw: EmbeddingMatrix,
    /// Embeddings after the manifest's preprocessing.
    pub embeddings: EmbeddingMatrix,
    pub labels: ConceptLabelMatrix,
    pub sub_labels: Option<SubLabels>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        Self::from_manifest(manifest)
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        manifest.verify_files()?;
        let emb_path = manifest.resolve(&manifest.embeddings);
        let (data, _) = read_matrix(&emb_path)?;
        let raw = EmbeddingMatrix::from_raw(data).map_err(|e| Error::format(&emb_path, e.to_string()))?;
        let embeddings = match manifest.preprocess {
            Preprocess::None => raw.clone(),
            Preprocess::Unit => raw.unit_normalize()?,
            Preprocess::Clip => {
                let Some(mean) = &manifest.mean else {
                    return Err(Error::Invalid("clip preprocessing needs a mean file".into()));
                };
                let mean_path = manifest.resolve(mean);
                let (m, _) = read_matrix(&mean_path)?;
                if m.ncols() != 1 {
                    return Err(Error::format(&mean_path, "mean must be a single column"));
                }
                normalize_clip_style(&raw, &DVector::from_column_slice(m.as_slice()))?
            }
            Preprocess::Tokenwise => {
                let Some(tokens) = manifest.tokens else {
                    return Err(Error::Invalid("tokenwise preprocessing needs a token count".into()));
                };
                if tokens == 0 || raw.dim() % tokens != 0 {
                    return Err(Error::Invalid(format!(
                        "dimension {} is not a multiple of {tokens} tokens",
                        raw.dim()
                    )));
                }
                let batch = TokenBatch::new(raw.data().clone(), tokens, raw.dim() / tokens)?;
                normalize_tokenwise(&batch)?
            }
        };
        let label_path = manifest.resolve(&manifest.labels);
        let labels = read_labels(&label_path)?;
        if labels.n_items() != raw.len() {
            return Err(Error::format(
                &label_path,
                format!("{} label rows for {} embeddings", labels.n_items(), raw.len()),
            ));
        }
        let sub_labels = manifest
            .sub_labels
            .as_ref()
            .map(|p| read_sub_labels(&manifest.resolve(p), raw.len(), labels.names()))
            .transpose()?;
        manifest.verify_splits(raw.len())?;
        Ok(Self {
            manifest,
            raw,
            embeddings,
            labels,
            sub_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Training indices; all items when the manifest defines no splits.
    pub fn train_indices(&self) -> Vec<usize> {
        let s = &self.manifest.splits;
        if s.train.is_empty() && s.validation.is_empty() && s.query.is_empty() && s.pool.is_empty() {
            (0..self.len()).collect()
        } else {
            s.train.clone()
        }
    }

    /// Preprocessed embeddings, labels and sub-labels of a subset.
    pub fn subset(&self, idx: &[usize]) -> (EmbeddingMatrix, ConceptLabelMatrix, Option<SubLabels>) {
        (
            self.embeddings.select(idx),
            self.labels.select(idx),
            self.sub_labels.as_ref().map(|s| s.select(idx)),
        )
    }

    pub fn prototypes(&self) -> Result<ConceptPrototypes> {
        let m = &self.manifest;
        let (Some(p), Some(n)) = (&m.prototypes, &m.prototype_names) else {
            return Err(Error::Invalid("manifest lists no prototypes".into()));
        };
        let path = m.resolve(p);
        let (vectors, _) = read_matrix(&path)?;
        let names = read_names(&m.resolve(n))?;
        ConceptPrototypes::from_raw(vectors, names).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let m = &self.manifest;
        let (Some(v), Some(w)) = (&m.vocabulary, &m.vocabulary_words) else {
            return Err(Error::Invalid("manifest lists no vocabulary".into()));
        };
        let path = m.resolve(v);
        let (raw, _) = read_matrix(&path)?;
        let words = read_word_list(&m.resolve(w))?;
        let mean = m
            .vocabulary_mean
            .as_ref()
            .map(|p| read_matrix(&m.resolve(p)).map(|(x, _)| DVector::from_column_slice(x.as_slice())))
            .transpose()?;
        Vocabulary::preprocess(words, raw, mean.as_ref()).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn codebook(&self) -> Result<(Codebook, PathBuf)> {
        let Some(p) = &self.manifest.codebook else {
            return Err(Error::Invalid("manifest lists no codebook".into()));
        };
        let path = self.manifest.resolve(p);
        let (cw, _) = read_matrix(&path)?;
        let cb = Codebook::new(cw, &Tolerances::default()).map_err(|e| Error::format(&path, e.to_string()))?;
        Ok((cb, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_labels, write_matrix, Dtype};
    use nalgebra::DMatrix;

    fn fixture(dir: &Path, extra: &str) -> PathBuf {
        let x = DMatrix::from_fn(3, 4, |r, c| (r + c + 1) as f64);
        write_matrix(&dir.join("x.slcs"), &x, Dtype::F64).unwrap();
        let l = ConceptLabelMatrix::new(vec!["a".into(), "b".into()], &[vec![1, 0], vec![0, 1], vec![1, 1], vec![1, 0]])
            .unwrap();
        write_labels(&dir.join("labels.csv"), &l).unwrap();
        let sha = file_sha256(&dir.join("x.slcs")).unwrap();
        let m = format!(
            r#"{{"name":"toy","embeddings":"x.slcs","labels":"labels.csv","preprocess":"unit",
               "hashes":{{"x.slcs":"{sha}"}}{extra}}}"#
        );
        let p = dir.join("manifest.json");
        std::fs::write(&p, m).unwrap();
        p
    }

    #[test]
    fn loads_relative_paths_and_preprocesses() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), r#","splits":{"train":[0,1],"query":[2],"pool":[3]}"#);
        let d = Dataset::load(&p).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d.embeddings.state_holds(1e-12));
        assert_eq!(d.train_indices(), vec![0, 1]);
        let (x, l, _) = d.subset(&[2]);
        assert_eq!(x.len(), 1);
        assert_eq!(l.row(0), &[1, 1]);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), r#","splits":{"query":[1],"pool":[1,2]}"#);
        assert!(matches!(Dataset::load(&p), Err(Error::Invalid(_))));
    }

    #[test]
    fn missing_label_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), "");
        std::fs::remove_file(dir.path().join("labels.csv")).unwrap();
        let err = Dataset::load(&p).unwrap_err();
        assert!(err.is_input_error());
        assert!(err.to_string().contains("labels.csv"), "{err}");
    }

    #[test]
    fn hash_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), "");
        write_matrix(&dir.path().join("x.slcs"), &DMatrix::from_element(3, 4, 2.0), Dtype::F64).unwrap();
        assert!(matches!(Dataset::load(&p), Err(Error::HashMismatch { .. })));
    }
}
