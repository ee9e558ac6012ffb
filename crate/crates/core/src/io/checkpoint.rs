//! Dictionary/coefficient checkpoints.
//!
//! A checkpoint directory holds `checkpoint.json` plus the matrices it
//! names. Matrix files carry a content hash in their name and the JSON is
//! replaced last, so an interrupted write leaves the previous checkpoint
//! intact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::{decode_matrix, encode_matrix, sha256_hex, Dtype};
use crate::io::{atomic_write, read_file};
use crate::types::{CoefficientMatrix, GroupDictionary, Tolerances};

const META_FILE: &str = "checkpoint.json";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub group_sizes: Vec<usize>,
    pub config_hash: String,
    pub seed: u64,
    pub dictionary: String,
    pub dictionary_sha256: String,
    pub coefficients: Option<String>,
    pub coefficients_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dictionary: GroupDictionary,
    pub coefficients: Option<CoefficientMatrix>,
    pub meta: CheckpointMeta,
}

fn stage(dir: &Path, stem: &str, bytes: &[u8]) -> Result<(String, String)> {
    let sha = sha256_hex(bytes);
    let name = format!("{stem}-{}.slcs", &sha[..16]);
    atomic_write(&dir.join(&name), bytes)?;
    Ok((name, sha))
}

/// Writes a checkpoint into `dir` (created if needed) and removes matrix
/// files of earlier checkpoints.
pub fn write_checkpoint(
    dir: &Path,
    dictionary: &GroupDictionary,
    coefficients: Option<&CoefficientMatrix>,
    config_hash: &str,
    seed: u64,
) -> Result<CheckpointMeta> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (dict_name, dict_sha) = stage(dir, "dictionary", &encode_matrix(dictionary.atoms(), Dtype::F64)?)?;
    let coef = coefficients
        .map(|c| stage(dir, "coefficients", &encode_matrix(c.data(), Dtype::F64)?))
        .transpose()?;
    let meta = CheckpointMeta {
        format: FORMAT,
        group_sizes: dictionary.group_sizes().to_vec(),
        config_hash: config_hash.to_string(),
        seed,
        dictionary: dict_name,
        dictionary_sha256: dict_sha,
        coefficients: coef.as_ref().map(|c| c.0.clone()),
        coefficients_sha256: coef.map(|c| c.1),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    atomic_write(&dir.join(META_FILE), &json)?;

    let keep = [Some(meta.dictionary.as_str()), meta.coefficients.as_deref()];
    if let Ok(entries) = std::fs::read_dir(dir) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let ours = (name.starts_with("dictionary-") || name.starts_with("coefficients-"))
                && name.ends_with(".slcs");
            if ours && !keep.contains(&Some(name.as_str())) {
                let _ = std::fs::remove_file(entry.path());
            }
        }
    }
    Ok(meta)
}

fn load_verified(dir: &Path, name: &str, sha: &str) -> Result<(PathBuf, nalgebra::DMatrix<f64>)> {
    let path = dir.join(name);
    let bytes = read_file(&path)?;
    let found = sha256_hex(&bytes);
    if found != sha {
        return Err(Error::HashMismatch {
            path,
            expected: sha.to_string(),
            found,
        });
    }
    let (m, _) = decode_matrix(&bytes, &path)?;
    Ok((path, m))
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join(META_FILE);
    let meta: CheckpointMeta = serde_json::from_slice(&read_file(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.format != FORMAT {
        return Err(Error::format(&meta_path, format!("unsupported format {}", meta.format)));
    }
    let (path, atoms) = load_verified(dir, &meta.dictionary, &meta.dictionary_sha256)?;
    let dictionary = GroupDictionary::new(atoms, meta.group_sizes.clone(), &Tolerances::default())
        .map_err(|e| Error::format(&path, e.to_string()))?;
    let coefficients = match (&meta.coefficients, &meta.coefficients_sha256) {
        (Some(name), Some(sha)) => {
            let (path, data) = load_verified(dir, name, sha)?;
            Some(
                CoefficientMatrix::new(data, meta.group_sizes.clone())
                    .map_err(|e| Error::format(&path, e.to_string()))?,
            )
        }
        _ => None,
    };
    Ok(Checkpoint {
        dictionary,
        coefficients,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::{train, TrainConfig};
    use crate::synthetic::{generate, PlantedConfig};

    fn trained() -> crate::learn::TrainOutput {
        let data = generate(&PlantedConfig {
            concepts: 2,
            dim: 6,
            atoms_per_concept: 2,
            items: 40,
            max_active: 2,
            ..Default::default()
        })
        .unwrap();
        let mut cfg = TrainConfig::uniform(2, 2);
        cfg.iterations = 2;
        train(&data.embeddings, &data.labels, &cfg).unwrap()
    }

    #[test]
    fn round_trip_and_cleanup() {
        let dir = tempfile::tempdir().unwrap();
        let out = trained();
        write_checkpoint(dir.path(), &out.dictionary, Some(&out.coefficients), "abc", 7).unwrap();
        let ck = read_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.dictionary, out.dictionary);
        assert_eq!(ck.coefficients.as_ref(), Some(&out.coefficients));
        assert_eq!(ck.meta.config_hash, "abc");
        assert_eq!(ck.meta.seed, 7);

        // a second checkpoint replaces the first
        write_checkpoint(dir.path(), &out.dictionary, None, "def", 7).unwrap();
        let ck = read_checkpoint(dir.path()).unwrap();
        assert!(ck.coefficients.is_none());
        let files = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 2);
    }

    #[test]
    fn identical_inputs_give_identical_bytes() {
        let out = trained();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_checkpoint(a.path(), &out.dictionary, Some(&out.coefficients), "h", 1).unwrap();
        write_checkpoint(b.path(), &out.dictionary, Some(&out.coefficients), "h", 1).unwrap();
        for entry in std::fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
        }
    }

    #[test]
    fn tampered_matrix_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let out = trained();
        let meta = write_checkpoint(dir.path(), &out.dictionary, None, "h", 0).unwrap();
        let p = dir.path().join(&meta.dictionary);
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_checkpoint(dir.path()), Err(Error::HashMismatch { .. })));
    }
}
