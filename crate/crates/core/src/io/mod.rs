//! File formats, dataset manifests, experiment configuration and
//! checkpoints.

mod checkpoint;
mod config;
mod container;
mod labels;
mod manifest;
mod synth;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{
    CaptionSection, EvalSection, ExperimentConfig, PseudoLabelSection, SparseSection, SweepSection,
    TrainSection,
};
pub use container::{
    decode_matrix, decode_quantized, encode_matrix, encode_quantized, file_sha256, read_matrix,
    read_matrix_header, read_quantized, sha256_hex, write_matrix, write_quantized, Dtype,
};
pub use labels::{
    read_labels, read_names, read_sub_labels, read_word_list, write_labels, write_names,
};
pub use manifest::{Dataset, DatasetManifest, Preprocess, Splits};
pub use synth::{write_manifest, write_synthetic, SyntheticFiles};

use crate::error::{Error, Result};
use crate::types::Decomposition;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// JSON view of a decomposition: per concept the coefficients and the
/// component norm, plus the residual norm.
pub fn decomposition_json(d: &Decomposition, concept_names: &[String]) -> serde_json::Value {
    let concepts: Vec<serde_json::Value> = d
        .components
        .iter()
        .map(|c| {
            serde_json::json!({
                "concept": concept_names.get(c.concept).cloned().unwrap_or_else(|| c.concept.to_string()),
                "coefficients": c.coefficients.as_slice(),
                "norm": c.vector.norm(),
            })
        })
        .collect();
    serde_json::json!({
        "components": concepts,
        "residual_norm": d.residual.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn decomposition_json_shape() {
        use crate::types::{Component, Decomposition};
        use nalgebra::DVector;
        let d = Decomposition {
            components: vec![Component {
                concept: 0,
                vector: DVector::from_vec(vec![3.0, 4.0]),
                coefficients: DVector::from_vec(vec![5.0]),
            }],
            residual: DVector::zeros(2),
        };
        let v = decomposition_json(&d, &["sky".into()]);
        assert_eq!(v["components"][0]["concept"], "sky");
        assert_eq!(v["components"][0]["norm"], 5.0);
        assert_eq!(v["residual_norm"], 0.0);
    }
}
