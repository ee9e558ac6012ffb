//! Experiment configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::{sha256_hex, Dtype};
use crate::io::read_file;
use crate::learn::{InitMethod, TrainConfig, UpdateMode};
use crate::retrieval::Protocol;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Atoms per concept when `group_sizes` is not given.
    pub d0: usize,
    pub group_sizes: Option<Vec<usize>>,
    pub iterations: usize,
    pub batch_size: usize,
    pub update_mode: UpdateMode,
    pub power_iterations: usize,
    pub monotone_check: bool,
    pub ridge_lambda: f64,
    pub init: InitMethod,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            d0: 8,
            group_sizes: None,
            iterations: t.iterations,
            batch_size: t.batch_size,
            update_mode: t.update_mode,
            power_iterations: t.power_iterations,
            monotone_check: t.monotone_check,
            ridge_lambda: t.ridge_lambda,
            init: t.init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub protocols: Vec<Protocol>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 20,
            protocols: vec![Protocol::General, Protocol::SubLabel],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub d0_min: usize,
    pub d0_max: usize,
    pub d0_step: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            d0_min: 5,
            d0_max: 20,
            d0_step: 1,
        }
    }
}

impl SweepSection {
    pub fn values(&self) -> Vec<usize> {
        (self.d0_min..=self.d0_max).step_by(self.d0_step.max(1)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelSection {
    /// Active concepts per item; required by the pseudo-label command.
    pub s_tilde: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionSection {
    pub top_n: usize,
}

impl Default for CaptionSection {
    fn default() -> Self {
        Self { top_n: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseSection {
    /// Atom budget of the non-negative OMP coder; 0 means unlimited.
    pub max_atoms: usize,
    pub residual_tol: f64,
}

impl Default for SparseSection {
    fn default() -> Self {
        Self {
            max_atoms: 10,
            residual_tol: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Single source of randomness (mini-batch shuffles, random init).
    pub seed: u64,
    /// Precision of matrices written by the tools.
    pub dtype: Dtype,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub pseudo_label: PseudoLabelSection,
    pub caption: CaptionSection,
    pub sparse: SparseSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, truncated to 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }

    /// Training parameters for `n_groups` concepts, seeded from `seed`.
    pub fn train_config(&self, n_groups: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            group_sizes: t.group_sizes.clone().unwrap_or_else(|| vec![t.d0; n_groups]),
            iterations: t.iterations,
            batch_size: t.batch_size,
            update_mode: t.update_mode,
            power_iterations: t.power_iterations,
            monotone_check: t.monotone_check,
            shuffle_seed: self.seed,
            ridge_lambda: t.ridge_lambda,
            init: t.init,
        }
    }
}
