//! Shared fixtures for the criterion benchmarks.

use slics::synthetic::{generate, PlantedConfig, PlantedDataset};

/// Planted data at the default benchmark size: 5 concepts of 4 atoms in
/// dimension 64, with light noise.
pub fn planted(items: usize) -> PlantedDataset {
    generate(&PlantedConfig {
        items,
        noise: 0.01,
        seed: 7,
        ..Default::default()
    })
    .expect("valid planted configuration")
}

/// Support of atom `m`: items with a non-zero planted coefficient.
pub fn support(data: &PlantedDataset, m: usize) -> Vec<usize> {
    let a = data.coefficients.data();
    (0..a.ncols()).filter(|&i| a[(m, i)] > 0.0).collect()
}
