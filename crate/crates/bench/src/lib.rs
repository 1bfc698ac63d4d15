//! Fixtures shared by the kernel benchmarks.

use lupi_core::data::{generate_synthetic, SynthConfig, SynthDataset};
use lupi_core::eval::EmbeddingRecord;
use lupi_core::rng::{stream, Purpose};
use lupi_core::Modality;
use rand::Rng;

/// A small synthetic dataset at the default image size.
pub fn dataset(identities: usize) -> SynthDataset {
    generate_synthetic(&SynthConfig {
        num_identities: identities,
        num_test_identities: identities,
        images_per_identity_per_modality: 4,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config")
}

/// Random unit vectors labeled round-robin over `identities`.
pub fn records(n: usize, dim: usize, identities: u32, modality: Modality, seed: u64) -> Vec<EmbeddingRecord> {
    let mut rng = stream(seed, Purpose::Probe, 0, 0);
    (0..n)
        .map(|i| {
            let mut f: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            f.iter_mut().for_each(|v| *v /= norm);
            EmbeddingRecord {
                feature: f,
                identity: i as u32 % identities,
                camera: (i % 2) as u32,
                modality,
            }
        })
        .collect()
}
