#![allow(dead_code)]

pub mod gradcheck;
pub mod harness;
pub mod oracle;

use lupi_core::eval::EmbeddingRecord;
use lupi_core::rng::{stream, Purpose};
use lupi_core::Modality;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream(seed, Purpose::Probe, 0, 0)
}

pub fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut f: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    f.iter_mut().for_each(|v| *v /= n);
    f
}

pub fn record(feature: Vec<f64>, identity: u32, camera: u32, modality: Modality) -> EmbeddingRecord {
    EmbeddingRecord {
        feature,
        identity,
        camera,
        modality,
    }
}
