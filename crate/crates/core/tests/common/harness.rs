//! Small-scale training experiments comparing intermediate modes and loss
//! toggles on the synthetic color-trap data.

use lupi_core::data::{generate_synthetic, SynthConfig};
use lupi_core::eval::{EvalProtocol, ShotMode};
use lupi_core::losses::LossConfig;
use lupi_core::trainer::{evaluate_model, train, IntermediateMode, TrainConfig};
use lupi_core::Modality;

pub const SEEDS: u64 = 5;

pub fn synth(seed: u64) -> SynthConfig {
    SynthConfig {
        height: 24,
        width: 12,
        rng_seed: seed,
        ..SynthConfig::default()
    }
}

pub fn train_config(seed: u64, mode: IntermediateMode, triplet: bool, color_free: bool) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        iterations_per_epoch: 40,
        intermediate_mode: mode,
        loss: LossConfig {
            triplet,
            color_free,
            ..LossConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

pub fn protocol() -> EvalProtocol {
    EvalProtocol {
        query_modality: Modality::Infrared,
        gallery_modality: Modality::Visible,
        shot_mode: ShotMode::Single,
        exclude_same_camera: false,
        num_trials: 10,
        rng_seed: 0,
    }
}

/// Cross-modal single-shot rank-1 on the test split for one seed.
pub fn rank1(seed: u64, mode: IntermediateMode, triplet: bool, color_free: bool) -> f64 {
    let data = generate_synthetic(&synth(seed)).unwrap();
    let (params, _) = train(&data.train, &train_config(seed, mode, triplet, color_free)).unwrap();
    evaluate_model(&params, &data.test, &protocol()).unwrap().rank(1)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
