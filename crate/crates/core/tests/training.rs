mod common;

use lupi_core::data::{generate_synthetic, SynthConfig};
use lupi_core::eval::EvalProtocol;
use lupi_core::trainer::{evaluate_model, run_ablation, train, train_monitored, Holdout, IntermediateMode, TrainConfig};
use lupi_core::{Checkpoint, Error, LossConfig, ModelParams};

fn small_synth() -> SynthConfig {
    SynthConfig {
        num_identities: 6,
        num_test_identities: 6,
        images_per_identity_per_modality: 4,
        height: 16,
        width: 8,
        ..SynthConfig::default()
    }
}

fn short(mode: IntermediateMode) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        iterations_per_epoch: 6,
        warmup_epochs: 1,
        intermediate_mode: mode,
        dim: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let data = generate_synthetic(&small_synth()).unwrap();
    let cfg = short(IntermediateMode::RandMixAug);
    let (a, la) = train(&data.train, &cfg).unwrap();
    let (b, lb) = train(&data.train, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(la.iterations, lb.iterations);
    let (c, _) = train(&data.train, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn first_epoch_loss_decreases() {
    let data = generate_synthetic(&SynthConfig {
        height: 24,
        width: 12,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        iterations_per_epoch: 40,
        warmup_epochs: 0,
        ..TrainConfig::default()
    };
    let (_, log) = train(&data.train, &cfg).unwrap();
    let first = log.iterations[0].loss.total;
    let tail: Vec<f64> = log.iterations[30..].iter().map(|r| r.loss.total).collect();
    let moving = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(moving < first, "{first} -> {moving}");
    assert_eq!(log.epochs.len(), 1);
}

#[test]
fn breakdown_sums_to_total_every_iteration() {
    let data = generate_synthetic(&small_synth()).unwrap();
    for mode in IntermediateMode::ALL {
        let (_, log) = train(&data.train, &short(mode)).unwrap();
        assert!(log.iterations.iter().all(|r| (r.loss.sum_of_terms() - r.loss.total).abs() <= 1e-10));
        if mode == IntermediateMode::None {
            assert_eq!(log.mix_calls, 0);
            assert!(log.iterations.iter().all(|r| r.loss.color_free == 0.0));
        }
    }
}

#[test]
fn zero_weight_toggles_leave_training_unchanged() {
    let data = generate_synthetic(&small_synth()).unwrap();
    let on = short(IntermediateMode::RandMix);
    let off = TrainConfig {
        loss: LossConfig {
            color_free: false,
            ..on.loss
        },
        ..on
    };
    let zero = TrainConfig {
        loss: LossConfig { lambda: 0.0, ..on.loss },
        ..on
    };
    assert_eq!(train(&data.train, &off).unwrap().0, train(&data.train, &zero).unwrap().0);
}

#[test]
fn divergence_is_reported_with_iteration() {
    let data = generate_synthetic(&small_synth()).unwrap();
    let cfg = TrainConfig {
        lr: 1e200,
        warmup_epochs: 0,
        ..short(IntermediateMode::RandMix)
    };
    match train(&data.train, &cfg) {
        Err(Error::Diverged { iteration }) => assert!(iteration < 12),
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn holdout_snapshots_every_epoch() {
    let data = generate_synthetic(&small_synth()).unwrap();
    let holdout = Holdout {
        dataset: &data.test,
        protocol: EvalProtocol::default(),
    };
    let (_, log) = train_monitored(&data.train, &short(IntermediateMode::RandMix), Some(&holdout)).unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert!(log.epochs.iter().all(|e| e.rank1.is_some() && e.map.is_some()));
    let lines = log.to_json_lines().unwrap();
    for line in lines.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn checkpoint_reload_keeps_metrics_within_tolerance() {
    let data = generate_synthetic(&small_synth()).unwrap();
    let (params, _) = train(&data.train, &short(IntermediateMode::RandMix)).unwrap();
    let ckpt = Checkpoint {
        config_echo: "canonical\n".into(),
        params: params.clone(),
    };
    let reloaded: ModelParams = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap().params;
    let p = EvalProtocol::default();
    let (a, b) = (evaluate_model(&params, &data.test, &p).unwrap(), evaluate_model(&reloaded, &data.test, &p).unwrap());
    assert!((a.map - b.map).abs() <= 1e-4);
    assert!(a.cmc.iter().zip(&b.cmc).all(|(x, y)| (x - y).abs() <= 1e-4));
}

#[test]
fn ablation_grid_has_sixteen_cells() {
    let data = generate_synthetic(&small_synth()).unwrap();
    let base = TrainConfig {
        epochs: 1,
        iterations_per_epoch: 2,
        ..short(IntermediateMode::RandMix)
    };
    let table = run_ablation(&data.train, &data.test, &base, &EvalProtocol::default()).unwrap();
    assert_eq!(table.rows.len(), 16);
    assert!(table.get(IntermediateMode::RandMix, true, true).is_some());
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 17);
    assert!(csv.lines().any(|l| l.starts_with("randmix,1,1,")));
}

/// Paired comparison on the default-size synthetic data: random channel
/// mixing beats the two-stream baseline for every one of five seeds.
#[test]
fn randmix_beats_baseline_on_default_synthetic_data() {
    let protocol = common::harness::protocol();
    for seed in 0..5 {
        let data = generate_synthetic(&SynthConfig {
            rng_seed: seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let score = |mode| {
            let cfg = TrainConfig {
                intermediate_mode: mode,
                seed,
                ..common::harness::train_config(seed, mode, true, true)
            };
            let (params, _) = train(&data.train, &cfg).unwrap();
            evaluate_model(&params, &data.test, &protocol).unwrap().rank(1)
        };
        let (base, mixed) = (score(IntermediateMode::None), score(IntermediateMode::RandMix));
        println!("seed {seed}: baseline {base:.3}, randmix {mixed:.3}");
        assert!(mixed > base, "seed {seed}: {mixed} <= {base}");
    }
}
