use std::path::Path;

use anyhow::{bail, Context, Result};
use lupi_core::data::{export_directory, generate_synthetic, ingest_directory};
use lupi_core::eval::{distance_histograms, median_heuristic, mmd as mmd_estimate, ShotMode};
use lupi_core::imaging::{random_channel_mix, to_grayscale};
use lupi_core::model::extract_features;
use lupi_core::persist::write_atomic;
use lupi_core::rng::{stream, Purpose};
use lupi_core::trainer::{self, embed_dataset, evaluate_model, run_ablation, Holdout};
use lupi_core::{Checkpoint, Dataset, Modality, RunConfig, Split};
use serde_json::json;

use crate::{Shot, SplitArg};

/// Points per set used for the median-heuristic bandwidth.
const HEURISTIC_POINTS: usize = 200;

fn resolve(config: Option<&Path>) -> Result<RunConfig> {
    let cfg = match config {
        Some(path) => RunConfig::load(path).with_context(|| format!("config {}", path.display()))?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn echo(command: &str, cfg: &RunConfig) {
    log::info!("{command}: resolved config\n{}", cfg.canonical().trim_end());
}

fn load_split(data: &Path, split: Split) -> Result<Dataset> {
    let dir = data.join(match split {
        Split::Train => "train",
        Split::Test => "test",
    });
    ingest_directory(&dir, split).with_context(|| format!("dataset {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

pub fn generate(config: Option<&Path>, out_dir: &Path) -> Result<()> {
    let cfg = resolve(config)?;
    echo("generate", &cfg);
    if out_dir.exists() {
        bail!("output directory {} already exists", out_dir.display());
    }
    let data = generate_synthetic(&cfg.synth)?;
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    // Build the whole tree beside the target, then move it into place.
    let staging = tempfile::Builder::new().prefix(".lupi-gen").tempdir_in(parent)?;
    export_directory(&data.train, &staging.path().join("train"))?;
    export_directory(&data.test, &staging.path().join("test"))?;
    write_atomic(&staging.path().join("config.txt"), cfg.canonical().as_bytes())?;
    std::fs::rename(staging.keep(), out_dir).with_context(|| format!("moving into {}", out_dir.display()))?;
    log::info!(
        "wrote {} train and {} test samples to {}",
        data.train.len(),
        data.test.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn train(config: Option<&Path>, data: &Path, out: &Path, log_path: Option<&Path>) -> Result<()> {
    let cfg = resolve(config)?;
    echo("train", &cfg);
    let train_ds = load_split(data, Split::Train)?;
    let test_ds = if data.join("test").exists() {
        Some(load_split(data, Split::Test)?)
    } else {
        None
    };
    let holdout = test_ds.as_ref().map(|dataset| Holdout {
        dataset,
        protocol: cfg.eval,
    });
    let (params, log) = trainer::train_monitored(&train_ds, &cfg.train, holdout.as_ref())?;
    Checkpoint {
        config_echo: cfg.canonical(),
        params,
    }
    .save(out)?;
    if let Some(path) = log_path {
        write_atomic(path, log.to_json_lines()?.as_bytes())?;
    }
    log::info!(
        "trained {} iterations in {:.1}s; checkpoint {}",
        log.iterations.len(),
        log.wall_clock_seconds,
        out.display()
    );
    Ok(())
}

pub struct EvalOverrides {
    pub query_mod: Option<Modality>,
    pub gallery_mod: Option<Modality>,
    pub shot: Option<Shot>,
    pub trials: Option<usize>,
    pub exclude_same_camera: bool,
}

pub fn eval(checkpoint: &Path, data: &Path, config: Option<&Path>, o: &EvalOverrides) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = match config {
        Some(_) => resolve(config)?,
        None if ckpt.config_echo.is_empty() => RunConfig::default(),
        None => RunConfig::parse(&ckpt.config_echo).context("config stored in checkpoint")?,
    };
    let p = &mut cfg.eval;
    p.query_modality = o.query_mod.unwrap_or(p.query_modality);
    p.gallery_modality = o.gallery_mod.unwrap_or(p.gallery_modality);
    if let Some(shot) = o.shot {
        p.shot_mode = match shot {
            Shot::Single => ShotMode::Single,
            Shot::Multi => ShotMode::Multi,
        };
    }
    p.num_trials = o.trials.unwrap_or(p.num_trials);
    p.exclude_same_camera |= o.exclude_same_camera;
    echo("eval", &cfg);
    let test = load_split(data, Split::Test)?;
    let report = evaluate_model(&ckpt.params, &test, &cfg.eval)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn ablate(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = resolve(config)?;
    echo("ablate", &cfg);
    let train_ds = load_split(data, Split::Train)?;
    let test_ds = load_split(data, Split::Test)?;
    let table = run_ablation(&train_ds, &test_ds, &cfg.train, &cfg.eval)?;
    write_atomic(out, table.to_csv().as_bytes())?;
    Ok(())
}

/// Images of one modality; intermediate images are mixed from the visible ones.
fn stream_vectors(ds: &Dataset, m: Modality, ckpt: Option<&Checkpoint>, seed: u64) -> Result<Vec<Vec<f64>>> {
    let source = if m == Modality::Intermediate { Modality::Visible } else { m };
    let mut images: Vec<_> = ds.of_modality(source).map(|s| s.image.clone()).collect();
    if m == Modality::Intermediate {
        let mut rng = stream(seed, Purpose::Mix, 0, 0);
        images = images
            .iter()
            .map(|img| random_channel_mix(img, &mut rng).map(|(z, _)| z))
            .collect::<lupi_core::Result<_>>()?;
    }
    match ckpt {
        Some(c) => Ok(extract_features(&c.params, &images, m)?),
        // Visible pixels enter as their channel mean so every modality has one channel.
        None => images
            .iter()
            .map(|img| {
                let flat = if img.channels() == 3 { to_grayscale(img)? } else { img.clone() };
                Ok(flat.pixels().to_vec())
            })
            .collect(),
    }
}

pub fn mmd(
    data: &Path,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    (a, b): (Modality, Modality),
    bandwidths: &[f64],
    split: SplitArg,
) -> Result<()> {
    let cfg = resolve(config)?;
    echo("mmd", &cfg);
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let ds = load_split(data, split)?;
    let ckpt = checkpoint.map(load_checkpoint).transpose()?;
    let seed = cfg.eval.rng_seed;
    let x = stream_vectors(&ds, a, ckpt.as_ref(), seed)?;
    let y = stream_vectors(&ds, b, ckpt.as_ref(), seed)?;
    let bandwidths = if bandwidths.is_empty() {
        vec![median_heuristic(&x, &y, HEURISTIC_POINTS)?]
    } else {
        bandwidths.to_vec()
    };
    let estimate = mmd_estimate(&x, &y, &bandwidths)?;
    let out = json!({
        "between": format!("{a},{b}"),
        "source": if ckpt.is_some() { "features" } else { "pixels" },
        "bandwidths": bandwidths,
        "mmd": estimate.distance,
        "mmd_squared": estimate.squared,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub fn hist(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    log::info!("hist: checkpoint config\n{}", ckpt.config_echo.trim_end());
    let test = load_split(data, Split::Test)?;
    let mut records = embed_dataset(&ckpt.params, &test, Modality::Visible)?;
    records.extend(embed_dataset(&ckpt.params, &test, Modality::Infrared)?);
    let h = distance_histograms(&records)?;
    log::info!(
        "mean cosine distance: positive {:.4}, negative {:.4}",
        h.positive_mean,
        h.negative_mean
    );
    write_atomic(out, h.to_csv().as_bytes())?;
    Ok(())
}
