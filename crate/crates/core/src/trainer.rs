//! The training loop: PK batches, intermediate-image generation, three-stream
//! forward, combined loss, SGD with warm-up. Also the ablation grid.

use std::fmt::Write as _;
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{pk_sample, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EmbeddingRecord, EvalProtocol, EvalReport};
use crate::imaging::{augment, random_channel_mix, to_grayscale, AugmentPolicy, Image, PadMode};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::modality::Modality;
use crate::model::{embed, extract_features, ModelConfig, ModelParams};
use crate::optim::Sgd;
use crate::rng::{stream, Purpose};

/// How the privileged intermediate stream is produced from visible images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntermediateMode {
    /// No intermediate stream; V–I training only.
    None,
    /// Fixed luminance weights.
    Grayscale,
    /// Random convex channel mix per image.
    #[serde(rename = "randmix")]
    RandMix,
    /// Random channel mix plus spatial augmentation of every stream.
    #[serde(rename = "randmix_aug")]
    RandMixAug,
}

impl IntermediateMode {
    pub const ALL: [IntermediateMode; 4] = [
        IntermediateMode::None,
        IntermediateMode::Grayscale,
        IntermediateMode::RandMix,
        IntermediateMode::RandMixAug,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IntermediateMode::None => "none",
            IntermediateMode::Grayscale => "grayscale",
            IntermediateMode::RandMix => "randmix",
            IntermediateMode::RandMixAug => "randmix_aug",
        }
    }
}

impl std::str::FromStr for IntermediateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IntermediateMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown intermediate mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    /// Identities per batch.
    pub b_s: usize,
    /// Images per identity per modality.
    pub n_p: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub loss: LossConfig,
    pub intermediate_mode: IntermediateMode,
    pub dim: usize,
    pub stem_width: usize,
    pub trunk_width: usize,
    pub pad_fraction: f64,
    pub pad_mode: PadMode,
    pub flip_prob: f64,
    /// Prepare the next batch on a helper thread.
    pub prefetch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            epochs: 20,
            iterations_per_epoch: 50,
            b_s: 4,
            n_p: 2,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 2,
            loss: LossConfig::default(),
            intermediate_mode: IntermediateMode::RandMix,
            dim: model.dim,
            stem_width: model.stem_width,
            trunk_width: model.trunk_width,
            pad_fraction: 0.125,
            pad_mode: PadMode::Mean,
            flip_prob: 0.5,
            prefetch: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let rates_ok = [self.lr, self.momentum, self.weight_decay]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !rates_ok || self.iterations_per_epoch == 0 || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidArgument(format!("train config {self:?}")));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            num_classes,
            stem_width: self.stem_width,
            trunk_width: self.trunk_width,
        }
    }

    /// Learning rate at a global iteration: linear from 10% to 100% over the
    /// warm-up epochs, constant afterwards.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let warmup = self.warmup_epochs * self.iterations_per_epoch;
        if iteration >= warmup {
            self.lr
        } else {
            self.lr * (0.1 + 0.9 * iteration as f64 / warmup as f64)
        }
    }
}

/// Images of one training step, ready for the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub visible: Vec<Image>,
    pub infrared: Vec<Image>,
    pub intermediate: Option<Vec<Image>>,
    pub labels: Vec<usize>,
    /// Channel-mixing operations performed while preparing this batch.
    pub mix_calls: usize,
}

/// Builds the batch of `(epoch, iteration)` from its own random stream, so
/// the result does not depend on when or where it is prepared.
pub fn prepare_batch(ds: &Dataset, cfg: &TrainConfig, epoch: usize, iteration: usize) -> Result<PreparedBatch> {
    let mut rng = stream(cfg.seed, Purpose::Batch, epoch as u64, iteration as u64);
    let pk = pk_sample(ds, cfg.b_s, cfg.n_p, &mut rng)?;
    let samples = ds.samples();
    let mut visible: Vec<Image> = pk.visible.iter().map(|&i| samples[i].image.clone()).collect();
    let mut infrared: Vec<Image> = pk.infrared.iter().map(|&i| samples[i].image.clone()).collect();
    let mut mix_calls = 0;
    let mut intermediate = match cfg.intermediate_mode {
        IntermediateMode::None => None,
        IntermediateMode::Grayscale => {
            mix_calls += visible.len();
            Some(visible.iter().map(to_grayscale).collect::<Result<Vec<_>>>()?)
        }
        IntermediateMode::RandMix | IntermediateMode::RandMixAug => {
            mix_calls += visible.len();
            Some(
                visible
                    .iter()
                    .map(|v| random_channel_mix(v, &mut rng).map(|(z, _)| z))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };
    if cfg.intermediate_mode == IntermediateMode::RandMixAug {
        let first = &visible[0];
        let policy = AugmentPolicy {
            target_h: first.height(),
            target_w: first.width(),
            pad_fraction: cfg.pad_fraction,
            pad_mode: cfg.pad_mode,
            flip_prob: cfg.flip_prob,
        };
        let streams = [Some(&mut visible), Some(&mut infrared), intermediate.as_mut()];
        for images in streams.into_iter().flatten() {
            for img in images.iter_mut() {
                *img = augment(img, &policy, &mut rng)?;
            }
        }
    }
    Ok(PreparedBatch {
        visible,
        infrared,
        intermediate,
        labels: pk.labels,
        mix_calls,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    /// Global iteration index, starting at 0.
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub mean_loss: f64,
    pub rank1: Option<f64>,
    pub map: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochSnapshot>,
    pub mix_calls: usize,
    pub wall_clock_seconds: f64,
}

impl TrainLog {
    /// One JSON object per line: iterations, then epoch snapshots, then a summary.
    pub fn to_json_lines(&self) -> Result<String> {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "lowercase")]
        enum Line<'a> {
            Iteration(&'a IterationRecord),
            Epoch(&'a EpochSnapshot),
            Summary { mix_calls: usize, wall_clock_seconds: f64 },
        }
        let mut out = String::new();
        let lines = self
            .iterations
            .iter()
            .map(Line::Iteration)
            .chain(self.epochs.iter().map(Line::Epoch))
            .chain(std::iter::once(Line::Summary {
                mix_calls: self.mix_calls,
                wall_clock_seconds: self.wall_clock_seconds,
            }));
        for line in lines {
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Held-out data evaluated at the end of every epoch.
pub struct Holdout<'a> {
    pub dataset: &'a Dataset,
    pub protocol: EvalProtocol,
}

/// Trains from a fresh initialization; see [`train_monitored`].
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    train_monitored(ds, cfg, None)
}

/// Runs `cfg.epochs × cfg.iterations_per_epoch` SGD steps, optionally
/// evaluating on a held-out split after each epoch.
pub fn train_monitored(ds: &Dataset, cfg: &TrainConfig, holdout: Option<&Holdout>) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut params = ModelParams::init(cfg.seed, cfg.model_config(ds.num_identities()))?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((params, log));
    }
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let steps = cfg.epochs * cfg.iterations_per_epoch;
    let coords = move |t: usize| (t / cfg.iterations_per_epoch, t % cfg.iterations_per_epoch);

    let mut run = |next: &mut dyn FnMut() -> Result<PreparedBatch>| -> Result<()> {
        for t in 0..steps {
            let (epoch, _) = coords(t);
            let batch = next()?;
            log.mix_calls += batch.mix_calls;
            let lr = cfg.lr_at(t);
            let loss = step(&mut params, &mut sgd, &batch, cfg, lr, t)?;
            log.iterations.push(IterationRecord {
                epoch,
                iteration: t,
                lr,
                loss,
            });
            if (t + 1) % cfg.iterations_per_epoch == 0 {
                let recent = &log.iterations[log.iterations.len() - cfg.iterations_per_epoch..];
                let mean_loss = recent.iter().map(|r| r.loss.total).sum::<f64>() / recent.len() as f64;
                let report = holdout.map(|h| evaluate_model(&params, h.dataset, &h.protocol)).transpose()?;
                log::info!(
                    "epoch {epoch}: mean loss {mean_loss:.4}{}",
                    report.as_ref().map(|r| format!(", rank-1 {:.4}", r.rank(1))).unwrap_or_default()
                );
                log.epochs.push(EpochSnapshot {
                    epoch,
                    mean_loss,
                    rank1: report.as_ref().map(|r| r.rank(1)),
                    map: report.as_ref().map(|r| r.map),
                });
            }
        }
        Ok(())
    };

    if cfg.prefetch {
        thread::scope(|scope| {
            let (tx, rx) = mpsc::sync_channel::<Result<PreparedBatch>>(1);
            scope.spawn(move || {
                for t in 0..steps {
                    let (e, i) = coords(t);
                    if tx.send(prepare_batch(ds, cfg, e, i)).is_err() {
                        break;
                    }
                }
            });
            let mut next = || {
                rx.recv()
                    .map_err(|_| Error::InvalidArgument("batch producer stopped".into()))?
            };
            run(&mut next)
        })?;
    } else {
        let mut t = 0;
        let mut next = || {
            let (e, i) = coords(t);
            t += 1;
            prepare_batch(ds, cfg, e, i)
        };
        run(&mut next)?;
    }
    log.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((params, log))
}

fn step(
    params: &mut ModelParams,
    sgd: &mut Sgd,
    batch: &PreparedBatch,
    cfg: &TrainConfig,
    lr: f64,
    iteration: usize,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let labels = &batch.labels;
    let fv = embed(&bound, &batch.visible, Modality::Visible)?.with_labels(labels.clone());
    let ft = embed(&bound, &batch.infrared, Modality::Infrared)?.with_labels(labels.clone());
    let fz = match &batch.intermediate {
        Some(z) => Some(embed(&bound, z, Modality::Intermediate)?.with_labels(labels.clone())),
        None => None,
    };
    let (total, breakdown) = match total_loss(&fv, &ft, fz.as_ref(), &cfg.loss) {
        Err(Error::NonFinite { .. }) => return Err(Error::Diverged { iteration }),
        other => other?,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged { iteration });
    }
    let grads = bound.gradients(&tape.backward(&total)?);
    sgd.step(params, &grads, lr)?;
    if !params.is_finite() {
        return Err(Error::Diverged { iteration });
    }
    Ok(breakdown)
}

/// Unit-norm features of every sample of one modality.
pub fn embed_dataset(params: &ModelParams, ds: &Dataset, modality: Modality) -> Result<Vec<EmbeddingRecord>> {
    let samples: Vec<_> = ds.of_modality(modality).collect();
    let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let features = extract_features(params, &images, modality)?;
    Ok(samples
        .iter()
        .zip(features)
        .map(|(s, feature)| EmbeddingRecord {
            feature,
            identity: s.identity,
            camera: s.camera,
            modality,
        })
        .collect())
}

pub fn evaluate_model(params: &ModelParams, ds: &Dataset, protocol: &EvalProtocol) -> Result<EvalReport> {
    let queries = embed_dataset(params, ds, protocol.query_modality)?;
    let gallery = embed_dataset(params, ds, protocol.gallery_modality)?;
    evaluate(&queries, &gallery, protocol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: IntermediateMode,
    pub triplet: bool,
    pub color_free: bool,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, mode: IntermediateMode, triplet: bool, color_free: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.triplet == triplet && r.color_free == color_free)
    }

    /// `mode,triplet,color_free,rank1,rank10,map` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,triplet,color_free,rank1,rank10,map\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                r.mode.name(),
                u8::from(r.triplet),
                u8::from(r.color_free),
                r.report.rank(1),
                r.report.rank(10),
                r.report.map
            )
            .expect("writing to a String");
        }
        out
    }
}

/// All four intermediate modes, each with every on/off combination of the
/// triplet and color-free terms, trained on `train_ds` and scored on `test_ds`.
pub fn run_ablation(
    train_ds: &Dataset,
    test_ds: &Dataset,
    base: &TrainConfig,
    protocol: &EvalProtocol,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for mode in IntermediateMode::ALL {
        for (triplet, color_free) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg = TrainConfig {
                intermediate_mode: mode,
                loss: LossConfig {
                    triplet,
                    color_free,
                    ..base.loss
                },
                ..*base
            };
            let (params, _) = train(train_ds, &cfg)?;
            let report = evaluate_model(&params, test_ds, protocol)?;
            log::info!(
                "ablation {} tri={triplet} cf={color_free}: rank-1 {:.4}",
                mode.name(),
                report.rank(1)
            );
            table.rows.push(AblationRow {
                mode,
                triplet,
                color_free,
                report,
            });
        }
    }
    Ok(table)
}
