//! `key = value` run configuration covering data generation, training and
//! evaluation.
//!
//! Keys are namespaced (`synth.*`, `train.*`, `loss.*`, `eval.*`). Lines
//! starting with `#` and blank lines are ignored. Unknown or repeated keys are
//! errors. [`RunConfig::canonical`] prints every key, sorted, with defaults
//! filled in; parsing that text yields the same config.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalProtocol, ShotMode};
use crate::imaging::PadMode;
use crate::modality::Modality;
use crate::trainer::{IntermediateMode, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
}

trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, f64, bool);

impl Value for Modality {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn render(&self) -> String {
        self.tag().to_string()
    }
}

impl Value for IntermediateMode {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn render(&self) -> String {
        self.name().to_string()
    }
}

impl Value for PadMode {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero" => Ok(PadMode::Zero),
            "mean" => Ok(PadMode::Mean),
            _ => Err(format!("expected zero or mean, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            PadMode::Zero => "zero",
            PadMode::Mean => "mean",
        }
        .to_string()
    }
}

impl Value for ShotMode {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(ShotMode::Single),
            "multi" => Ok(ShotMode::Multi),
            _ => Err(format!("expected single or multi, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            ShotMode::Single => "single",
            ShotMode::Multi => "multi",
        }
        .to_string()
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl RunConfig {
            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $($key => self.$($field).+ = Value::parse(value)?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render()),)*]
            }
        }
    };
}

keys! {
    "synth.num_identities" => synth.num_identities;
    "synth.num_test_identities" => synth.num_test_identities;
    "synth.images_per_identity_per_modality" => synth.images_per_identity_per_modality;
    "synth.height" => synth.height;
    "synth.width" => synth.width;
    "synth.num_cameras_v" => synth.num_cameras_v;
    "synth.num_cameras_i" => synth.num_cameras_i;
    "synth.color_signal_strength" => synth.color_signal_strength;
    "synth.texture_signal_strength" => synth.texture_signal_strength;
    "synth.noise_level" => synth.noise_level;
    "synth.pose_jitter" => synth.pose_jitter;
    "synth.quantize" => synth.quantize;
    "synth.seed" => synth.rng_seed;
    "train.epochs" => train.epochs;
    "train.iterations_per_epoch" => train.iterations_per_epoch;
    "train.b_s" => train.b_s;
    "train.n_p" => train.n_p;
    "train.lr" => train.lr;
    "train.momentum" => train.momentum;
    "train.weight_decay" => train.weight_decay;
    "train.warmup_epochs" => train.warmup_epochs;
    "train.intermediate_mode" => train.intermediate_mode;
    "train.dim" => train.dim;
    "train.stem_width" => train.stem_width;
    "train.trunk_width" => train.trunk_width;
    "train.pad_fraction" => train.pad_fraction;
    "train.pad_mode" => train.pad_mode;
    "train.flip_prob" => train.flip_prob;
    "train.prefetch" => train.prefetch;
    "train.seed" => train.seed;
    "loss.margin" => train.loss.margin;
    "loss.alpha_c" => train.loss.alpha_c;
    "loss.lambda" => train.loss.lambda;
    "loss.cf_threshold" => train.loss.cf_threshold;
    "loss.triplet" => train.loss.triplet;
    "loss.color_free" => train.loss.color_free;
    "eval.query_modality" => eval.query_modality;
    "eval.gallery_modality" => eval.gallery_modality;
    "eval.shot_mode" => eval.shot_mode;
    "eval.exclude_same_camera" => eval.exclude_same_camera;
    "eval.num_trials" => eval.num_trials;
    "eval.seed" => eval.rng_seed;
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Config { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.synth.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its resolved value, sorted by key.
    pub fn canonical(&self) -> String {
        let mut entries = self.entries();
        entries.sort();
        let mut out = String::new();
        for (k, v) in entries {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.canonical();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&text).unwrap().canonical(), text);
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse("# comment\n\ntrain.epochs = 3\neval.shot_mode=multi\nloss.lambda = 2.5\ntrain.intermediate_mode = none\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.eval.shot_mode, ShotMode::Multi);
        assert_eq!(cfg.train.loss.lambda, 2.5);
        assert_eq!(cfg.train.intermediate_mode, IntermediateMode::None);
    }

    #[test]
    fn unknown_key_reports_line() {
        match RunConfig::parse("train.epochs = 1\nbogus = 2\n") {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("bogus"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(RunConfig::parse("train.epochs 3").is_err());
        assert!(RunConfig::parse("train.epochs = three").is_err());
        assert!(RunConfig::parse("train.seed = 1\ntrain.seed = 2").is_err());
        assert!(RunConfig::parse("synth.color_signal_strength = 2").is_err());
    }

    #[test]
    fn keys_are_unique() {
        let entries = RunConfig::default().entries();
        let keys: BTreeSet<_> = entries.iter().map(|e| e.0).collect();
        assert_eq!(keys.len(), entries.len());
    }
}
