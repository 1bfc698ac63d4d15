//! Three-stream embedding network.
//!
//! Visible, infrared and intermediate inputs each pass through their own
//! convolutional stem. Everything after the stem (second conv block, global
//! pooling, projection, identity classifier) is one set of parameters used by
//! all three streams.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::modality::Modality;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension.
    pub dim: usize,
    /// Number of training identities the classifier separates.
    pub num_classes: usize,
    pub stem_width: usize,
    pub trunk_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            num_classes: 20,
            stem_width: 8,
            trunk_width: 16,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes == 0 || self.stem_width == 0 || self.trunk_width == 0 {
            return Err(Error::InvalidArgument(format!("model config {self:?}")));
        }
        Ok(())
    }

    /// Every parameter name with its shape and fan-in, in canonical order.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        for m in [Modality::Visible, Modality::Infrared, Modality::Intermediate] {
            let c = m.channels();
            let prefix = stem_prefix(m);
            out.push((
                format!("{prefix}.weight"),
                vec![self.stem_width, c, KERNEL, KERNEL],
                c * KERNEL * KERNEL,
            ));
            out.push((format!("{prefix}.bias"), vec![self.stem_width], 0));
        }
        out.push((
            "trunk.conv.weight".into(),
            vec![self.trunk_width, self.stem_width, KERNEL, KERNEL],
            self.stem_width * KERNEL * KERNEL,
        ));
        out.push(("trunk.conv.bias".into(), vec![self.trunk_width], 0));
        out.push(("trunk.proj.weight".into(), vec![self.trunk_width, self.dim], self.trunk_width));
        out.push(("trunk.proj.bias".into(), vec![self.dim], 0));
        out.push(("classifier.weight".into(), vec![self.dim, self.num_classes], self.dim));
        out.push(("classifier.bias".into(), vec![self.num_classes], 0));
        out
    }
}

pub fn stem_prefix(m: Modality) -> &'static str {
    match m {
        Modality::Visible => "stem_v",
        Modality::Infrared => "stem_i",
        Modality::Intermediate => "stem_z",
    }
}

/// Named parameter set. Each name owns exactly one tensor, so the trunk and
/// classifier are the same storage whichever stem feeds them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients (or any per-parameter tensors) keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

impl ModelParams {
    /// Fan-in scaled uniform initialization; every bias starts at zero.
    pub fn init(seed: u64, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Purpose::Init, 0, 0);
        let mut tensors = BTreeMap::new();
        for (name, shape, fan_in) in config.inventory() {
            let mut t = Tensor::zeros(&shape);
            if fan_in > 0 {
                // ReLU gain for convolutions, unit gain for the linear maps.
                let gain: f64 = if shape.len() == 4 { 2.0 } else { 1.0 };
                let bound = (3.0 * gain / fan_in as f64).sqrt();
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound));
            }
            tensors.insert(name, t);
        }
        Ok(ModelParams { config, tensors })
    }

    /// Assembles parameters from named tensors, checking them against the inventory.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let inventory = config.inventory();
        if tensors.len() != inventory.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                inventory.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &inventory {
            let t = tensors
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "params",
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        self.bind_with(tape, true)
    }

    /// Binds parameters as constants: forward passes record nothing.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams {
            config: self.config,
            vars,
        }
    }
}

/// Parameters attached to one tape.
pub struct BoundParams<'t> {
    config: ModelConfig,
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, name: &str) -> &Var<'t> {
        &self.vars[name]
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Gradient for every parameter, zeros where the loss does not depend on it.
    pub fn gradients(&self, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .map(|(name, v)| (name.clone(), grads.wrt(v)))
            .collect()
    }
}

/// Outputs of one stream for one batch.
#[derive(Clone)]
pub struct EmbeddingBatch<'t> {
    /// `[b, d]`, unit-norm rows.
    pub features: Var<'t>,
    /// `[b, d]` features before normalization; the classifier's input.
    pub raw: Var<'t>,
    /// `[b, C]`.
    pub logits: Var<'t>,
    /// Classifier indices, one per row (may be empty at inference).
    pub labels: Vec<usize>,
    pub modality: Modality,
}

impl<'t> EmbeddingBatch<'t> {
    pub fn with_labels(mut self, labels: Vec<usize>) -> Self {
        self.labels = labels;
        self
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pixels enter the network as `(p - PIXEL_MEAN) / PIXEL_STD`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Stacks same-sized images into a standardized planar `[N, C, H, W]` tensor.
pub fn batch_tensor(images: &[Image], channels: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * channels * h * w);
    for img in images {
        if img.channels() != channels {
            return Err(Error::ChannelMismatch {
                expected: channels,
                found: img.channels(),
            });
        }
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "batch",
                left: vec![h, w],
                right: vec![img.height(), img.width()],
            });
        }
        data.extend(img.to_planar().into_iter().map(|p| (p - PIXEL_MEAN) / PIXEL_STD));
    }
    Tensor::new(vec![images.len(), channels, h, w], data)
}

/// Forward pass of one stream.
pub fn embed<'t>(params: &BoundParams<'t>, images: &[Image], modality: Modality) -> Result<EmbeddingBatch<'t>> {
    let tape = params.var("trunk.conv.weight").tape();
    let input = tape.constant(batch_tensor(images, modality.channels())?);
    forward(params, &input, modality)
}

/// Forward pass from an already-assembled `[N, C, H, W]` input.
pub fn forward<'t>(params: &BoundParams<'t>, input: &Var<'t>, modality: Modality) -> Result<EmbeddingBatch<'t>> {
    let prefix = stem_prefix(modality);
    let stem = input
        .conv2d(params.var(&format!("{prefix}.weight")), params.var(&format!("{prefix}.bias")))?
        .relu()
        .avg_pool2()?;
    let trunk = stem
        .conv2d(params.var("trunk.conv.weight"), params.var("trunk.conv.bias"))?
        .relu()
        .avg_pool2()?
        .global_avg_pool()?;
    let raw = trunk
        .matmul(params.var("trunk.proj.weight"))?
        .add_bias(params.var("trunk.proj.bias"))?;
    let logits = raw
        .matmul(params.var("classifier.weight"))?
        .add_bias(params.var("classifier.bias"))?;
    Ok(EmbeddingBatch {
        features: raw.l2_normalize(),
        raw,
        logits,
        labels: Vec::new(),
        modality,
    })
}

/// Gradient-free unit-norm features, computed in chunks.
pub fn extract_features(params: &ModelParams, images: &[Image], modality: Modality) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let batch = embed(&bound, chunk, modality)?;
        let f = batch.features.value();
        out.extend((0..chunk.len()).map(|i| f.row(i).to_vec()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn config() -> ModelConfig {
        ModelConfig {
            dim: 6,
            num_classes: 3,
            stem_width: 3,
            trunk_width: 4,
        }
    }

    fn images(n: usize, channels: usize, seed: u64) -> Vec<Image> {
        let mut rng = stream(seed, Purpose::Probe, 0, 0);
        (0..n)
            .map(|_| Image::new(8, 4, channels, (0..32 * channels).map(|_| rng.random()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = ModelParams::init(3, config()).unwrap();
        let b = ModelParams::init(3, config()).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert!(a.get("classifier.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert_ne!(a, ModelParams::init(4, config()).unwrap());
    }

    #[test]
    fn stems_differ_only_in_input_channels() {
        let p = ModelParams::init(0, config()).unwrap();
        let v = p.get("stem_v.weight").unwrap().shape();
        let i = p.get("stem_i.weight").unwrap().shape();
        let z = p.get("stem_z.weight").unwrap().shape();
        assert_eq!(v, &[3, 3, 3, 3]);
        assert_eq!(i, &[3, 1, 3, 3]);
        assert_eq!(i, z);
        let diff: Vec<usize> = (0..4).filter(|&k| v[k] != i[k]).collect();
        assert_eq!(diff, vec![1]);
        assert_eq!(p.get("stem_v.bias").unwrap().shape(), p.get("stem_i.bias").unwrap().shape());
    }

    #[test]
    fn embed_shapes_and_unit_rows() {
        let p = ModelParams::init(1, config()).unwrap();
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        let out = embed(&bound, &images(5, 3, 1), Modality::Visible).unwrap();
        assert_eq!(out.features.shape(), &[5, 6]);
        assert_eq!(out.logits.shape(), &[5, 3]);
        for i in 0..5 {
            let n: f64 = out.features.value().row(i).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-8);
        }
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn default_dimension_is_64() {
        let p = ModelParams::init(1, ModelConfig::default()).unwrap();
        let f = extract_features(&p, &images(2, 1, 2), Modality::Infrared).unwrap();
        assert_eq!(f[0].len(), 64);
    }

    #[test]
    fn channel_stem_mismatch_rejected() {
        let p = ModelParams::init(1, config()).unwrap();
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        assert!(matches!(
            embed(&bound, &images(2, 1, 1), Modality::Visible),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn identical_images_identical_rows_and_permutation_equivariance() {
        let p = ModelParams::init(2, config()).unwrap();
        let mut imgs = images(4, 3, 5);
        imgs[3] = imgs[0].clone();
        let f = extract_features(&p, &imgs, Modality::Visible).unwrap();
        assert_eq!(f[0], f[3]);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Image> = perm.iter().map(|&i| imgs[i].clone()).collect();
        let g = extract_features(&p, &permuted, Modality::Visible).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(g[k], f[i]);
        }
    }
}
