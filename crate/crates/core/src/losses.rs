//! Training objectives: batch-hard triplet terms across modality streams, the
//! color-free consistency loss, identity cross-entropy, and their combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::EmbeddingBatch;

/// Floor under squared distances before the square root.
const DIST_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    /// Weight on the KL branch of the color-free loss.
    pub alpha_c: f64,
    /// Weight on the color-free loss.
    pub lambda: f64,
    /// Mean absolute feature difference above which the color-free loss uses
    /// the difference itself instead of the KL branch.
    pub cf_threshold: f64,
    /// Include the (dual) triplet term.
    pub triplet: bool,
    /// Include the color-free term.
    pub color_free: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.3,
            alpha_c: 0.5,
            lambda: 10.0,
            cf_threshold: 0.5,
            triplet: true,
            color_free: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.margin, self.alpha_c, self.lambda, self.cf_threshold]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("loss config {self:?}")))
        }
    }
}

/// Result of one batch-hard triplet term.
pub struct TripletTerm<'t> {
    pub loss: Var<'t>,
    /// Anchors with no same-identity row in the positive set (or no
    /// other-identity row in the negative set).
    pub skipped: usize,
}

/// Mean over anchors of `[margin + d(a, p*) − d(a, n*)]₊`, where `p*` is the
/// farthest same-identity row of `positives` and `n*` the nearest
/// other-identity row of `negatives`, with `d` the Euclidean distance.
pub fn triplet_term<'t>(
    anchors: &Var<'t>,
    anchor_labels: &[usize],
    positives: &Var<'t>,
    positive_labels: &[usize],
    negatives: &Var<'t>,
    negative_labels: &[usize],
    margin: f64,
) -> Result<TripletTerm<'t>> {
    check_rows(anchors, anchor_labels)?;
    check_rows(positives, positive_labels)?;
    check_rows(negatives, negative_labels)?;
    let d_ap = anchors.pairwise_sq_euclidean(positives)?;
    let d_an = anchors.pairwise_sq_euclidean(negatives)?;
    let (np, nn) = (positive_labels.len(), negative_labels.len());
    let mut pos_picks = Vec::new();
    let mut neg_picks = Vec::new();
    let mut skipped = 0;
    for (i, &y) in anchor_labels.iter().enumerate() {
        let ap = &d_ap.value().data()[i * np..(i + 1) * np];
        let an = &d_an.value().data()[i * nn..(i + 1) * nn];
        let hardest_pos = positive_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == y)
            .map(|(j, _)| j)
            .reduce(|best, j| if ap[j] > ap[best] { j } else { best });
        let hardest_neg = negative_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != y)
            .map(|(j, _)| j)
            .reduce(|best, j| if an[j] < an[best] { j } else { best });
        match (hardest_pos, hardest_neg) {
            (Some(p), Some(n)) => {
                pos_picks.push((i, p));
                neg_picks.push((i, n));
            }
            _ => skipped += 1,
        }
    }
    if pos_picks.is_empty() {
        return Err(Error::NoValidAnchors);
    }
    let dp = d_ap.gather(&pos_picks)?.sqrt_clamped(DIST_FLOOR);
    let dn = d_an.gather(&neg_picks)?.sqrt_clamped(DIST_FLOOR);
    let loss = dp.add_scalar(margin).sub(&dn)?.max_scalar(0.0).mean();
    Ok(TripletTerm { loss, skipped })
}

fn check_rows(x: &Var<'_>, labels: &[usize]) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "triplet_term",
            left: x.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    Ok(())
}

fn sorted(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v
}

fn term<'t>(a: &EmbeddingBatch<'t>, p: &EmbeddingBatch<'t>, n: &EmbeddingBatch<'t>, margin: f64) -> Result<Var<'t>> {
    Ok(triplet_term(&a.features, &a.labels, &p.features, &p.labels, &n.features, &n.labels, margin)?.loss)
}

/// Three triplet terms with rotating roles:
/// (visible, infrared, intermediate), (infrared, intermediate, visible),
/// (intermediate, visible, infrared) as (anchor, positive, negative) sources.
pub fn dual_triplet<'t>(
    fv: &EmbeddingBatch<'t>,
    ft: &EmbeddingBatch<'t>,
    fz: &EmbeddingBatch<'t>,
    margin: f64,
) -> Result<Var<'t>> {
    let ids = sorted(&fv.labels);
    if ids != sorted(&ft.labels) || ids != sorted(&fz.labels) {
        return Err(Error::IdentityMismatch);
    }
    term(fv, ft, fz, margin)?
        .add(&term(ft, fz, fv, margin)?)?
        .add(&term(fz, fv, ft, margin)?)
}

/// Two-stream cross-modal triplet used when no intermediate stream exists:
/// (visible, infrared, infrared) + (infrared, visible, visible).
pub fn cross_modal_triplet<'t>(fv: &EmbeddingBatch<'t>, ft: &EmbeddingBatch<'t>, margin: f64) -> Result<Var<'t>> {
    if sorted(&fv.labels) != sorted(&ft.labels) {
        return Err(Error::IdentityMismatch);
    }
    term(fv, ft, ft, margin)?.add(&term(ft, fv, fv, margin)?)
}

/// Per visible/intermediate pair: the mean absolute feature difference when
/// it exceeds `threshold`, otherwise `alpha_c · KL(softmax(logits_v) ‖ softmax(logits_z))`.
/// Returns the batch mean.
pub fn color_free<'t>(fv: &EmbeddingBatch<'t>, fz: &EmbeddingBatch<'t>, alpha_c: f64, threshold: f64) -> Result<Var<'t>> {
    color_free_from(&fv.features, &fv.logits, &fz.features, &fz.logits, alpha_c, threshold)
}

/// [`color_free`] on bare feature and logit tensors.
pub fn color_free_from<'t>(
    features_v: &Var<'t>,
    logits_v: &Var<'t>,
    features_z: &Var<'t>,
    logits_z: &Var<'t>,
    alpha_c: f64,
    threshold: f64,
) -> Result<Var<'t>> {
    if features_v.shape() != features_z.shape() || logits_v.shape() != logits_z.shape() {
        return Err(Error::ShapeMismatch {
            op: "color_free",
            left: features_v.shape().to_vec(),
            right: features_z.shape().to_vec(),
        });
    }
    if features_v.shape()[0] != logits_v.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "color_free",
            left: features_v.shape().to_vec(),
            right: logits_v.shape().to_vec(),
        });
    }
    let tape = features_v.tape();
    let delta = features_v.sub(features_z)?.abs().mean_last();
    let log_pv = logits_v.log_softmax()?;
    let log_pz = logits_z.log_softmax()?;
    let kl = log_pv.exp().mul(&log_pv.sub(&log_pz)?)?.sum_last();
    let far: Vec<f64> = delta
        .value()
        .data()
        .iter()
        .map(|&d| if d > threshold { 1.0 } else { 0.0 })
        .collect();
    let near: Vec<f64> = far.iter().map(|f| 1.0 - f).collect();
    let far = tape.constant(crate::tensor::Tensor::vector(far));
    let near = tape.constant(crate::tensor::Tensor::vector(near));
    let per_pair = delta.mul(&far)?.add(&kl.scale(alpha_c).mul(&near)?)?;
    Ok(per_pair.mean())
}

/// Mean softmax cross-entropy.
pub fn identity_loss<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "identity_loss",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let classes = logits.shape()[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let picks: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    Ok(logits.log_softmax()?.gather(&picks)?.mean().scale(-1.0))
}

/// Cross-entropy averaged over every row of every given stream.
pub fn identity_loss_over<'t>(batches: &[&EmbeddingBatch<'t>]) -> Result<Var<'t>> {
    let logits: Vec<Var<'t>> = batches.iter().map(|b| b.logits.clone()).collect();
    let labels: Vec<usize> = batches.iter().flat_map(|b| b.labels.iter().copied()).collect();
    identity_loss(&Var::concat_rows(&logits)?, &labels)
}

/// Per-term values of one total-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet: f64,
    /// Already multiplied by `lambda`.
    pub color_free: f64,
    pub identity: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn sum_of_terms(&self) -> f64 {
        self.triplet + self.color_free + self.identity
    }
}

/// `triplet + λ·color_free + identity`.
///
/// With an intermediate stream the triplet term is [`dual_triplet`]; without
/// one it falls back to [`cross_modal_triplet`] and the color-free term is
/// absent. Identity loss covers every stream present.
pub fn total_loss<'t>(
    fv: &EmbeddingBatch<'t>,
    ft: &EmbeddingBatch<'t>,
    fz: Option<&EmbeddingBatch<'t>>,
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossBreakdown)> {
    cfg.validate()?;
    let tape = fv.features.tape();
    let zero = || tape.constant(crate::tensor::Tensor::scalar(0.0));
    let triplet = match (cfg.triplet, fz) {
        (false, _) => zero(),
        (true, Some(fz)) => dual_triplet(fv, ft, fz, cfg.margin)?,
        (true, None) => cross_modal_triplet(fv, ft, cfg.margin)?,
    };
    let color = match (cfg.color_free, fz) {
        (true, Some(fz)) => color_free(fv, fz, cfg.alpha_c, cfg.cf_threshold)?.scale(cfg.lambda),
        _ => zero(),
    };
    let identity = match fz {
        Some(fz) => identity_loss_over(&[fv, ft, fz])?,
        None => identity_loss_over(&[fv, ft])?,
    };
    let total = triplet.add(&color)?.add(&identity)?;
    let breakdown = LossBreakdown {
        triplet: triplet.item(),
        color_free: color.item(),
        identity: identity.item(),
        total: total.item(),
    };
    Ok((total, breakdown))
}
