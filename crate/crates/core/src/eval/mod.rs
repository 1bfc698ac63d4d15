//! Retrieval evaluation (CMC, mAP), MMD domain-shift estimation, and
//! cross-modal distance histograms.

mod histogram;
mod mmd;

pub use histogram::{distance_histograms, DistanceHistograms, HISTOGRAM_BINS};
pub use mmd::{median_heuristic, mmd, MmdEstimate};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sq_dist;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rng::{stream, Purpose};

/// Allowed deviation of a record's feature norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-8;

/// Gallery images kept per identity and camera in multi-shot mode.
pub const MULTI_SHOT: usize = 10;

/// A unit-norm feature with its labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub feature: Vec<f64>,
    pub identity: u32,
    pub camera: u32,
    pub modality: Modality,
}

impl EmbeddingRecord {
    /// Checks that `feature` has unit norm.
    pub fn new(feature: Vec<f64>, identity: u32, camera: u32, modality: Modality) -> Result<Self> {
        let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("feature norm {norm} is not 1")));
        }
        Ok(EmbeddingRecord {
            feature,
            identity,
            camera,
            modality,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotMode {
    /// One random gallery image per identity per camera.
    Single,
    /// Up to ten random gallery images per identity per camera.
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub query_modality: Modality,
    pub gallery_modality: Modality,
    pub shot_mode: ShotMode,
    /// Drop gallery entries sharing identity and camera with the query. Always
    /// applied to same-modality pairs.
    pub exclude_same_camera: bool,
    pub num_trials: usize,
    pub rng_seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            query_modality: Modality::Infrared,
            gallery_modality: Modality::Visible,
            shot_mode: ShotMode::Single,
            exclude_same_camera: false,
            num_trials: 10,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub rank1: f64,
    pub rank10: f64,
    pub map: f64,
    pub gallery_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    /// `cmc[k - 1]` is the rank-k matching rate, averaged over trials.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries with at least one valid match.
    pub num_queries: usize,
    pub per_trial: Vec<TrialMetrics>,
}

impl EvalReport {
    /// Matching rate at rank `k` (1-based), saturating past the gallery size.
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }
}

/// Per-query ranking outcome on one gallery draw.
pub(crate) struct Scores {
    /// Hits at each rank position, accumulated: `cmc_counts[k]` = queries hit within `k + 1`.
    pub cmc_counts: Vec<usize>,
    pub ap_sum: f64,
    pub valid_queries: usize,
}

fn excluded(q: &EmbeddingRecord, g: &EmbeddingRecord, exclude_same_camera: bool) -> bool {
    q.identity == g.identity && q.camera == g.camera && (exclude_same_camera || q.modality == g.modality)
}

pub(crate) fn score(queries: &[EmbeddingRecord], gallery: &[&EmbeddingRecord], exclude_same_camera: bool) -> Scores {
    let mut scores = Scores {
        cmc_counts: vec![0; gallery.len()],
        ap_sum: 0.0,
        valid_queries: 0,
    };
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(gallery.len());
    for q in queries {
        ranked.clear();
        ranked.extend(
            gallery
                .iter()
                .enumerate()
                .filter(|(_, g)| !excluded(q, g, exclude_same_camera))
                .map(|(j, g)| (sq_dist(&q.feature, &g.feature), j)),
        );
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (pos, &(_, j)) in ranked.iter().enumerate() {
            if gallery[j].identity == q.identity {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                first_hit.get_or_insert(pos);
            }
        }
        let Some(first) = first_hit else { continue };
        scores.valid_queries += 1;
        scores.ap_sum += precision_sum / hits as f64;
        for c in &mut scores.cmc_counts[first..] {
            *c += 1;
        }
    }
    scores
}

/// Draws the gallery subset of one trial; indices are returned in ascending order.
fn draw_gallery(gallery: &[EmbeddingRecord], mode: ShotMode, rng: &mut impl Rng) -> Vec<usize> {
    let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, g) in gallery.iter().enumerate() {
        groups.entry((g.identity, g.camera)).or_default().push(i);
    }
    let keep = match mode {
        ShotMode::Single => 1,
        ShotMode::Multi => MULTI_SHOT,
    };
    let mut picked: Vec<usize> = groups
        .values()
        .flat_map(|members| {
            let n = keep.min(members.len());
            index::sample(rng, members.len(), n)
                .into_iter()
                .map(|k| members[k])
                .collect::<Vec<_>>()
        })
        .collect();
    picked.sort_unstable();
    picked
}

/// Ranks the sampled gallery by Euclidean distance for every query and
/// averages CMC and mAP over `num_trials` gallery draws.
pub fn evaluate(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord], protocol: &EvalProtocol) -> Result<EvalReport> {
    if protocol.num_trials == 0 {
        return Err(Error::InvalidArgument("num_trials must be at least 1".into()));
    }
    let dim = queries.first().or(gallery.first()).map(|r| r.feature.len()).unwrap_or(0);
    if let Some(r) = queries.iter().chain(gallery).find(|r| r.feature.len() != dim) {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            left: vec![dim],
            right: vec![r.feature.len()],
        });
    }
    let gallery_ids: BTreeSet<u32> = gallery.iter().map(|g| g.identity).collect();
    let absent: BTreeSet<u32> = queries
        .iter()
        .map(|q| q.identity)
        .filter(|id| !gallery_ids.contains(id))
        .collect();
    if !absent.is_empty() {
        return Err(Error::QueryIdentityAbsent(absent.into_iter().collect()));
    }
    let mut cmc_total: Vec<f64> = Vec::new();
    let mut map_total = 0.0;
    let mut per_trial = Vec::with_capacity(protocol.num_trials);
    let mut num_queries = 0;
    for trial in 0..protocol.num_trials {
        let mut rng = stream(protocol.rng_seed, Purpose::Trial, trial as u64, 0);
        let picked = draw_gallery(gallery, protocol.shot_mode, &mut rng);
        let subset: Vec<&EmbeddingRecord> = picked.iter().map(|&i| &gallery[i]).collect();
        let s = score(queries, &subset, protocol.exclude_same_camera);
        if s.valid_queries == 0 {
            return Err(Error::InvalidArgument("no query has a valid gallery match".into()));
        }
        num_queries = s.valid_queries;
        let nq = s.valid_queries as f64;
        let cmc: Vec<f64> = s.cmc_counts.iter().map(|&c| c as f64 / nq).collect();
        let map = s.ap_sum / nq;
        if cmc_total.len() < cmc.len() {
            let last = cmc_total.last().copied().unwrap_or(0.0);
            cmc_total.resize(cmc.len(), last);
        }
        for (k, total) in cmc_total.iter_mut().enumerate() {
            *total += cmc.get(k).or(cmc.last()).copied().unwrap_or(0.0);
        }
        map_total += map;
        let at = |k: usize| cmc.get(k - 1).or(cmc.last()).copied().unwrap_or(0.0);
        per_trial.push(TrialMetrics {
            rank1: at(1),
            rank10: at(10),
            map,
            gallery_size: subset.len(),
        });
    }
    let trials = protocol.num_trials as f64;
    Ok(EvalReport {
        protocol: *protocol,
        cmc: cmc_total.into_iter().map(|v| v / trials).collect(),
        map: map_total / trials,
        num_queries,
        per_trial,
    })
}
