use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EmbeddingRecord;
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 50;
const RANGE: f64 = 2.0;

/// Cosine distances of cross-modal pairs, split by identity match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistograms {
    pub positive: Vec<u64>,
    pub negative: Vec<u64>,
    pub positive_mean: f64,
    pub negative_mean: f64,
}

fn bin(d: f64) -> usize {
    ((d / RANGE * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

/// Every pair of records with different modalities contributes `1 − ⟨f_a, f_b⟩`
/// to the positive or negative histogram (50 bins over `[0, 2]`).
pub fn distance_histograms(records: &[EmbeddingRecord]) -> Result<DistanceHistograms> {
    let mut out = DistanceHistograms {
        positive: vec![0; HISTOGRAM_BINS],
        negative: vec![0; HISTOGRAM_BINS],
        positive_mean: 0.0,
        negative_mean: 0.0,
    };
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    for (i, a) in records.iter().enumerate() {
        for b in &records[i + 1..] {
            if a.modality == b.modality {
                continue;
            }
            let dot: f64 = a.feature.iter().zip(&b.feature).map(|(x, y)| x * y).sum();
            let d = 1.0 - dot;
            if a.identity == b.identity {
                out.positive[bin(d)] += 1;
                pos_sum += d;
            } else {
                out.negative[bin(d)] += 1;
                neg_sum += d;
            }
        }
    }
    let (np, nn) = (out.positive_count(), out.negative_count());
    if np + nn == 0 {
        return Err(Error::InvalidArgument("distance histograms need two modalities".into()));
    }
    out.positive_mean = if np > 0 { pos_sum / np as f64 } else { 0.0 };
    out.negative_mean = if nn > 0 { neg_sum / nn as f64 } else { 0.0 };
    Ok(out)
}

impl DistanceHistograms {
    pub fn positive_count(&self) -> u64 {
        self.positive.iter().sum()
    }

    pub fn negative_count(&self) -> u64 {
        self.negative.iter().sum()
    }

    /// `bin_left,bin_right,pos_count,neg_count` with a header row.
    pub fn to_csv(&self) -> String {
        let width = RANGE / HISTOGRAM_BINS as f64;
        let mut out = String::from("bin_left,bin_right,pos_count,neg_count\n");
        for k in 0..HISTOGRAM_BINS {
            writeln!(
                out,
                "{:.2},{:.2},{},{}",
                k as f64 * width,
                (k + 1) as f64 * width,
                self.positive[k],
                self.negative[k]
            )
            .expect("writing to a String");
        }
        out
    }
}
