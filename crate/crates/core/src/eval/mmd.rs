use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::sq_dist;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    /// Unbiased U-statistic estimate of MMD²; may be slightly negative.
    pub squared: f64,
    /// `sqrt(max(squared, 0))`.
    pub distance: f64,
}

fn kernel(a: &[f64], b: &[f64], bandwidths: &[f64]) -> f64 {
    let d2 = sq_dist(a, b);
    bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
}

fn within(x: &[Vec<f64>], bandwidths: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            total += kernel(&x[i], &x[j], bandwidths);
        }
    }
    2.0 * total / (x.len() * (x.len() - 1)) as f64
}

fn lexicographic(a: &[Vec<f64>], b: &[Vec<f64>]) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Unbiased MMD² between two samples under a sum of Gaussian kernels
/// `Σ_σ exp(−‖x − y‖² / 2σ²)`.
///
/// The result is bitwise symmetric in `x` and `y`: the cross term is always
/// summed in one canonical argument order.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>], bandwidths: &[f64]) -> Result<MmdEstimate> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "MMD needs at least 2 samples per set, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!("kernel bandwidths {bandwidths:?}")));
    }
    let dim = x[0].len();
    if let Some(v) = x.iter().chain(y).find(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch {
            op: "mmd",
            left: vec![dim],
            right: vec![v.len()],
        });
    }
    let (first, second) = if lexicographic(x, y).is_le() { (x, y) } else { (y, x) };
    let mut cross = 0.0;
    for a in first {
        for b in second {
            cross += kernel(a, b, bandwidths);
        }
    }
    let cross = cross / (x.len() * y.len()) as f64;
    let squared = within(x, bandwidths) + within(y, bandwidths) - 2.0 * cross;
    Ok(MmdEstimate {
        squared,
        distance: squared.max(0.0).sqrt(),
    })
}

/// Median pairwise Euclidean distance over the pooled sample, a common
/// default bandwidth. At most `limit` points from each set are used.
pub fn median_heuristic(x: &[Vec<f64>], y: &[Vec<f64>], limit: usize) -> Result<f64> {
    let pooled: Vec<&Vec<f64>> = x.iter().take(limit).chain(y.iter().take(limit)).collect();
    let mut d: Vec<f64> = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::InvalidArgument("median heuristic needs two points".into()));
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        Ok(m)
    } else {
        Err(Error::InvalidArgument("all points coincide".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_multisets_floor_to_zero() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3, 1.0]).collect();
        let e = mmd(&x, &x, &[0.5, 1.0]).unwrap();
        assert!(e.squared <= 0.0);
        assert_eq!(e.distance, 0.0);
    }

    #[test]
    fn exact_symmetry() {
        let x: Vec<Vec<f64>> = (0..7).map(|i| vec![(i as f64).sin(), 0.1 * i as f64]).collect();
        let y: Vec<Vec<f64>> = (0..5).map(|i| vec![(i as f64).cos() + 0.5, 0.2]).collect();
        assert_eq!(mmd(&x, &y, &[1.0, 2.0]).unwrap(), mmd(&y, &x, &[1.0, 2.0]).unwrap());
    }

    #[test]
    fn median_of_line_points() {
        let x = vec![vec![0.0], vec![1.0]];
        let y = vec![vec![3.0]];
        // Distances 1, 3, 2.
        assert_eq!(median_heuristic(&x, &y, 10).unwrap(), 2.0);
    }

    #[test]
    fn too_few_samples_rejected() {
        let x = vec![vec![0.0]];
        assert!(mmd(&x, &x, &[1.0]).is_err());
        let y = vec![vec![0.0], vec![1.0]];
        assert!(mmd(&y, &y, &[]).is_err());
    }
}
