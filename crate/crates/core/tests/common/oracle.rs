//! Direct-definition retrieval scorer used as an oracle for `evaluate`.

use lupi_core::eval::EmbeddingRecord;

pub struct OracleScores {
    pub cmc: Vec<f64>,
    pub map: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Scores every query against the whole gallery. The position of each gallery
/// entry is the count of entries strictly ahead of it (closer, or equally
/// close with a lower index); no sorting involved.
pub fn brute_force(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord], exclude_same_camera: bool) -> OracleScores {
    let mut first_hits = Vec::new();
    let mut ap_sum = 0.0;
    for q in queries {
        let valid: Vec<usize> = (0..gallery.len())
            .filter(|&j| {
                let g = &gallery[j];
                !(g.identity == q.identity
                    && g.camera == q.camera
                    && (exclude_same_camera || g.modality == q.modality))
            })
            .collect();
        let d: Vec<f64> = valid.iter().map(|&j| dist(&q.feature, &gallery[j].feature)).collect();
        let position = |a: usize| {
            (0..valid.len())
                .filter(|&b| d[b] < d[a] || (d[b] == d[a] && valid[b] < valid[a]))
                .count()
        };
        let mut hit_positions: Vec<usize> = (0..valid.len())
            .filter(|&a| gallery[valid[a]].identity == q.identity)
            .map(position)
            .collect();
        if hit_positions.is_empty() {
            continue;
        }
        hit_positions.sort_unstable();
        first_hits.push(hit_positions[0]);
        let precision: f64 = hit_positions
            .iter()
            .enumerate()
            .map(|(k, &p)| (k + 1) as f64 / (p + 1) as f64)
            .sum();
        ap_sum += precision / hit_positions.len() as f64;
    }
    let nq = first_hits.len() as f64;
    let cmc = (0..gallery.len())
        .map(|k| first_hits.iter().filter(|&&p| p <= k).count() as f64 / nq)
        .collect();
    OracleScores { cmc, map: ap_sum / nq }
}
