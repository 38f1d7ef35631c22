//! Attention-region hit rates.
//!
//! A crop is resized to 256x256 and center-cropped to 224x224 before feature
//! extraction, so grid cell `(gx, gy)` covers `[16 + gx*224/w, 16 + (gx+1)*224/w)`
//! horizontally in resized coordinates (likewise vertically). Cells are mapped
//! back to crop pixels and compared with the labeled boxes there.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{CROP_SIZE, RESIZE_SIZE};
use crate::geometry::{overlap_fraction, BBox};
use crate::model::AttentionMap;

pub const RELEVANCE_OVERLAP: f64 = 0.5;

/// One cropped test scene with the labeled product boxes that fall inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExample {
    pub scene: usize,
    pub category: usize,
    /// Crop size in source pixels.
    pub crop_width: f64,
    pub crop_height: f64,
    /// Labeled boxes in crop coordinates, already intersected with the crop.
    pub boxes: Vec<BBox>,
}

/// Grid cell rectangle in crop pixel coordinates.
pub fn cell_box(gx: usize, gy: usize, w: usize, h: usize, crop_width: f64, crop_height: f64) -> BBox {
    let offset = (RESIZE_SIZE - CROP_SIZE) as f64 / 2.0;
    let size = CROP_SIZE as f64;
    let sx = crop_width / RESIZE_SIZE as f64;
    let sy = crop_height / RESIZE_SIZE as f64;
    BBox {
        x0: (offset + gx as f64 * size / w as f64) * sx,
        x1: (offset + (gx + 1) as f64 * size / w as f64) * sx,
        y0: (offset + gy as f64 * size / h as f64) * sy,
        y1: (offset + (gy + 1) as f64 * size / h as f64) * sy,
    }
}

/// Relevance flag per region (row-major).
pub fn relevant_regions(ex: &AttentionExample, w: usize, h: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(w * h);
    for gy in 0..h {
        for gx in 0..w {
            let cell = cell_box(gx, gy, w, h, ex.crop_width, ex.crop_height);
            out.push(ex.boxes.iter().any(|b| overlap_fraction(&cell, b) >= RELEVANCE_OVERLAP));
        }
    }
    out
}

pub fn is_hit(ranking: &[usize], relevant: &[bool], top_n: usize) -> bool {
    ranking.iter().take(top_n).any(|i| relevant[*i])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRate {
    pub top_n: usize,
    pub hits: usize,
    /// Examples with at least one relevant region.
    pub evaluated: usize,
    /// Examples with no relevant region.
    pub excluded: usize,
}

impl HitRate {
    pub fn rate(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.hits as f64 / self.evaluated as f64
        }
    }
}

/// Hit rate of the attention maps produced by `attention` for each example.
pub fn attention_hit_rate(
    examples: &[AttentionExample],
    w: usize,
    h: usize,
    top_n: usize,
    mut attention: impl FnMut(&AttentionExample) -> AttentionMap,
) -> HitRate {
    let mut rate = HitRate { top_n, hits: 0, evaluated: 0, excluded: 0 };
    for ex in examples {
        let relevant = relevant_regions(ex, w, h);
        if !relevant.iter().any(|r| *r) {
            rate.excluded += 1;
            continue;
        }
        rate.evaluated += 1;
        if is_hit(&attention(ex).ranking(), &relevant, top_n) {
            rate.hits += 1;
        }
    }
    rate
}

fn choose(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Probability that a uniformly random ranking of `n` regions puts one of `r`
/// relevant regions in its first `top_n`.
pub fn random_hit_probability(n: usize, r: usize, top_n: usize) -> f64 {
    1.0 - choose(n - r, top_n) / choose(n, top_n)
}

/// Mean of [`random_hit_probability`] over examples with relevant regions.
pub fn random_hit_expectation(relevant: &[Vec<bool>], top_n: usize) -> f64 {
    let evaluated: Vec<&Vec<bool>> = relevant.iter().filter(|r| r.iter().any(|v| *v)).collect();
    if evaluated.is_empty() {
        return 0.0;
    }
    let total: f64 = evaluated
        .iter()
        .map(|r| random_hit_probability(r.len(), r.iter().filter(|v| **v).count(), top_n))
        .sum();
    total / evaluated.len() as f64
}

/// Monte Carlo counterpart: `trials` random permutations, each applied to an
/// example drawn uniformly from those with relevant regions.
pub fn random_hit_monte_carlo(relevant: &[Vec<bool>], top_n: usize, trials: usize, seed: u64) -> f64 {
    let evaluated: Vec<&Vec<bool>> = relevant.iter().filter(|r| r.iter().any(|v| *v)).collect();
    if evaluated.is_empty() || trials == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let rel = evaluated[rng.gen_range(0..evaluated.len())];
        let mut order: Vec<usize> = (0..rel.len()).collect();
        order.shuffle(&mut rng);
        if is_hit(&order, rel, top_n) {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

/// 8-bit PGM of a `w x h` attention map scaled so the maximum weight is 255.
pub fn attention_pgm(map: &AttentionMap, w: usize, h: usize) -> Vec<u8> {
    let max = map.weights.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for v in &map.weights {
        let level = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
        out.push(level.clamp(0.0, 255.0) as u8);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(boxes: Vec<BBox>) -> AttentionExample {
        AttentionExample { scene: 0, category: 0, crop_width: 256.0, crop_height: 256.0, boxes }
    }

    #[test]
    fn cells_tile_the_center_crop() {
        let c = cell_box(0, 0, 7, 7, 256.0, 256.0);
        assert_eq!((c.x0, c.y0, c.x1, c.y1), (16.0, 16.0, 48.0, 48.0));
        let c = cell_box(6, 6, 7, 7, 512.0, 128.0);
        assert_eq!((c.x0, c.x1), (416.0, 480.0));
        assert_eq!((c.y0, c.y1), (104.0, 120.0));
    }

    #[test]
    fn full_crop_box_makes_every_region_relevant() {
        let ex = example(vec![BBox { x0: 0.0, y0: 0.0, x1: 256.0, y1: 256.0 }]);
        assert!(relevant_regions(&ex, 7, 7).iter().all(|r| *r));
        let rate = attention_hit_rate(&[ex], 7, 7, 1, |_| AttentionMap::uniform(49));
        assert_eq!(rate.rate(), 1.0);
    }

    #[test]
    fn half_cell_overlap_is_relevant() {
        let ex = example(vec![BBox { x0: 16.0, y0: 16.0, x1: 32.0, y1: 48.0 }]);
        let rel = relevant_regions(&ex, 7, 7);
        assert!(rel[0]);
        assert_eq!(rel.iter().filter(|r| **r).count(), 1);
        let ex = example(vec![BBox { x0: 16.0, y0: 16.0, x1: 31.9, y1: 48.0 }]);
        assert!(!relevant_regions(&ex, 7, 7)[0]);
    }

    #[test]
    fn examples_without_relevant_regions_are_excluded() {
        let exs = vec![example(vec![]), example(vec![BBox { x0: 16.0, y0: 16.0, x1: 48.0, y1: 48.0 }])];
        let mut weights = vec![0.0; 49];
        weights[0] = 1.0;
        let rate = attention_hit_rate(&exs, 7, 7, 1, |_| AttentionMap { weights: weights.clone() });
        assert_eq!((rate.hits, rate.evaluated, rate.excluded), (1, 1, 1));
        assert_eq!(rate.evaluated + rate.excluded, exs.len());
    }

    #[test]
    fn analytic_random_rates() {
        assert!((random_hit_probability(49, 7, 1) - 7.0 / 49.0).abs() < 1e-15);
        let top3 = 1.0 - (42.0 * 41.0 * 40.0) / (49.0 * 48.0 * 47.0);
        assert!((random_hit_probability(49, 7, 3) - top3).abs() < 1e-12);
        assert_eq!(random_hit_probability(49, 49, 1), 1.0);
    }

    #[test]
    fn pgm_scales_to_max() {
        let mut w = vec![0.01; 49];
        w[3] = 0.5;
        let bytes = attention_pgm(&AttentionMap { weights: w }, 7, 7);
        let header = b"P5\n7 7\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes[header.len() + 3], 255);
        assert_eq!(bytes[header.len()], 5);
        assert_eq!(bytes.len(), header.len() + 49);
    }
}
