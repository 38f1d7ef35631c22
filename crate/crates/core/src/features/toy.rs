//! Deterministic stand-in for a pretrained CNN.
//!
//! Every grid cell is summarized by 15 color statistics (per-channel mean and
//! standard deviation plus a 3-bin histogram per channel) and mapped to `d2`
//! channels by a fixed seeded Gaussian matrix; the global vector does the
//! same over the whole image with a separate `d1`-column matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FeatureMap, FeatureSpec, GlobalFeature, ImageFeatures, ImageTensor, CROP_SIZE};
use crate::error::{Error, Result};

const N_STATS: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    spec: FeatureSpec,
    seed: u64,
    global_proj: Vec<f64>,
    cell_proj: Vec<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (N_STATS as f64).sqrt();
    (0..N_STATS * cols)
        .map(|_| StandardNormal.sample(rng))
        .map(|v: f64| v * scale)
        .collect()
}

impl ToyBackbone {
    pub fn new(spec: FeatureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let global_proj = gaussian_matrix(&mut rng, spec.d1);
        let cell_proj = gaussian_matrix(&mut rng, spec.d2);
        Ok(Self { spec, seed, global_proj, cell_proj })
    }

    pub fn spec(&self) -> FeatureSpec {
        self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn extract(&self, t: &ImageTensor) -> Result<ImageFeatures> {
        let size = CROP_SIZE as usize;
        if t.size != size || t.data.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "expected a {size}x{size}x3 tensor, got size {} with {} values",
                t.size,
                t.data.len()
            )));
        }
        let FeatureSpec { d1, w, h, d2 } = self.spec;
        let global = project(&region_stats(t, 0..size, 0..size), &self.global_proj, d1);

        let mut values = Vec::with_capacity(w * h * d2);
        for gy in 0..h {
            let ys = gy * size / h..(gy + 1) * size / h;
            for gx in 0..w {
                let xs = gx * size / w..(gx + 1) * size / w;
                values.extend(project(&region_stats(t, xs, ys.clone()), &self.cell_proj, d2));
            }
        }
        Ok(ImageFeatures {
            global: GlobalFeature(global),
            map: FeatureMap { w, h, d2, values },
        })
    }
}

fn project(stats: &[f64; N_STATS], proj: &[f64], cols: usize) -> Vec<f32> {
    (0..cols)
        .map(|c| {
            stats
                .iter()
                .enumerate()
                .map(|(r, s)| s * proj[r * cols + c])
                .sum::<f64>() as f32
        })
        .collect()
}

fn region_stats(t: &ImageTensor, xs: std::ops::Range<usize>, ys: std::ops::Range<usize>) -> [f64; N_STATS] {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut hist = [0.0f64; 9];
    let mut n = 0usize;
    for y in ys {
        for x in xs.clone() {
            for (c, v) in t.pixel(x, y).into_iter().enumerate() {
                let v = v as f64;
                sum[c] += v;
                sq[c] += v * v;
                let bin = ((v * 3.0) as usize).min(2);
                hist[c * 3 + bin] += 1.0;
            }
            n += 1;
        }
    }
    let mut out = [0.0f64; N_STATS];
    if n == 0 {
        return out;
    }
    let n = n as f64;
    for c in 0..3 {
        let mean = sum[c] / n;
        out[c] = mean;
        out[3 + c] = (sq[c] / n - mean * mean).max(0.0).sqrt();
    }
    for (o, hv) in out[6..].iter_mut().zip(hist) {
        *o = hv / n;
    }
    out
}
