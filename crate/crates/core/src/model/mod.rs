//! The trainable compatibility head.
//!
//! Scenes and products are embedded into a shared unit-norm style space. The
//! global distance compares whole-scene and product embeddings; the local
//! distance compares every scene region with the product, weighted by a
//! category-guided softmax over regions. The hybrid distance averages the two.
//! All three lie in `[0, 4]`.

mod projection;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use projection::{
    ForwardMode, Projection, ProjectionGrads, ProjectionTape, BN_EPS, BN_MOMENTUM, DROPOUT_RATE,
    MIN_NORM,
};

use crate::error::{Error, Result};
use crate::features::{FeatureSpec, GlobalFeature, ImageFeatures};

/// Which distance components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Global + attentive local (the default model).
    #[serde(rename = "G+L")]
    Hybrid,
    /// Global distance only.
    #[serde(rename = "G")]
    Global,
    /// Attentive local distance only.
    #[serde(rename = "L")]
    Local,
    /// Global + local with uniform region weights.
    #[serde(rename = "G+L0")]
    UniformLocal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Global, Variant::Local, Variant::UniformLocal, Variant::Hybrid];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Hybrid => "G+L",
            Variant::Global => "G",
            Variant::Local => "L",
            Variant::UniformLocal => "G+L0",
        }
    }

    pub fn uses_global(&self) -> bool {
        !matches!(self, Variant::Local)
    }

    pub fn uses_local(&self) -> bool {
        !matches!(self, Variant::Global)
    }

    pub fn uses_attention(&self) -> bool {
        matches!(self, Variant::Hybrid | Variant::Local)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "G+L" | "hybrid" => Ok(Variant::Hybrid),
            "G" | "global" => Ok(Variant::Global),
            "L" | "local" => Ok(Variant::Local),
            "G+L0" | "uniform" => Ok(Variant::UniformLocal),
            other => Err(Error::InvalidConfig(format!("unknown ablation variant {other:?}"))),
        }
    }
}

/// Softmax weights over scene regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn uniform(n: usize) -> Self {
        Self { weights: vec![1.0 / n as f64; n] }
    }

    /// Region indices by descending weight; equal weights keep index order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.weights.len()).collect();
        idx.sort_by(|a, b| self.weights[*b].total_cmp(&self.weights[*a]).then(a.cmp(b)));
        idx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityScore {
    pub d_global: f64,
    pub d_local: f64,
    pub d_hybrid: f64,
    pub attention: AttentionMap,
}

impl CompatibilityScore {
    fn new(d_global: f64, d_local: f64, attention: AttentionMap) -> Self {
        Self {
            d_global,
            d_local,
            d_hybrid: 0.5 * (d_global + d_local),
            attention,
        }
    }

    /// The distance a given variant ranks by.
    pub fn distance(&self, variant: Variant) -> f64 {
        match variant {
            Variant::Global => self.d_global,
            Variant::Local => self.d_local,
            Variant::Hybrid | Variant::UniformLocal => self.d_hybrid,
        }
    }
}

pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `|f_s - f_p|^2` for unit vectors.
pub fn d_global(scene: ArrayView1<f64>, product: ArrayView1<f64>) -> f64 {
    squared_distance(scene, product)
}

/// Softmax of `-|k_i - e_c|^2` over regions, max-shifted for stability.
pub fn attention_weights(keys: ArrayView2<f64>, category: ArrayView1<f64>) -> AttentionMap {
    let logits: Vec<f64> = keys.rows().into_iter().map(|k| -squared_distance(k, category)).collect();
    AttentionMap { weights: softmax(&logits) }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Attention-weighted sum of region-to-product squared distances.
pub fn d_local(regions: ArrayView2<f64>, product: ArrayView1<f64>, attention: &AttentionMap) -> f64 {
    regions
        .rows()
        .into_iter()
        .zip(&attention.weights)
        .map(|(r, a)| a * squared_distance(r, product))
        .sum()
}

/// Eval-mode embeddings of one scene.
#[derive(Debug, Clone)]
pub struct SceneEmbedding {
    pub global: Array1<f64>,
    /// One row per region.
    pub regions: Array2<f64>,
    /// Region embeddings used only for attention.
    pub keys: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub spec: FeatureSpec,
    pub embed_dim: usize,
    pub n_categories: usize,
}

/// Three projection networks and the category table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityHead {
    pub spec: FeatureSpec,
    pub embed_dim: usize,
    /// Scene and product global vectors.
    pub global: Projection,
    /// Region embeddings compared with the product.
    pub local: Projection,
    /// Region embeddings compared with the category.
    pub attention: Projection,
    /// Raw category rows; normalized on read.
    pub categories: Array2<f64>,
}

pub(crate) fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

pub(crate) fn map_matrix(f: &ImageFeatures) -> Array2<f64> {
    Array2::from_shape_vec((f.map.w * f.map.h, f.map.d2), to_f64(&f.map.values))
        .expect("feature map shape checked")
}

fn normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if !(n >= MIN_NORM) {
        return Err(Error::DegenerateNorm(n));
    }
    Ok(&v / n)
}

impl CompatibilityHead {
    pub fn init(cfg: &HeadConfig, seed: u64) -> Result<Self> {
        cfg.spec.validate()?;
        if cfg.embed_dim == 0 || cfg.n_categories == 0 {
            return Err(Error::InvalidConfig("embedding size and category count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let d = cfg.embed_dim;
        let hidden = 4 * d;
        let global = Projection::init(cfg.spec.d1, hidden, d, &mut rng);
        let local = Projection::init(cfg.spec.d2, hidden, d, &mut rng);
        let attention = Projection::init(cfg.spec.d2, hidden, d, &mut rng);
        let categories =
            Array2::from_shape_simple_fn((cfg.n_categories, d), || rng.sample::<f64, _>(StandardNormal));
        Ok(Self { spec: cfg.spec, embed_dim: d, global, local, attention, categories })
    }

    pub fn n_categories(&self) -> usize {
        self.categories.nrows()
    }

    /// Unit-norm category embedding.
    pub fn category_embedding(&self, category: usize) -> Result<Array1<f64>> {
        if category >= self.n_categories() {
            return Err(Error::Shape(format!(
                "category {category} out of range for {} categories",
                self.n_categories()
            )));
        }
        normalize(self.categories.row(category))
    }

    pub fn embed_product(&self, g: &GlobalFeature) -> Result<Array1<f64>> {
        self.global.project_eval(&to_f64(&g.0))
    }

    pub fn embed_scene(&self, f: &ImageFeatures) -> Result<SceneEmbedding> {
        f.check(&self.spec)?;
        let global = self.global.project_eval(&to_f64(&f.global.0))?;
        let m = map_matrix(f);
        let regions = self.local.project_eval_rows(m.view())?;
        let keys = self.attention.project_eval_rows(m.view())?;
        Ok(SceneEmbedding { global, regions, keys })
    }

    pub fn attention_for(&self, scene: &SceneEmbedding, category: usize, variant: Variant) -> Result<AttentionMap> {
        if variant.uses_attention() {
            let e = self.category_embedding(category)?;
            Ok(attention_weights(scene.keys.view(), e.view()))
        } else {
            Ok(AttentionMap::uniform(scene.regions.nrows()))
        }
    }

    pub fn score_embedded(
        &self,
        scene: &SceneEmbedding,
        product: ArrayView1<f64>,
        category: usize,
        variant: Variant,
    ) -> Result<CompatibilityScore> {
        let attention = self.attention_for(scene, category, variant)?;
        let dg = d_global(scene.global.view(), product);
        let dl = d_local(scene.regions.view(), product, &attention);
        Ok(CompatibilityScore::new(dg, dl, attention))
    }

    /// Scores one scene/product pair. In train mode the scene's regions form
    /// one batch-norm batch and the two global vectors another; running
    /// statistics are left untouched.
    pub fn score_pair<R: Rng + ?Sized>(
        &self,
        scene: &ImageFeatures,
        product: &GlobalFeature,
        category: usize,
        variant: Variant,
        mode: ForwardMode<'_, R>,
    ) -> Result<CompatibilityScore> {
        match mode {
            ForwardMode::Eval => {
                let s = self.embed_scene(scene)?;
                let p = self.embed_product(product)?;
                self.score_embedded(&s, p.view(), category, variant)
            }
            ForwardMode::Train { rng, dropout } => {
                scene.check(&self.spec)?;
                if product.0.len() != self.spec.d1 {
                    return Err(Error::Shape("product feature length".into()));
                }
                let mut globals = Array2::zeros((2, self.spec.d1));
                globals.row_mut(0).assign(&Array1::from(to_f64(&scene.global.0)));
                globals.row_mut(1).assign(&Array1::from(to_f64(&product.0)));
                let g = self.global.forward(globals.view(), ForwardMode::Train { rng: &mut *rng, dropout })?.output;
                let m = map_matrix(scene);
                let regions = self.local.forward(m.view(), ForwardMode::Train { rng: &mut *rng, dropout })?.output;
                let keys = self.attention.forward(m.view(), ForwardMode::Train { rng: &mut *rng, dropout })?.output;
                let s = SceneEmbedding { global: g.row(0).to_owned(), regions, keys };
                self.score_embedded(&s, g.row(1), category, variant)
            }
        }
    }
}
