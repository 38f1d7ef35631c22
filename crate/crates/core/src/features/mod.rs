//! Frozen visual features: one global vector and one spatial map per image.

mod cache;
mod preprocess;
mod toy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use cache::{read_cache, write_cache, FEATURE_CACHE_VERSION};
pub use preprocess::{
    content_hash, draw_augmentation, load_resized, preprocess, resize_for_backbone, Augmentation,
    ImageTensor, PreprocessMode, ResizedImage, CROP_SIZE, RESIZE_SIZE,
};
pub use toy::ToyBackbone;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Global vector length.
    pub d1: usize,
    /// Map grid width.
    pub w: usize,
    /// Map grid height.
    pub h: usize,
    /// Channels per map cell.
    pub d2: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { d1: 64, w: 7, h: 7, d2: 32 }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.w == 0 || self.h == 0 || self.d2 == 0 {
            return Err(Error::InvalidConfig(format!("feature spec {self:?} has a zero dimension")));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFeature(pub Vec<f32>);

/// `w x h` grid of `d2`-vectors, row-major: region `i = y * w + x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub w: usize,
    pub h: usize,
    pub d2: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn region(&self, i: usize) -> &[f32] {
        &self.values[i * self.d2..(i + 1) * self.d2]
    }

    pub fn regions(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.d2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub global: GlobalFeature,
    pub map: FeatureMap,
}

impl ImageFeatures {
    pub fn check(&self, spec: &FeatureSpec) -> Result<()> {
        let m = &self.map;
        if self.global.0.len() != spec.d1
            || m.w != spec.w
            || m.h != spec.h
            || m.d2 != spec.d2
            || m.values.len() != spec.regions() * spec.d2
        {
            return Err(Error::Shape(format!(
                "features ({}, {}x{}x{}) do not match spec {spec:?}",
                self.global.0.len(),
                m.w,
                m.h,
                m.d2
            )));
        }
        let finite = self.global.0.iter().chain(&m.values).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Shape("non-finite feature value".into()));
        }
        Ok(())
    }
}

/// Cached features keyed by image content hash.
pub type FeatureStore = BTreeMap<String, ImageFeatures>;

/// Frozen feature extractor.
#[derive(Debug, Clone)]
pub enum Backbone {
    Toy(ToyBackbone),
    Precomputed { spec: FeatureSpec, store: FeatureStore },
}

impl Backbone {
    pub fn spec(&self) -> FeatureSpec {
        match self {
            Backbone::Toy(t) => t.spec(),
            Backbone::Precomputed { spec, .. } => *spec,
        }
    }

    /// `key` is the content hash of the resized image; the toy backbone
    /// ignores it and works from the pixels.
    pub fn extract(&self, tensor: &ImageTensor, key: &str) -> Result<ImageFeatures> {
        match self {
            Backbone::Toy(t) => t.extract(tensor),
            Backbone::Precomputed { spec, store } => {
                let f = store
                    .get(key)
                    .cloned()
                    .ok_or_else(|| Error::CacheMiss(key.to_string()))?;
                f.check(spec)?;
                Ok(f)
            }
        }
    }

    /// Eval-mode features for an already resized image.
    pub fn features_for(&self, img: &ResizedImage) -> Result<ImageFeatures> {
        match self {
            // the cache lookup never needs the pixels
            Backbone::Precomputed { .. } => self.extract(&ImageTensor::empty(), &img.hash),
            Backbone::Toy(_) => {
                let tensor = preprocess(&img.image, PreprocessMode::Eval)?;
                self.extract(&tensor, &img.hash)
            }
        }
    }
}
