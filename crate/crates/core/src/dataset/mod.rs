//! Turning shop-the-look annotations into complete-the-look examples.
//!
//! Each (scene, product, box) pair is cropped so that the product and a small
//! margin around it are removed: the box is expanded, the complement
//! rectangles above/below (and left/right for home scenes) are enumerated, and
//! the largest one is kept if it covers enough of the original scene.

mod manifest;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use manifest::{read_stl_manifest, write_stl_manifest, CtlManifest, CTL_FORMAT_VERSION};
pub use split::{read_split_file, split_scenes, write_split_file, Split, SplitAssignment};
pub use synth::{synth_dataset, SynthOutput, SynthParams, SynthProduct, SynthRule, PALETTE};

use crate::error::{Error, Result};
use crate::geometry::{expand_bbox, BBox, Category, CropSide, CtlExample, ImageDims, ScenePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// Only the regions above and below the product.
    Fashion,
    /// All four complement regions.
    Home,
}

impl std::str::FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fashion" => Ok(CropMode::Fashion),
            "home" => Ok(CropMode::Home),
            other => Err(Error::InvalidConfig(format!(
                "unknown crop mode {other:?} (expected fashion or home)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub expand_frac: f64,
    pub min_area_frac: f64,
    pub mode: CropMode,
    pub excluded_categories: BTreeSet<String>,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            expand_frac: 0.05,
            min_area_frac: 0.2,
            mode: CropMode::Fashion,
            excluded_categories: BTreeSet::from(["dresses".to_string()]),
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.expand_frac) {
            return Err(Error::InvalidConfig(format!(
                "expand_frac {} outside [0, 0.5)",
                self.expand_frac
            )));
        }
        if !(self.min_area_frac > 0.0 && self.min_area_frac < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "min_area_frac {} outside (0, 1)",
                self.min_area_frac
            )));
        }
        Ok(())
    }

    fn is_excluded(&self, category: &str) -> bool {
        self.excluded_categories
            .iter()
            .any(|c| c.eq_ignore_ascii_case(category))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Category,
    TooSmall,
}

/// Result of cropping one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Derived {
    Keep { crop: BBox, side: CropSide },
    Discard(DiscardReason),
}

/// Complement rectangles of `ebox` inside the image, in tie-break order.
/// Zero-area candidates are omitted.
pub fn candidate_crops(dims: ImageDims, ebox: &BBox, mode: CropMode) -> Vec<(CropSide, BBox)> {
    let (w, h) = (dims.width as f64, dims.height as f64);
    let mut out = Vec::with_capacity(4);
    let mut push = |side, b: BBox| {
        if b.x0 < b.x1 && b.y0 < b.y1 {
            out.push((side, b));
        }
    };
    push(CropSide::Top, BBox { x0: 0.0, y0: 0.0, x1: w, y1: ebox.y0 });
    push(CropSide::Bottom, BBox { x0: 0.0, y0: ebox.y1, x1: w, y1: h });
    if mode == CropMode::Home {
        push(CropSide::Left, BBox { x0: 0.0, y0: 0.0, x1: ebox.x0, y1: h });
        push(CropSide::Right, BBox { x0: ebox.x1, y0: 0.0, x1: w, y1: h });
    }
    out
}

pub fn derive_ctl_example(pair: &ScenePair, cfg: &CropConfig) -> Result<Derived> {
    if cfg.is_excluded(&pair.category) {
        return Ok(Derived::Discard(DiscardReason::Category));
    }
    let dims = pair.scene_dims;
    pair.bbox.validate_within(dims)?;
    let ebox = expand_bbox(&pair.bbox, dims, cfg.expand_frac)?;

    // candidates arrive in priority order, so a strict comparison keeps the
    // earliest side among equal areas
    let mut best: Option<(CropSide, BBox)> = None;
    for (side, region) in candidate_crops(dims, &ebox, cfg.mode) {
        if best.map_or(true, |(_, b)| region.area() > b.area()) {
            best = Some((side, region));
        }
    }
    Ok(match best {
        Some((side, crop)) if crop.area() >= cfg.min_area_frac * dims.area() => {
            Derived::Keep { crop, side }
        }
        _ => Derived::Discard(DiscardReason::TooSmall),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtlStats {
    pub input_pairs: usize,
    pub kept: usize,
    pub scenes: usize,
    pub products: usize,
    pub discarded: BTreeMap<DiscardReason, usize>,
}

impl CtlStats {
    pub fn discarded_total(&self) -> usize {
        self.discarded.values().sum()
    }
}

/// Crops every pair. Output order equals input order.
pub fn generate_ctl(pairs: &[ScenePair], cfg: &CropConfig, verify_images: bool) -> Result<CtlManifest> {
    cfg.validate()?;
    if verify_images {
        for p in pairs {
            for path in [&p.scene_path, &p.product_path] {
                if !path.is_file() {
                    return Err(Error::MissingImage(path.clone()));
                }
            }
        }
    }

    let mut stats = CtlStats {
        input_pairs: pairs.len(),
        discarded: BTreeMap::from([(DiscardReason::Category, 0), (DiscardReason::TooSmall, 0)]),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for p in pairs {
        match derive_ctl_example(p, cfg)? {
            Derived::Keep { crop, side } => kept.push((p, crop, side)),
            Derived::Discard(reason) => *stats.discarded.entry(reason).or_default() += 1,
        }
    }

    let names: BTreeSet<&str> = kept.iter().map(|(p, _, _)| p.category.as_str()).collect();
    let categories: Vec<Category> = names
        .into_iter()
        .enumerate()
        .map(|(id, name)| Category { id, name: name.to_string() })
        .collect();
    let id_of: BTreeMap<&str, usize> = categories.iter().map(|c| (c.name.as_str(), c.id)).collect();

    let examples: Vec<CtlExample> = kept
        .into_iter()
        .map(|(p, crop, side)| CtlExample {
            category: Category {
                id: id_of[p.category.as_str()],
                name: p.category.clone(),
            },
            pair: p.clone(),
            crop,
            crop_side: side,
        })
        .collect();

    stats.kept = examples.len();
    stats.scenes = examples
        .iter()
        .map(|e| e.pair.scene_id.as_str())
        .collect::<BTreeSet<_>>()
        .len();
    stats.products = examples
        .iter()
        .map(|e| e.pair.product_id.as_str())
        .collect::<BTreeSet<_>>()
        .len();

    Ok(CtlManifest {
        crop_config: cfg.clone(),
        categories,
        stats,
        examples,
    })
}

/// Convenience wrapper: read an STL manifest from disk and crop it.
pub fn generate_ctl_from_file(stl: &Path, cfg: &CropConfig, verify_images: bool) -> Result<CtlManifest> {
    let pairs = read_stl_manifest(stl)?;
    generate_ctl(&pairs, cfg, verify_images)
}
