//! Small synthetic shop-the-look datasets with a planted compatibility rule.
//!
//! Scenes are flat backgrounds with a few distractor rectangles; products are
//! flat patches of a dominant palette color crossed by a product-specific
//! accent band. Under [`SynthRule::ColorMatch`] a product is compatible with a
//! scene iff its dominant color equals the scene background. When pasting is
//! enabled, each positive product is drawn into its scene at the recorded box,
//! which lets a model "cheat" by spotting the product instead of learning the
//! rule. With a palette smaller than the product count, only the accent band
//! separates same-color products, and a pasted accent is exactly that cue.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::write_stl_manifest;
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageDims, ScenePair};

const LEVELS: [u8; 3] = [38, 128, 217];

/// 27 colors on a 3x3x3 RGB grid; the first `n_colors` entries are used.
pub const PALETTE: [[u8; 3]; 27] = {
    let mut p = [[0u8; 3]; 27];
    let mut i = 0;
    while i < 27 {
        p[i] = [LEVELS[i % 3], LEVELS[(i / 3) % 3], LEVELS[i / 9]];
        i += 1;
    }
    p
};

const CATEGORY_NAMES: [&str; 10] = [
    "tops", "bottoms", "shoes", "bags", "hats", "eyewear", "jewelry", "scarves", "watches", "belts",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthRule {
    /// Product color equals the scene background.
    ColorMatch,
}

impl SynthRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            SynthRule::ColorMatch => "color-match",
        }
    }

    /// The product color compatible with background `scene_color`.
    pub fn partner(&self, scene_color: usize) -> usize {
        match self {
            SynthRule::ColorMatch => scene_color,
        }
    }

    pub fn compatible(&self, scene_color: usize, product_color: usize) -> bool {
        self.partner(scene_color) == product_color
    }
}

impl std::str::FromStr for SynthRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color-match" => Ok(SynthRule::ColorMatch),
            other => Err(Error::InvalidConfig(format!("unknown synthetic rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_scenes: usize,
    /// Products per category.
    pub n_products: usize,
    pub n_categories: usize,
    /// Scene side length in pixels; product images are half as large.
    pub image_size: u32,
    pub paste_product_into_scene: bool,
    pub rule: SynthRule,
    pub seed: u64,
    pub pairs_per_scene: usize,
    pub n_distractors: usize,
    /// Fraction of each product image covered by its accent band.
    pub accent_frac: f64,
    /// Palette colors in use, capped by `n_products` and the palette length.
    /// Fewer colors than products makes several products per category share
    /// a color, so only the accent band tells them apart.
    pub palette_size: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            n_products: 20,
            n_categories: 5,
            image_size: 96,
            paste_product_into_scene: false,
            rule: SynthRule::ColorMatch,
            seed: 0,
            pairs_per_scene: 2,
            n_distractors: 3,
            accent_frac: 0.25,
            palette_size: 20,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_scenes", self.n_scenes),
            ("n_products", self.n_products),
            ("n_categories", self.n_categories),
            ("pairs_per_scene", self.pairs_per_scene),
            ("palette_size", self.palette_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.image_size < 16 {
            return Err(Error::InvalidConfig("image_size must be at least 16".into()));
        }
        if !(0.0..0.5).contains(&self.accent_frac) {
            return Err(Error::InvalidConfig("accent_frac must be in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn n_colors(&self) -> usize {
        self.palette_size.min(self.n_products).min(PALETTE.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthProduct {
    pub id: String,
    pub category: String,
    pub color: usize,
    pub accent: [u8; 3],
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub pairs: Vec<ScenePair>,
    pub products: Vec<SynthProduct>,
    /// Palette index of each scene's background.
    pub scene_colors: BTreeMap<String, usize>,
}

pub fn category_name(k: usize) -> String {
    CATEGORY_NAMES
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("category{k}"))
}

fn product_image(color: [u8; 3], accent: [u8; 3], size: u32, accent_frac: f64) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb(color));
    let band = (accent_frac * size as f64).round() as u32;
    let y0 = (size - band) / 2;
    for y in y0..y0 + band {
        for x in 0..size {
            img.put_pixel(x, y, Rgb(accent));
        }
    }
    img
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: [u8; 3]) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Writes `scenes/`, `products/` and `stl.jsonl` under `out_dir`.
pub fn synth_dataset(params: &SynthParams, out_dir: &Path) -> Result<SynthOutput> {
    params.validate()?;
    let scenes_dir = out_dir.join("scenes");
    let products_dir = out_dir.join("products");
    for d in [&scenes_dir, &products_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n_colors = params.n_colors();
    let size = params.image_size;
    let product_size = (size / 2).max(8);

    let mut products = Vec::new();
    // by_color[category][color] -> indices into `products`
    let mut by_color = vec![vec![Vec::new(); n_colors]; params.n_categories];
    for k in 0..params.n_categories {
        let cat = category_name(k);
        for j in 0..params.n_products {
            let color = j % n_colors;
            let accent = [rng.gen(), rng.gen(), rng.gen()];
            let id = format!("{cat}-{j:02}");
            let path = products_dir.join(format!("{id}.png"));
            let img = product_image(PALETTE[color], accent, product_size, params.accent_frac);
            save_png(&img, &path)?;
            by_color[k][color].push(products.len());
            products.push(SynthProduct { id, category: cat.clone(), color, accent, path });
        }
    }

    let dims = ImageDims::new(size, size)?;
    let mut pairs = Vec::new();
    let mut scene_colors = BTreeMap::new();
    let per_scene = params.pairs_per_scene.min(params.n_categories);
    let band = size as f64 / per_scene as f64;
    for s in 0..params.n_scenes {
        let scene_id = format!("scene-{s:04}");
        let bg = rng.gen_range(0..n_colors);
        let mut img = RgbImage::from_pixel(size, size, Rgb(PALETTE[bg]));
        for _ in 0..params.n_distractors {
            let w = rng.gen_range(size / 12..=size / 5).max(1);
            let h = rng.gen_range(size / 12..=size / 5).max(1);
            let x = rng.gen_range(0..size - w);
            let y = rng.gen_range(0..size - h);
            let mut c = rng.gen_range(0..PALETTE.len() - 1);
            if c >= bg {
                c += 1;
            }
            fill_rect(&mut img, x, y, w, h, PALETTE[c]);
        }

        let cats = sample(&mut rng, params.n_categories, per_scene).into_vec();
        let path = scenes_dir.join(format!("{scene_id}.png"));
        for (slot, &k) in cats.iter().enumerate() {
            let candidates = &by_color[k][params.rule.partner(bg)];
            let product = &products[candidates[rng.gen_range(0..candidates.len())]];

            let bh = (rng.gen_range(0.5..0.8) * band).min(0.45 * size as f64).floor().max(2.0);
            let bw = (rng.gen_range(0.3..0.7) * size as f64).floor().max(2.0);
            let y0 = (slot as f64 * band + rng.gen_range(0.0..=(band - bh).max(0.0))).floor();
            let x0 = rng.gen_range(0.0..=(size as f64 - bw)).floor();
            let bbox = BBox::new(x0, y0, x0 + bw, (y0 + bh).min(size as f64))?;

            if params.paste_product_into_scene {
                let (px, py, pw, ph) = bbox.to_pixel_rect(dims);
                let patch = product_image(PALETTE[product.color], product.accent, product_size, params.accent_frac);
                let patch = imageops::resize(&patch, pw, ph, imageops::FilterType::Nearest);
                imageops::replace(&mut img, &patch, px as i64, py as i64);
            }
            pairs.push(ScenePair {
                scene_id: scene_id.clone(),
                product_id: product.id.clone(),
                scene_path: path.clone(),
                product_path: product.path.clone(),
                scene_dims: dims,
                bbox,
                category: product.category.clone(),
            });
        }
        save_png(&img, &path)?;
        scene_colors.insert(scene_id, bg);
    }

    let manifest_path = out_dir.join("stl.jsonl");
    write_stl_manifest(&manifest_path, &pairs)?;
    Ok(SynthOutput { manifest_path, pairs, products, scene_colors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(paste: bool, seed: u64) -> SynthParams {
        SynthParams {
            n_scenes: 6,
            n_products: 4,
            n_categories: 3,
            image_size: 48,
            paste_product_into_scene: paste,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn palette_is_distinct() {
        let mut seen = std::collections::BTreeSet::new();
        for c in PALETTE {
            assert!(seen.insert(c));
        }
    }

    #[test]
    fn positives_follow_rule() {
        let dir = tempfile::tempdir().unwrap();
        let out = synth_dataset(&small(false, 3), dir.path()).unwrap();
        let color_of: BTreeMap<_, _> = out.products.iter().map(|p| (p.id.clone(), p.color)).collect();
        assert_eq!(out.pairs.len(), 12);
        for p in &out.pairs {
            let bg = out.scene_colors[&p.scene_id];
            assert!(SynthRule::ColorMatch.compatible(bg, color_of[&p.product_id]));
            assert!(p.bbox.validate_within(p.scene_dims).is_ok());
        }
    }

    #[test]
    fn pasted_product_is_visible_at_bbox() {
        let dir = tempfile::tempdir().unwrap();
        let params = small(true, 5);
        let out = synth_dataset(&params, dir.path()).unwrap();
        let by_id: BTreeMap<_, _> = out.products.iter().map(|p| (p.id.clone(), p)).collect();
        for p in &out.pairs {
            let img = image::open(&p.scene_path).unwrap().to_rgb8();
            let prod = by_id[&p.product_id];
            let (x, y, w, h) = p.bbox.to_pixel_rect(p.scene_dims);
            let mut accent_pixels = 0;
            let mut body_pixels = 0;
            for yy in y..y + h {
                for xx in x..x + w {
                    let px = img.get_pixel(xx, yy).0;
                    accent_pixels += (px == prod.accent) as usize;
                    body_pixels += (px == PALETTE[prod.color]) as usize;
                }
            }
            assert_eq!(accent_pixels + body_pixels, (w * h) as usize);
            assert!(accent_pixels > 0);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_dataset(&small(true, 9), a.path()).unwrap();
        synth_dataset(&small(true, 9), b.path()).unwrap();
        for rel in ["stl.jsonl", "scenes/scene-0003.png", "products/tops-01.png"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn zero_counts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = SynthParams { n_scenes: 0, ..small(false, 0) };
        assert!(synth_dataset(&p, dir.path()).is_err());
    }
}
