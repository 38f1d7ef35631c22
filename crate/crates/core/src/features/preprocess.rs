use std::path::Path;

use image::{imageops, RgbImage};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageDims};

pub const RESIZE_SIZE: u32 = 256;
pub const CROP_SIZE: u32 = 224;
const MAX_OFFSET: u32 = RESIZE_SIZE - CROP_SIZE;

/// A decoded image resized to `RESIZE_SIZE` square, with the hash of its RGB
/// bytes (the feature-cache key).
#[derive(Debug, Clone)]
pub struct ResizedImage {
    pub image: RgbImage,
    pub hash: String,
}

/// `CROP_SIZE x CROP_SIZE x 3`, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub size: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub(crate) fn empty() -> Self {
        Self { size: 0, data: Vec::new() }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.size + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessMode {
    Eval,
    Train(Augmentation),
}

/// Random horizontal mirror plus crop offset for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Augmentation {
    pub mirror: bool,
    pub offset_x: u32,
    pub offset_y: u32,
}

/// Mirror with probability 0.5, then a uniform crop offset on each axis.
pub fn draw_augmentation<R: Rng + ?Sized>(rng: &mut R) -> Augmentation {
    let mirror = rng.gen_bool(0.5);
    let offset_x = rng.gen_range(0..=MAX_OFFSET);
    let offset_y = rng.gen_range(0..=MAX_OFFSET);
    Augmentation { mirror, offset_x, offset_y }
}

pub fn content_hash(img: &RgbImage) -> String {
    let digest = Sha256::digest(img.as_raw());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn resize_for_backbone(img: &RgbImage) -> ResizedImage {
    let image = if img.dimensions() == (RESIZE_SIZE, RESIZE_SIZE) {
        img.clone()
    } else {
        imageops::resize(img, RESIZE_SIZE, RESIZE_SIZE, imageops::FilterType::Triangle)
    };
    let hash = content_hash(&image);
    ResizedImage { image, hash }
}

/// Decodes `path`, optionally crops to `crop` (rasterized outward), and
/// resizes for the backbone.
pub fn load_resized(path: &Path, crop: Option<&BBox>) -> Result<ResizedImage> {
    if !path.is_file() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let img = match crop {
        Some(b) => {
            let dims = ImageDims::new(img.width(), img.height())?;
            let (x, y, w, h) = b.to_pixel_rect(dims);
            imageops::crop_imm(&img, x, y, w, h).to_image()
        }
        None => img,
    };
    Ok(resize_for_backbone(&img))
}

/// Crops a `RESIZE_SIZE` image to the network input size: the center in eval
/// mode, the drawn offset (after optional mirroring) in train mode.
pub fn preprocess(img: &RgbImage, mode: PreprocessMode) -> Result<ImageTensor> {
    if img.dimensions() != (RESIZE_SIZE, RESIZE_SIZE) {
        return Err(Error::Shape(format!(
            "expected a {RESIZE_SIZE}x{RESIZE_SIZE} image, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let (mirror, ox, oy) = match mode {
        PreprocessMode::Eval => (false, MAX_OFFSET / 2, MAX_OFFSET / 2),
        PreprocessMode::Train(a) => (a.mirror, a.offset_x, a.offset_y),
    };
    let size = CROP_SIZE as usize;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..CROP_SIZE {
        for x in 0..CROP_SIZE {
            // mirror the whole image first, then crop
            let sx = if mirror { RESIZE_SIZE - 1 - (ox + x) } else { ox + x };
            let p = img.get_pixel(sx, oy + y).0;
            data.extend(p.iter().map(|&c| c as f32 / 255.0));
        }
    }
    Ok(ImageTensor { size, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn gradient_image() -> RgbImage {
        RgbImage::from_fn(RESIZE_SIZE, RESIZE_SIZE, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]))
    }

    #[test]
    fn eval_takes_center_crop() {
        let img = gradient_image();
        let t = preprocess(&img, PreprocessMode::Eval).unwrap();
        assert_eq!(t.data.len(), 224 * 224 * 3);
        assert_eq!(t.pixel(0, 0), [16.0 / 255.0, 16.0 / 255.0, 0.0]);
        assert_eq!(t.pixel(223, 223)[0], 239.0 / 255.0);
        assert_eq!(t, preprocess(&img, PreprocessMode::Eval).unwrap());
    }

    #[test]
    fn train_mode_is_reproducible() {
        let img = gradient_image();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            preprocess(&img, PreprocessMode::Train(draw_augmentation(&mut rng))).unwrap()
        };
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn mirrored_crop_reads_from_the_right() {
        let img = gradient_image();
        let a = Augmentation { mirror: true, offset_x: 0, offset_y: 0 };
        let t = preprocess(&img, PreprocessMode::Train(a)).unwrap();
        assert_eq!(t.pixel(0, 0)[0], 255.0 / 255.0);
    }

    #[test]
    fn augmentations_cover_all_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seen: BTreeSet<_> = (0..60_000).map(|_| draw_augmentation(&mut rng)).collect();
        assert_eq!(seen.len(), 33 * 33 * 2);
    }

    #[test]
    fn wrong_size_is_shape_error() {
        let img = RgbImage::new(10, 10);
        assert_eq!(preprocess(&img, PreprocessMode::Eval).unwrap_err().name(), "ShapeError");
    }

    #[test]
    fn hash_depends_on_pixels_only() {
        let a = resize_for_backbone(&RgbImage::from_pixel(20, 20, Rgb([1, 2, 3])));
        let b = resize_for_backbone(&RgbImage::from_pixel(20, 20, Rgb([1, 2, 3])));
        let c = resize_for_backbone(&RgbImage::from_pixel(20, 20, Rgb([1, 2, 4])));
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
        assert_eq!(a.hash.len(), 64);
    }

    #[test]
    fn undecodable_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert_eq!(load_resized(&p, None).unwrap_err().name(), "DecodeError");
        assert_eq!(load_resized(&dir.path().join("nope.png"), None).unwrap_err().name(), "MissingImage");
    }
}
