//! Pixel-space rectangles and the shared scene/product records.
//!
//! Boxes carry real-valued edges with inclusive-exclusive semantics, so a box
//! `(0, 0, 10, 10)` covers exactly 100 square pixels. Rasterization to integer
//! pixels only happens when an image is actually cropped (see
//! [`BBox::to_pixel_rect`]).

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidBox(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    /// The full image as a box.
    pub fn full_box(&self) -> BBox {
        BBox {
            x0: 0.0,
            y0: 0.0,
            x1: self.width as f64,
            y1: self.height as f64,
        }
    }
}

/// Axis-aligned box in absolute pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::InvalidBox(format!(
                "({}, {}, {}, {}) needs x0 < x1 and y0 < y1",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }

    /// Checks that the box lies inside `dims`.
    pub fn validate_within(&self, dims: ImageDims) -> Result<()> {
        self.validate()?;
        if self.x0 < 0.0
            || self.y0 < 0.0
            || self.x1 > dims.width as f64
            || self.y1 > dims.height as f64
        {
            return Err(Error::InvalidBox(format!(
                "({}, {}, {}, {}) exceeds {}x{}",
                self.x0, self.y0, self.x1, self.y1, dims.width, dims.height
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Intersection, or `None` when the boxes share no area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        self.intersection(other).map_or(0.0, |b| b.area())
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn scale(&self, k: f64) -> BBox {
        BBox {
            x0: self.x0 * k,
            y0: self.y0 * k,
            x1: self.x1 * k,
            y1: self.y1 * k,
        }
    }

    /// Re-expresses the box relative to the origin of `frame`.
    pub fn relative_to(&self, frame: &BBox) -> BBox {
        BBox {
            x0: self.x0 - frame.x0,
            y0: self.y0 - frame.y0,
            x1: self.x1 - frame.x0,
            y1: self.y1 - frame.y0,
        }
    }

    /// Divides by the image size; the manifest stores boxes this way.
    pub fn normalized(&self, dims: ImageDims) -> BBox {
        let (w, h) = (dims.width as f64, dims.height as f64);
        BBox {
            x0: self.x0 / w,
            y0: self.y0 / h,
            x1: self.x1 / w,
            y1: self.y1 / h,
        }
    }

    pub fn denormalized(&self, dims: ImageDims) -> BBox {
        let (w, h) = (dims.width as f64, dims.height as f64);
        BBox {
            x0: self.x0 * w,
            y0: self.y0 * h,
            x1: self.x1 * w,
            y1: self.y1 * h,
        }
    }

    /// Integer pixel rectangle `(x, y, width, height)`: floor for the low
    /// edges, ceil for the high edges, clipped to the image.
    pub fn to_pixel_rect(&self, dims: ImageDims) -> (u32, u32, u32, u32) {
        let x0 = self.x0.floor().clamp(0.0, dims.width as f64) as u32;
        let y0 = self.y0.floor().clamp(0.0, dims.height as f64) as u32;
        let x1 = self.x1.ceil().clamp(0.0, dims.width as f64) as u32;
        let y1 = self.y1.ceil().clamp(0.0, dims.height as f64) as u32;
        (x0, y0, x1.saturating_sub(x0).max(1), y1.saturating_sub(y0).max(1))
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Intersection of `b` with `[0, width) x [0, height)`.
pub fn clamp_bbox(b: &BBox, dims: ImageDims) -> Result<BBox> {
    b.validate()?;
    b.intersection(&dims.full_box()).ok_or(Error::EmptyBox {
        x0: b.x0,
        y0: b.y0,
        x1: b.x1,
        y1: b.y1,
    })
}

/// Moves every edge outward by `frac` of the image extent along that edge's
/// axis, then clamps to the image.
pub fn expand_bbox(b: &BBox, dims: ImageDims, frac: f64) -> Result<BBox> {
    if !(0.0..0.5).contains(&frac) {
        return Err(Error::InvalidConfig(format!(
            "expand fraction {frac} outside [0, 0.5)"
        )));
    }
    let dx = frac * dims.width as f64;
    let dy = frac * dims.height as f64;
    let grown = BBox {
        x0: b.x0 - dx,
        y0: b.y0 - dy,
        x1: b.x1 + dx,
        y1: b.y1 + dy,
    };
    clamp_bbox(&grown, dims)
}

/// `area(cell ∩ b) / area(cell)`.
pub fn overlap_fraction(cell: &BBox, b: &BBox) -> f64 {
    let area = cell.area();
    if area <= 0.0 {
        return 0.0;
    }
    (cell.intersection_area(b) / area).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

/// Which complement rectangle of the expanded box was kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropSide {
    Top,
    Bottom,
    Left,
    Right,
}

impl CropSide {
    /// Tie-break order for equal-area candidates.
    pub const PRIORITY: [CropSide; 4] = [
        CropSide::Top,
        CropSide::Bottom,
        CropSide::Left,
        CropSide::Right,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CropSide::Top => "top",
            CropSide::Bottom => "bottom",
            CropSide::Left => "left",
            CropSide::Right => "right",
        }
    }
}

impl fmt::Display for CropSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A scene image, a product image, and where the product sits in the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub scene_id: String,
    pub product_id: String,
    pub scene_path: PathBuf,
    pub product_path: PathBuf,
    pub scene_dims: ImageDims,
    pub bbox: BBox,
    pub category: String,
}

/// A pair whose scene was cropped so the product is no longer visible.
#[derive(Debug, Clone, PartialEq)]
pub struct CtlExample {
    pub pair: ScenePair,
    pub category: Category,
    pub crop: BBox,
    pub crop_side: CropSide,
}
