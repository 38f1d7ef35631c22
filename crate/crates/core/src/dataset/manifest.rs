//! Line-delimited JSON manifests.
//!
//! Boxes are written normalized to `[0, 1]` and converted back to pixels on
//! load. Image paths are written relative to the manifest's directory when
//! they live under it, and resolved against that directory on read.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CropConfig, CtlStats};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Category, CropSide, CtlExample, ImageDims, ScenePair};

pub const CTL_FORMAT_VERSION: u32 = 1;
const CTL_FORMAT_NAME: &str = "ctl-manifest";

#[derive(Debug, Serialize, Deserialize)]
struct StlRecord {
    scene_id: String,
    product_id: String,
    scene_path: String,
    product_path: String,
    bbox: BBox,
    category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_height: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CtlHeader {
    format: String,
    version: u32,
    crop_config: CropConfig,
    categories: Vec<Category>,
    stats: CtlStats,
}

#[derive(Debug, Serialize, Deserialize)]
struct CtlRecord {
    scene_id: String,
    product_id: String,
    scene_path: String,
    product_path: String,
    scene_width: u32,
    scene_height: u32,
    bbox: BBox,
    category: String,
    category_id: usize,
    crop: BBox,
    crop_side: CropSide,
}

/// Parsed complete-the-look manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct CtlManifest {
    pub crop_config: CropConfig,
    pub categories: Vec<Category>,
    pub stats: super::CtlStats,
    pub examples: Vec<CtlExample>,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn relativize(base: &Path, p: &Path) -> String {
    let rel = if base.as_os_str().is_empty() {
        p
    } else {
        p.strip_prefix(base).unwrap_or(p)
    };
    rel.to_string_lossy().replace('\\', "/")
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::ManifestParse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_unit_box(b: &BBox, path: &Path, line: usize) -> Result<()> {
    b.validate()
        .and_then(|_| b.validate_within(ImageDims { width: 1, height: 1 }))
        .map_err(|e| parse_err(path, line, format!("bbox: {e}")))
}

/// Reads an STL manifest. Scene dimensions come from the record when present,
/// otherwise from the scene image header.
pub fn read_stl_manifest(path: &Path) -> Result<Vec<ScenePair>> {
    let text = read_text(path)?;
    let base = base_dir(path);
    let mut pairs = Vec::new();
    for (line, raw) in content_lines(&text) {
        let rec: StlRecord =
            serde_json::from_str(raw).map_err(|e| parse_err(path, line, e.to_string()))?;
        check_unit_box(&rec.bbox, path, line)?;
        let scene_path = resolve(&base, &rec.scene_path);
        let scene_dims = match (rec.scene_width, rec.scene_height) {
            (Some(w), Some(h)) => {
                ImageDims::new(w, h).map_err(|e| parse_err(path, line, e.to_string()))?
            }
            _ => {
                if !scene_path.is_file() {
                    return Err(Error::MissingImage(scene_path));
                }
                let (w, h) = image::image_dimensions(&scene_path).map_err(|e| Error::Decode {
                    path: scene_path.display().to_string(),
                    message: e.to_string(),
                })?;
                ImageDims::new(w, h)?
            }
        };
        pairs.push(ScenePair {
            scene_id: rec.scene_id,
            product_id: rec.product_id,
            product_path: resolve(&base, &rec.product_path),
            scene_path,
            bbox: rec.bbox.denormalized(scene_dims),
            scene_dims,
            category: rec.category,
        });
    }
    Ok(pairs)
}

pub fn write_stl_manifest(path: &Path, pairs: &[ScenePair]) -> Result<()> {
    let base = base_dir(path);
    let mut out = String::new();
    for p in pairs {
        let rec = StlRecord {
            scene_id: p.scene_id.clone(),
            product_id: p.product_id.clone(),
            scene_path: relativize(&base, &p.scene_path),
            product_path: relativize(&base, &p.product_path),
            bbox: p.bbox.normalized(p.scene_dims),
            category: p.category.clone(),
            scene_width: Some(p.scene_dims.width),
            scene_height: Some(p.scene_dims.height),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    write_text(path, &out)
}

impl CtlManifest {
    /// Serialized form as written by [`CtlManifest::write`], with paths made
    /// relative to `base`.
    pub fn to_text(&self, base: &Path) -> String {
        let header = CtlHeader {
            format: CTL_FORMAT_NAME.to_string(),
            version: CTL_FORMAT_VERSION,
            crop_config: self.crop_config.clone(),
            categories: self.categories.clone(),
            stats: self.stats.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.examples {
            let dims = e.pair.scene_dims;
            let rec = CtlRecord {
                scene_id: e.pair.scene_id.clone(),
                product_id: e.pair.product_id.clone(),
                scene_path: relativize(base, &e.pair.scene_path),
                product_path: relativize(base, &e.pair.product_path),
                scene_width: dims.width,
                scene_height: dims.height,
                bbox: e.pair.bbox.normalized(dims),
                category: e.category.name.clone(),
                category_id: e.category.id,
                crop: e.crop.normalized(dims),
                crop_side: e.crop_side,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text(&base_dir(path)))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let base = base_dir(path);
        let mut lines = content_lines(&text);
        let (hline, hraw) = lines
            .next()
            .ok_or_else(|| parse_err(path, 1, "missing header record"))?;
        let header: CtlHeader =
            serde_json::from_str(hraw).map_err(|e| parse_err(path, hline, e.to_string()))?;
        if header.format != CTL_FORMAT_NAME {
            return Err(parse_err(path, hline, format!("unexpected format {:?}", header.format)));
        }
        if header.version != CTL_FORMAT_VERSION {
            return Err(Error::FormatVersionMismatch {
                found: header.version,
                expected: CTL_FORMAT_VERSION,
            });
        }
        for (i, c) in header.categories.iter().enumerate() {
            if c.id != i {
                return Err(parse_err(path, hline, "category ids are not dense"));
            }
        }

        let mut examples = Vec::new();
        for (line, raw) in lines {
            let rec: CtlRecord =
                serde_json::from_str(raw).map_err(|e| parse_err(path, line, e.to_string()))?;
            check_unit_box(&rec.bbox, path, line)?;
            check_unit_box(&rec.crop, path, line)?;
            let category = header
                .categories
                .get(rec.category_id)
                .filter(|c| c.name == rec.category)
                .cloned()
                .ok_or_else(|| parse_err(path, line, format!("unknown category {:?}", rec.category)))?;
            let dims = ImageDims::new(rec.scene_width, rec.scene_height)
                .map_err(|e| parse_err(path, line, e.to_string()))?;
            examples.push(CtlExample {
                pair: ScenePair {
                    scene_id: rec.scene_id,
                    product_id: rec.product_id,
                    scene_path: resolve(&base, &rec.scene_path),
                    product_path: resolve(&base, &rec.product_path),
                    scene_dims: dims,
                    bbox: rec.bbox.denormalized(dims),
                    category: rec.category,
                },
                category,
                crop: rec.crop.denormalized(dims),
                crop_side: rec.crop_side,
            });
        }
        Ok(Self {
            crop_config: header.crop_config,
            categories: header.categories,
            stats: header.stats,
            examples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_ctl;

    fn sample_pairs(dir: &Path) -> Vec<ScenePair> {
        let dims = ImageDims::new(50, 100).unwrap();
        vec![
            ScenePair {
                scene_id: "s1".into(),
                product_id: "p1".into(),
                scene_path: dir.join("scenes/s1.png"),
                product_path: dir.join("products/p1.png"),
                scene_dims: dims,
                bbox: BBox::new(10.0, 40.0, 40.0, 70.0).unwrap(),
                category: "tops".into(),
            },
            ScenePair {
                scene_id: "s2".into(),
                product_id: "p2".into(),
                scene_path: dir.join("scenes/s2.png"),
                product_path: dir.join("products/p2.png"),
                scene_dims: dims,
                bbox: BBox::new(0.0, 0.0, 50.0, 30.0).unwrap(),
                category: "shoes".into(),
            },
        ]
    }

    #[test]
    fn stl_roundtrip_keeps_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = sample_pairs(dir.path());
        let path = dir.path().join("stl.jsonl");
        write_stl_manifest(&path, &pairs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"scene_path\":\"scenes/s1.png\""));
        assert_eq!(read_stl_manifest(&path).unwrap(), pairs);
    }

    #[test]
    fn ctl_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = sample_pairs(dir.path());
        let m = generate_ctl(&pairs, &CropConfig::default(), false).unwrap();
        let path = dir.path().join("ctl.jsonl");
        m.write(&path).unwrap();
        let first = fs::read(&path).unwrap();
        let again = generate_ctl(&pairs, &CropConfig::default(), false).unwrap();
        again.write(&path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
        assert_eq!(CtlManifest::read(&path).unwrap(), m);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "# comment\n\n{\"scene_id\": 3}\n").unwrap();
        match read_stl_manifest(&path).unwrap_err() {
            Error::ManifestParse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unnormalized_box_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            r#"{"scene_id":"s","product_id":"p","scene_path":"s.png","product_path":"p.png","bbox":{"x0":10,"y0":0,"x1":20,"y1":1},"category":"tops","scene_width":10,"scene_height":10}"#,
        )
        .unwrap();
        assert_eq!(read_stl_manifest(&path).unwrap_err().name(), "ManifestParse");
    }

    #[test]
    fn missing_dims_and_image_is_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stl.jsonl");
        fs::write(
            &path,
            r#"{"scene_id":"s","product_id":"p","scene_path":"s.png","product_path":"p.png","bbox":{"x0":0.1,"y0":0.1,"x1":0.2,"y1":0.2},"category":"tops"}"#,
        )
        .unwrap();
        assert_eq!(read_stl_manifest(&path).unwrap_err().name(), "MissingImage");
    }

    #[test]
    fn ctl_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctl.jsonl");
        let m = generate_ctl(&sample_pairs(dir.path()), &CropConfig::default(), false).unwrap();
        let text = m.to_text(dir.path()).replacen("\"version\":1", "\"version\":7", 1);
        fs::write(&path, text).unwrap();
        assert_eq!(CtlManifest::read(&path).unwrap_err().name(), "FormatVersionMismatch");
    }
}
