//! Flat `key=value` run configuration shared by every pipeline stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dataset::{CropConfig, SynthParams};
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::pipeline::{BackboneKind, SceneView};
use crate::training::TrainConfig;

/// Keys naming files; excluded from the config hash.
pub const PATH_KEYS: [&str; 7] =
    ["stl_manifest", "ctl_manifest", "split_file", "feature_cache", "checkpoint_dir", "report_dir", "synth_dir"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub crop: CropConfig,
    pub spec: FeatureSpec,
    pub backbone: BackboneKind,
    pub backbone_seed: u64,
    /// Scene view used for training and validation features.
    pub train_view: SceneView,
    pub train: TrainConfig,
    /// Seeds the split and the synthetic generator.
    pub data_seed: u64,
    pub split_ratios: [f64; 3],
    pub eval_seed: u64,
    /// Top-K cutoffs; empty means every K up to the largest pool.
    pub topk: Vec<usize>,
    /// Random scorers averaged for the chance-level reference.
    pub random_scorers: usize,
    pub monte_carlo_trials: usize,
    pub synth: SynthParams,
    pub paths: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            crop: CropConfig::default(),
            spec: FeatureSpec::default(),
            backbone: BackboneKind::Toy,
            backbone_seed: 0,
            train_view: SceneView::Cropped,
            train: TrainConfig::default(),
            data_seed: 0,
            split_ratios: [0.8, 0.1, 0.1],
            eval_seed: 2,
            topk: Vec::new(),
            random_scorers: 250,
            monte_carlo_trials: 10_000,
            synth: SynthParams::default(),
            paths: BTreeMap::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("bad boolean {value:?} for {key}"))),
    }
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? {
            return Ok(());
        }
        let v = value.trim();
        match key {
            "expand_frac" => self.crop.expand_frac = parse(key, v)?,
            "min_area_frac" => self.crop.min_area_frac = parse(key, v)?,
            "crop_mode" => self.crop.mode = v.parse()?,
            "excluded_categories" => {
                self.crop.excluded_categories =
                    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect::<BTreeSet<_>>()
            }
            "backbone" => self.backbone = v.parse()?,
            "backbone_seed" => self.backbone_seed = parse(key, v)?,
            "feature_d1" => self.spec.d1 = parse(key, v)?,
            "feature_w" => self.spec.w = parse(key, v)?,
            "feature_h" => self.spec.h = parse(key, v)?,
            "feature_d2" => self.spec.d2 = parse(key, v)?,
            "train_view" => self.train_view = v.parse()?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "split_train" => self.split_ratios[0] = parse(key, v)?,
            "split_val" => self.split_ratios[1] = parse(key, v)?,
            "split_test" => self.split_ratios[2] = parse(key, v)?,
            "eval_seed" => self.eval_seed = parse(key, v)?,
            "topk" => {
                self.topk = if v == "all" || v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|k| parse(key, k)).collect::<Result<_>>()?
                }
            }
            "random_scorers" => self.random_scorers = parse(key, v)?,
            "monte_carlo_trials" => self.monte_carlo_trials = parse(key, v)?,
            "synth_scenes" => self.synth.n_scenes = parse(key, v)?,
            "synth_products" => self.synth.n_products = parse(key, v)?,
            "synth_categories" => self.synth.n_categories = parse(key, v)?,
            "synth_image_size" => self.synth.image_size = parse(key, v)?,
            "synth_paste" => self.synth.paste_product_into_scene = parse_bool(key, v)?,
            "synth_rule" => self.synth.rule = v.parse()?,
            "synth_pairs_per_scene" => self.synth.pairs_per_scene = parse(key, v)?,
            "synth_distractors" => self.synth.n_distractors = parse(key, v)?,
            "synth_accent_frac" => self.synth.accent_frac = parse(key, v)?,
            "synth_palette" => self.synth.palette_size = parse(key, v)?,
            k if PATH_KEYS.contains(&k) => {
                self.paths.insert(k.to_string(), v.to_string());
            }
            other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every semantic key in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("expand_frac".into(), self.crop.expand_frac.to_string()),
            ("min_area_frac".into(), self.crop.min_area_frac.to_string()),
            ("crop_mode".into(), format!("{:?}", self.crop.mode).to_lowercase()),
            ("excluded_categories".into(), join(&self.crop.excluded_categories)),
            ("backbone".into(), self.backbone.as_str().into()),
            ("backbone_seed".into(), self.backbone_seed.to_string()),
            ("feature_d1".into(), self.spec.d1.to_string()),
            ("feature_w".into(), self.spec.w.to_string()),
            ("feature_h".into(), self.spec.h.to_string()),
            ("feature_d2".into(), self.spec.d2.to_string()),
            ("train_view".into(), self.train_view.as_str().into()),
            ("data_seed".into(), self.data_seed.to_string()),
            ("split_train".into(), self.split_ratios[0].to_string()),
            ("split_val".into(), self.split_ratios[1].to_string()),
            ("split_test".into(), self.split_ratios[2].to_string()),
            ("eval_seed".into(), self.eval_seed.to_string()),
            ("topk".into(), if self.topk.is_empty() { "all".into() } else { join(&self.topk) }),
            ("random_scorers".into(), self.random_scorers.to_string()),
            ("monte_carlo_trials".into(), self.monte_carlo_trials.to_string()),
            ("synth_scenes".into(), self.synth.n_scenes.to_string()),
            ("synth_products".into(), self.synth.n_products.to_string()),
            ("synth_categories".into(), self.synth.n_categories.to_string()),
            ("synth_image_size".into(), self.synth.image_size.to_string()),
            ("synth_paste".into(), self.synth.paste_product_into_scene.to_string()),
            ("synth_rule".into(), self.synth.rule.as_str().into()),
            ("synth_pairs_per_scene".into(), self.synth.pairs_per_scene.to_string()),
            ("synth_distractors".into(), self.synth.n_distractors.to_string()),
            ("synth_accent_frac".into(), self.synth.accent_frac.to_string()),
            ("synth_palette".into(), self.synth.palette_size.to_string()),
        ];
        out.extend(self.train.entries().into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        for (k, v) in &self.paths {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.crop.validate()?;
        self.spec.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        let total: f64 = self.split_ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split_ratios.iter().any(|r| *r < 0.0) {
            return Err(Error::InvalidConfig(format!("split ratios {:?} must be non-negative and sum to 1", self.split_ratios)));
        }
        if self.topk.contains(&0) {
            return Err(Error::InvalidConfig("topk cutoffs must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the semantic `key=value` lines; paths do not contribute.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(Path::new)
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("data_seed".to_string(), self.data_seed),
            ("backbone_seed".to_string(), self.backbone_seed),
            ("train_seed".to_string(), self.train.seed),
            ("val_seed".to_string(), self.train.val_seed),
            ("eval_seed".to_string(), self.eval_seed),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_preserves_hash() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("embed_dim=32\nsynth_paste=true\ntopk=1,5\nstl_manifest=a/b.jsonl\n# note\n").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let base = RunConfig::default();
        let mut moved = base.clone();
        moved.set("ctl_manifest", "elsewhere.jsonl").unwrap();
        assert_eq!(moved.hash(), base.hash());
        for (k, v) in [("margin", "0.3"), ("data_seed", "9"), ("crop_mode", "home"), ("variant", "G")] {
            let mut changed = base.clone();
            changed.set(k, v).unwrap();
            assert_ne!(changed.hash(), base.hash(), "{k}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_ratios_fail() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("colour", "red").is_err());
        cfg.set("split_train", "0.5").unwrap();
        assert!(cfg.validate().is_err());
    }
}
