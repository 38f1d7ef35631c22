//! Glue between the stages: features for a manifest, split selection,
//! model evaluation and run metadata.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::debug;
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{Catalog, Corpus, PairRef};
use crate::dataset::{CtlManifest, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::eval::{
    attention_hit_rate, binary_accuracy, make_questions, max_pool, per_category_accuracy, random_baseline_accuracy,
    random_hit_expectation, random_hit_monte_carlo, relevant_regions, topk_accuracy, AttentionExample,
    AttentionSummary, BinaryQuestion, EvalReport, ModelScorer, Scorer,
};
use crate::features::{load_resized, read_cache, Backbone, FeatureSpec, FeatureStore, ImageFeatures, ToyBackbone};
use crate::geometry::{BBox, ImageDims};
use crate::model::{CompatibilityHead, Variant};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneView {
    /// The cropped scene, with the product removed.
    Cropped,
    /// The original scene image.
    Full,
}

impl SceneView {
    pub fn as_str(&self) -> &'static str {
        match self {
            SceneView::Cropped => "cropped",
            SceneView::Full => "full",
        }
    }
}

impl FromStr for SceneView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cropped" => Ok(SceneView::Cropped),
            "full" => Ok(SceneView::Full),
            other => Err(Error::InvalidConfig(format!("unknown scene view {other:?}"))),
        }
    }
}

impl fmt::Display for SceneView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Toy,
    Precomputed,
}

impl BackboneKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::Toy => "toy",
            BackboneKind::Precomputed => "precomputed",
        }
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackboneKind::Toy),
            "precomputed" => Ok(BackboneKind::Precomputed),
            other => Err(Error::InvalidConfig(format!("unknown backbone {other:?}"))),
        }
    }
}

/// The backbone a config describes. A precomputed backbone needs the cache.
pub fn make_backbone(cfg: &RunConfig, cache: Option<&Path>) -> Result<Backbone> {
    match cfg.backbone {
        BackboneKind::Toy => Ok(Backbone::Toy(ToyBackbone::new(cfg.spec, cfg.backbone_seed)?)),
        BackboneKind::Precomputed => {
            let path = cache.ok_or_else(|| Error::InvalidConfig("precomputed backbone needs a feature cache".into()))?;
            let (spec, store) = read_cache(path)?;
            Ok(Backbone::Precomputed { spec, store })
        }
    }
}

/// Scene crop for `view`, in scene pixels.
pub fn scene_region(ex: &crate::geometry::CtlExample, view: SceneView) -> Option<BBox> {
    match view {
        SceneView::Cropped => Some(ex.crop),
        SceneView::Full => None,
    }
}

/// Features for every scene (under `view`) and product of a manifest. Scene
/// `i` of the corpus is example `i`. The returned store holds every feature
/// used, keyed by image content hash.
pub fn load_corpus(manifest: &CtlManifest, backbone: &Backbone, view: SceneView) -> Result<(Corpus, FeatureStore)> {
    let spec = backbone.spec();
    let mut store = FeatureStore::new();
    let mut memo: BTreeMap<(PathBuf, Option<[u64; 4]>), String> = BTreeMap::new();
    let mut features = |path: &Path, crop: Option<BBox>| -> Result<ImageFeatures> {
        let key = (path.to_path_buf(), crop.map(|b| [b.x0.to_bits(), b.y0.to_bits(), b.x1.to_bits(), b.y1.to_bits()]));
        if let Some(hash) = memo.get(&key) {
            return Ok(store[hash].clone());
        }
        let img = load_resized(path, crop.as_ref())?;
        let f = match store.get(&img.hash) {
            Some(f) => f.clone(),
            None => backbone.features_for(&img)?,
        };
        f.check(&spec)?;
        store.insert(img.hash.clone(), f.clone());
        memo.insert(key, img.hash);
        Ok(f)
    };

    let mut entries = Vec::with_capacity(manifest.examples.len());
    for ex in &manifest.examples {
        let scene = features(&ex.pair.scene_path, scene_region(ex, view))?;
        let product = features(&ex.pair.product_path, None)?;
        entries.push((scene, ex.pair.product_id.clone(), ex.category.id, product.global));
    }
    debug!("loaded features for {} examples ({} distinct images)", entries.len(), store.len());
    let corpus = Corpus::new(spec, manifest.categories.clone(), entries)?;
    Ok((corpus, store))
}

/// Pairs whose scene belongs to `split`, in manifest order.
pub fn split_pairs(corpus: &Corpus, manifest: &CtlManifest, assignment: &SplitAssignment, split: Split) -> Vec<PairRef> {
    let idx: Vec<usize> = manifest
        .examples
        .iter()
        .enumerate()
        .filter(|(_, e)| assignment.split_of(&e.pair.scene_id) == Some(split))
        .map(|(i, _)| i)
        .collect();
    corpus.subset(&idx)
}

/// Attention-hit inputs: for each pair, every labeled box of the same scene
/// intersected with the pair's crop, in crop pixel coordinates.
pub fn attention_examples(manifest: &CtlManifest, pairs: &[PairRef]) -> Result<Vec<AttentionExample>> {
    let mut by_scene: BTreeMap<&str, Vec<BBox>> = BTreeMap::new();
    for e in &manifest.examples {
        by_scene.entry(e.pair.scene_id.as_str()).or_default().push(e.pair.bbox);
    }
    pairs
        .iter()
        .map(|p| {
            let ex = &manifest.examples[p.example];
            let dims: ImageDims = ex.pair.scene_dims;
            let (x, y, w, h) = ex.crop.to_pixel_rect(dims);
            let frame = BBox { x0: x as f64, y0: y as f64, x1: (x + w) as f64, y1: (y + h) as f64 };
            let boxes = by_scene[ex.pair.scene_id.as_str()]
                .iter()
                .filter_map(|b| b.intersection(&frame))
                .map(|b| b.relative_to(&frame))
                .collect();
            Ok(AttentionExample {
                scene: p.scene,
                category: p.category,
                crop_width: w as f64,
                crop_height: h as f64,
                boxes,
            })
        })
        .collect()
}

/// Test questions and candidate pools for one split.
pub struct TestSet {
    pub pairs: Vec<PairRef>,
    pub catalog: Catalog,
    pub questions: Vec<BinaryQuestion>,
}

impl TestSet {
    pub fn new(corpus: &Corpus, pairs: Vec<PairRef>, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("test split has no pairs".into()));
        }
        let catalog = Catalog::from_pairs(corpus.categories.len(), &pairs);
        let questions = make_questions(corpus, &pairs, &catalog, seed)?;
        Ok(Self { pairs, catalog, questions })
    }

    pub fn ks(&self, requested: &[usize]) -> Vec<usize> {
        if requested.is_empty() {
            (1..=max_pool(&self.pairs, &self.catalog)).collect()
        } else {
            requested.to_vec()
        }
    }
}

/// Binary accuracy, Top-K and per-category results for any scorer.
pub fn evaluate_scorer(
    name: &str,
    scorer: &dyn Scorer,
    corpus: &Corpus,
    test: &TestSet,
    cfg: &RunConfig,
) -> EvalReport {
    let mut config: BTreeMap<String, String> = cfg.entries().into_iter().collect();
    config.insert("config_hash".into(), cfg.hash());
    EvalReport {
        scorer: name.to_string(),
        config,
        questions: test.questions.len(),
        binary_accuracy: binary_accuracy(scorer, &test.questions),
        random_accuracy: random_baseline_accuracy(&test.questions, cfg.eval_seed, cfg.random_scorers),
        per_category: per_category_accuracy(scorer, &test.questions, corpus),
        topk: topk_accuracy(scorer, &test.pairs, &test.catalog, &test.ks(&cfg.topk)),
        attention: None,
    }
}

/// Full report for a trained head, including attention-hit rates.
pub fn evaluate_model(
    head: &CompatibilityHead,
    variant: Variant,
    corpus: &Corpus,
    manifest: &CtlManifest,
    test: &TestSet,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let scorer = ModelScorer::for_pairs(head, corpus, variant, &test.pairs)?;
    let mut report = evaluate_scorer(&format!("model:{variant}"), &scorer, corpus, test, cfg);
    let examples = attention_examples(manifest, &test.pairs)?;
    report.attention = Some(attention_summary(&examples, corpus.spec, cfg, |ex| {
        scorer.attention(ex.scene, ex.category)
    }));
    Ok(report)
}

pub fn attention_summary(
    examples: &[AttentionExample],
    spec: FeatureSpec,
    cfg: &RunConfig,
    mut attention: impl FnMut(&AttentionExample) -> crate::model::AttentionMap,
) -> AttentionSummary {
    let (w, h) = (spec.w, spec.h);
    let top1 = attention_hit_rate(examples, w, h, 1, &mut attention);
    let top3 = attention_hit_rate(examples, w, h, 3, &mut attention);
    let relevant: Vec<Vec<bool>> = examples.iter().map(|e| relevant_regions(e, w, h)).collect();
    AttentionSummary {
        top1,
        top3,
        random_top1_analytic: random_hit_expectation(&relevant, 1),
        random_top3_analytic: random_hit_expectation(&relevant, 3),
        random_top1_monte_carlo: random_hit_monte_carlo(&relevant, 1, cfg.monte_carlo_trials, cfg.eval_seed),
        random_top3_monte_carlo: random_hit_monte_carlo(&relevant, 3, cfg.monte_carlo_trials, cfg.eval_seed),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub artifact_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub output: String,
}

/// Path of the metadata record that accompanies `output`.
pub fn metadata_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    output.with_file_name(name)
}

pub fn write_metadata(output: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let meta = RunMetadata {
        artifact_version: ARTIFACT_VERSION.to_string(),
        command: command.to_string(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds(),
        output: output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let mut text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    text.push('\n');
    let path = metadata_path(output);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A cropped manifest together with its scene split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub manifest: CtlManifest,
    pub assignment: SplitAssignment,
}

/// Synthesizes a planted-rule dataset under `dir`, crops it and splits it.
/// Writes `stl.jsonl`, `ctl.jsonl` and `split.tsv`.
pub fn prepare_synthetic(cfg: &RunConfig, dir: &Path) -> Result<Prepared> {
    let params = crate::dataset::SynthParams { seed: cfg.data_seed, ..cfg.synth.clone() };
    let synth = crate::dataset::synth_dataset(&params, dir)?;
    let manifest = crate::dataset::generate_ctl(&synth.pairs, &cfg.crop, true)?;
    manifest.write(&dir.join("ctl.jsonl"))?;
    let assignment = crate::dataset::split_scenes(&manifest.examples, cfg.split_ratios, cfg.data_seed)?;
    crate::dataset::write_split_file(&dir.join("split.tsv"), &assignment)?;
    Ok(Prepared { manifest, assignment })
}

/// Result of training one configuration and scoring it on the test split.
pub struct Experiment {
    pub outcome: crate::training::TrainOutcome,
    pub report: EvalReport,
}

/// Trains on `cfg.train_view` scenes and evaluates the best checkpoint on
/// cropped test scenes.
pub fn train_and_evaluate(cfg: &RunConfig, data: &Prepared, backbone: &Backbone) -> Result<Experiment> {
    let (train_corpus, _) = load_corpus(&data.manifest, backbone, cfg.train_view)?;
    let train_data = crate::training::TrainData {
        corpus: &train_corpus,
        train: split_pairs(&train_corpus, &data.manifest, &data.assignment, Split::Train),
        val: split_pairs(&train_corpus, &data.manifest, &data.assignment, Split::Val),
    };
    let outcome = crate::training::train(&cfg.train, train_data)?;

    let cropped;
    let test_corpus = if cfg.train_view == SceneView::Cropped {
        &train_corpus
    } else {
        cropped = load_corpus(&data.manifest, backbone, SceneView::Cropped)?.0;
        &cropped
    };
    let pairs = split_pairs(test_corpus, &data.manifest, &data.assignment, Split::Test);
    let test = TestSet::new(test_corpus, pairs, cfg.eval_seed)?;
    let report = evaluate_model(&outcome.best.head, cfg.train.variant, test_corpus, &data.manifest, &test, cfg)?;
    Ok(Experiment { outcome, report })
}

/// Manifest, split and backbone resolved from a config's paths.
pub struct Workspace {
    pub cfg: RunConfig,
    pub data: Prepared,
    pub backbone: Backbone,
}

fn required_path<'a>(cfg: &'a RunConfig, key: &str) -> Result<&'a Path> {
    cfg.path(key).ok_or_else(|| Error::InvalidConfig(format!("{key} is not set")))
}

impl Workspace {
    /// Reads `ctl_manifest` and `split_file`; a precomputed backbone also
    /// reads `feature_cache`.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let manifest = CtlManifest::read(required_path(cfg, "ctl_manifest")?)?;
        let assignment = crate::dataset::read_split_file(required_path(cfg, "split_file")?)?;
        let backbone = make_backbone(cfg, cfg.path("feature_cache"))?;
        if backbone.spec() != cfg.spec {
            return Err(Error::Shape(format!("feature cache has spec {:?}, config asks for {:?}", backbone.spec(), cfg.spec)));
        }
        Ok(Self { cfg: cfg.clone(), data: Prepared { manifest, assignment }, backbone })
    }

    pub fn corpus(&self, view: SceneView) -> Result<Corpus> {
        Ok(load_corpus(&self.data.manifest, &self.backbone, view)?.0)
    }

    pub fn pairs(&self, corpus: &Corpus, split: Split) -> Vec<PairRef> {
        split_pairs(corpus, &self.data.manifest, &self.data.assignment, split)
    }

    pub fn train_data<'a>(&self, corpus: &'a Corpus) -> crate::training::TrainData<'a> {
        crate::training::TrainData {
            corpus,
            train: self.pairs(corpus, Split::Train),
            val: self.pairs(corpus, Split::Val),
        }
    }

    pub fn test_set(&self, corpus: &Corpus) -> Result<TestSet> {
        TestSet::new(corpus, self.pairs(corpus, Split::Test), self.cfg.eval_seed)
    }
}

/// Features of every product and of every scene under both views.
pub fn compute_features(manifest: &CtlManifest, backbone: &Backbone) -> Result<FeatureStore> {
    let (_, mut store) = load_corpus(manifest, backbone, SceneView::Cropped)?;
    let (_, full) = load_corpus(manifest, backbone, SceneView::Full)?;
    store.extend(full);
    Ok(store)
}
