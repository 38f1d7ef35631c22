//! Scoring functions. Every scorer returns lower values for more compatible
//! (scene, product) pairs.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Catalog, Corpus, PairRef};
use crate::error::{Error, Result};
use crate::model::{d_global, d_local, to_f64, AttentionMap, CompatibilityHead, SceneEmbedding, Variant};
use crate::training::{sample_batch, Adam, AdamParams};

pub trait Scorer {
    fn score(&self, scene: usize, product: usize, category: usize) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    Model,
    Popularity,
    Rawfeature,
    LinearMetric,
    Random,
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Self::Model),
            "popularity" => Ok(Self::Popularity),
            "rawfeature" => Ok(Self::Rawfeature),
            "linear-metric" => Ok(Self::LinearMetric),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidConfig(format!("unknown scorer {other:?}"))),
        }
    }
}

/// Eval-mode embeddings of a trained head, computed once.
pub struct ModelScorer<'a> {
    head: &'a CompatibilityHead,
    variant: Variant,
    scenes: Vec<Option<SceneEmbedding>>,
    products: Array2<f64>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(head: &'a CompatibilityHead, corpus: &Corpus, variant: Variant) -> Result<Self> {
        let all: Vec<usize> = (0..corpus.scenes.len()).collect();
        Self::for_scenes(head, corpus, variant, &all)
    }

    /// Embeds only the scenes of `pairs`.
    pub fn for_pairs(head: &'a CompatibilityHead, corpus: &Corpus, variant: Variant, pairs: &[PairRef]) -> Result<Self> {
        let scenes: Vec<usize> = pairs.iter().map(|p| p.scene).collect();
        Self::for_scenes(head, corpus, variant, &scenes)
    }

    fn for_scenes(head: &'a CompatibilityHead, corpus: &Corpus, variant: Variant, which: &[usize]) -> Result<Self> {
        let mut scenes = vec![None; corpus.scenes.len()];
        for &i in which {
            if scenes[i].is_none() {
                scenes[i] = Some(head.embed_scene(&corpus.scenes[i])?);
            }
        }
        let mut input = Array2::zeros((corpus.products.len(), corpus.spec.d1));
        for (i, p) in corpus.products.iter().enumerate() {
            input.row_mut(i).assign(&Array1::from(to_f64(&p.features.0)));
        }
        let products = head.global.project_eval_rows(input.view())?;
        Ok(Self { head, variant, scenes, products })
    }

    fn scene(&self, scene: usize) -> &SceneEmbedding {
        self.scenes[scene].as_ref().expect("scene embedded at construction")
    }

    pub fn attention(&self, scene: usize, category: usize) -> AttentionMap {
        self.head
            .attention_for(self.scene(scene), category, self.variant)
            .expect("category index validated by corpus")
    }
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, scene: usize, product: usize, category: usize) -> f64 {
        let s = self.scene(scene);
        let p = self.products.row(product);
        let dg = || d_global(s.global.view(), p);
        let dl = || d_local(s.regions.view(), p, &self.attention(scene, category));
        match self.variant {
            Variant::Global => dg(),
            Variant::Local => dl(),
            Variant::Hybrid | Variant::UniformLocal => 0.5 * (dg() + dl()),
        }
    }
}

/// Negative count of training pairs per product; unseen products count 0.
pub struct PopularityScorer {
    counts: Vec<usize>,
}

impl PopularityScorer {
    pub fn fit(corpus: &Corpus, train: &[PairRef]) -> Self {
        let mut counts = vec![0; corpus.products.len()];
        for p in train {
            counts[p.product] += 1;
        }
        Self { counts }
    }

    pub fn count(&self, product: usize) -> usize {
        self.counts.get(product).copied().unwrap_or(0)
    }
}

impl Scorer for PopularityScorer {
    fn score(&self, _scene: usize, product: usize, _category: usize) -> f64 {
        -(self.count(product) as f64)
    }
}

/// Euclidean distance between raw backbone global vectors.
pub struct RawFeatureScorer<'a> {
    corpus: &'a Corpus,
}

impl<'a> RawFeatureScorer<'a> {
    pub fn new(corpus: &'a Corpus) -> Self {
        Self { corpus }
    }
}

impl Scorer for RawFeatureScorer<'_> {
    fn score(&self, scene: usize, product: usize, _category: usize) -> f64 {
        let s = &self.corpus.scenes[scene].global.0;
        let p = &self.corpus.products[product].features.0;
        s.iter().zip(p).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// `|A v_s - A v_p|^2` with a learned square matrix `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMetric {
    pub a: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearMetricConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl LinearMetric {
    pub fn identity(dim: usize) -> Self {
        Self { a: Array2::eye(dim) }
    }

    pub fn distance(&self, vs: &[f32], vp: &[f32]) -> f64 {
        let diff = Array1::from_iter(vs.iter().zip(vp).map(|(a, b)| *a as f64 - *b as f64));
        let y = self.a.dot(&diff);
        y.dot(&y)
    }

    /// Trains `A` from the identity with the triplet hinge loss.
    pub fn fit(corpus: &Corpus, train: &[PairRef], cfg: &LinearMetricConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("no training pairs for the linear metric".into()));
        }
        let dim = corpus.spec.d1;
        let mut metric = Self::identity(dim);
        let catalog = Catalog::from_pairs(corpus.categories.len(), train);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(3);
        let mut adam = Adam::new(cfg.adam, &[dim * dim]);
        let batches = train.len().div_ceil(cfg.batch_size);
        for epoch in 0..cfg.epochs {
            for batch in 0..batches {
                let triplets = sample_batch(train, &catalog, corpus, &mut rng, cfg.batch_size)?;
                let mut grad = Array2::<f64>::zeros((dim, dim));
                let mut loss = 0.0;
                let coef = 1.0 / triplets.len() as f64;
                for t in &triplets {
                    let s = &corpus.scenes[t.pair.scene].global.0;
                    let xp = diff(s, &corpus.products[t.pair.product].features.0);
                    let xn = diff(s, &corpus.products[t.negative].features.0);
                    let yp = metric.a.dot(&xp);
                    let yn = metric.a.dot(&xn);
                    let l = yp.dot(&yp) - yn.dot(&yn) + cfg.margin;
                    if l > 0.0 {
                        loss += l * coef;
                        grad += &(outer(&yp, &xp) * (2.0 * coef));
                        grad -= &(outer(&yn, &xn) * (2.0 * coef));
                    }
                }
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: batch + 1,
                        detail: "linear metric".into(),
                    });
                }
                adam.update(
                    vec![metric.a.as_slice_mut().expect("standard layout")],
                    vec![grad.as_slice().expect("standard layout")],
                )?;
            }
        }
        Ok(metric)
    }
}

fn diff(a: &[f32], b: &[f32]) -> Array1<f64> {
    Array1::from_iter(a.iter().zip(b).map(|(x, y)| *x as f64 - *y as f64))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(ndarray::Axis(1));
    let row = b.view().insert_axis(ndarray::Axis(0));
    col.dot(&row)
}

pub struct LinearMetricScorer<'a> {
    pub metric: &'a LinearMetric,
    pub corpus: &'a Corpus,
}

impl Scorer for LinearMetricScorer<'_> {
    fn score(&self, scene: usize, product: usize, _category: usize) -> f64 {
        self.metric.distance(&self.corpus.scenes[scene].global.0, &self.corpus.products[product].features.0)
    }
}

/// Uniform pseudo-random scores, a pure function of (seed, scene, product).
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, scene: usize, product: usize, _category: usize) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((scene as u64).to_le_bytes());
        h.update((product as u64).to_le_bytes());
        let d = h.finalize();
        let bits = u64::from_le_bytes(d[..8].try_into().unwrap()) >> 11;
        bits as f64 / (1u64 << 53) as f64
    }
}

/// Same score for everything.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer;

impl Scorer for ConstantScorer {
    fn score(&self, _scene: usize, _product: usize, _category: usize) -> f64 {
        0.0
    }
}
