//! Triplet training of the compatibility head.
//!
//! Everything random is drawn from two seeded ChaCha streams: one for triplet
//! sampling and one for dropout masks. Because the sampler stream is shared
//! across ablation variants, all variants see the same triplets for a given
//! seed.

mod adam;
mod checkpoint;
mod grad;
mod gradcheck;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamParams};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
pub use grad::{batch_loss, batch_pass, BatchPass, HeadGrads};
pub use gradcheck::{gradient_check, relative_error, GradCheck, NEGLIGIBLE_GRADIENT};

use crate::corpus::{Catalog, Corpus, PairRef};
use crate::error::{Error, Result};
use crate::eval::{binary_accuracy, make_questions, BinaryQuestion, ModelScorer};
use crate::model::{CompatibilityHead, HeadConfig, Variant, DROPOUT_RATE};

const SAMPLER_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validate_every: usize,
    pub adam: AdamParams,
    pub dropout: f64,
    pub embed_dim: usize,
    pub seed: u64,
    /// Seed for validation negatives; fixed so the selection metric is
    /// comparable across epochs.
    pub val_seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            batch_size: 16,
            epochs: 100,
            validate_every: 10,
            adam: AdamParams::default(),
            dropout: DROPOUT_RATE,
            embed_dim: 128,
            seed: 0,
            val_seed: 1,
            variant: Variant::Hybrid,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 13] = [
        "margin",
        "batch_size",
        "epochs",
        "validate_every",
        "learning_rate",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "dropout",
        "embed_dim",
        "train_seed",
        "val_seed",
        "variant",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return bad("margin must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.epochs == 0 || self.validate_every == 0 {
            return bad("epochs and validate_every must be positive");
        }
        if !(self.adam.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        Ok(())
    }

    /// Sets one field from its text key. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "margin" => self.margin = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "validate_every" => self.validate_every = parse(key, value)?,
            "learning_rate" => self.adam.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "train_seed" => self.seed = parse(key, value)?,
            "val_seed" => self.val_seed = parse(key, value)?,
            "variant" => self.variant = value.trim().parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("margin", self.margin.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("validate_every", self.validate_every.to_string()),
            ("learning_rate", self.adam.learning_rate.to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("dropout", self.dropout.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("train_seed", self.seed.to_string()),
            ("val_seed", self.val_seed.to_string()),
            ("variant", self.variant.to_string()),
        ]
    }

    /// `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {line:?}")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::InvalidConfig(format!("unknown training key {k:?}")));
            }
        }
        Ok(cfg)
    }
}

/// A scene, its positive product and a same-category negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub pair: PairRef,
    pub negative: usize,
}

pub fn hinge_loss(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// Draws `n` triplets: pairs uniformly with replacement, negatives uniformly
/// among the other products of the positive's category.
pub fn sample_batch<R: Rng + ?Sized>(
    pairs: &[PairRef],
    catalog: &Catalog,
    corpus: &Corpus,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Triplet>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    (0..n)
        .map(|_| {
            let pair = pairs[rng.gen_range(0..pairs.len())];
            let negative = sample_negative(pair, catalog, corpus, rng)?;
            Ok(Triplet { pair, negative })
        })
        .collect()
}

pub(crate) fn sample_negative<R: Rng + ?Sized>(
    pair: PairRef,
    catalog: &Catalog,
    corpus: &Corpus,
    rng: &mut R,
) -> Result<usize> {
    let pool = catalog.products(pair.category);
    let others = pool.iter().filter(|p| **p != pair.product).count();
    if others == 0 {
        let name = corpus.categories.get(pair.category).map_or_else(|| pair.category.to_string(), |c| c.name.clone());
        return Err(Error::SingletonCategory(name));
    }
    let k = rng.gen_range(0..others);
    Ok(*pool.iter().filter(|p| **p != pair.product).nth(k).expect("k < others"))
}

/// Trainable tensors in a fixed order shared by gradients and the optimizer.
pub fn parameter_names() -> Vec<String> {
    let mut names = Vec::with_capacity(19);
    for net in ["global", "local", "attention"] {
        for t in ["w1", "b1", "gamma", "beta", "w2", "b2"] {
            names.push(format!("{net}.{t}"));
        }
    }
    names.push("categories".into());
    names
}

pub fn parameter_slices_mut(head: &mut CompatibilityHead) -> Vec<&mut [f64]> {
    let mut out = Vec::with_capacity(19);
    let CompatibilityHead { global, local, attention, categories, .. } = head;
    for p in [global, local, attention] {
        out.push(p.w1.as_slice_mut().expect("standard layout"));
        out.push(p.b1.as_slice_mut().expect("standard layout"));
        out.push(p.gamma.as_slice_mut().expect("standard layout"));
        out.push(p.beta.as_slice_mut().expect("standard layout"));
        out.push(p.w2.as_slice_mut().expect("standard layout"));
        out.push(p.b2.as_slice_mut().expect("standard layout"));
    }
    out.push(categories.as_slice_mut().expect("standard layout"));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean batch loss per completed epoch.
    pub epoch_loss: Vec<f64>,
    pub validations: Vec<Validation>,
}

/// Training inputs: features plus the train/validation pairs.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub train: Vec<PairRef>,
    pub val: Vec<PairRef>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Highest validation accuracy; the earliest epoch wins ties.
    pub best: Checkpoint,
    /// State after the final epoch.
    pub last: Checkpoint,
    pub history: History,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: TrainData<'a>,
    catalog: Catalog,
    questions: Vec<BinaryQuestion>,
    head: CompatibilityHead,
    adam: Adam,
    sampler: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    epoch: usize,
    history: History,
    best: Option<Checkpoint>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: TrainData<'a>) -> Result<Self> {
        cfg.validate()?;
        let head = CompatibilityHead::init(
            &HeadConfig {
                spec: data.corpus.spec,
                embed_dim: cfg.embed_dim,
                n_categories: data.corpus.categories.len(),
            },
            cfg.seed,
        )?;
        let sizes: Vec<usize> = HeadGrads::zeros(&head).slices().iter().map(|s| s.len()).collect();
        let adam = Adam::new(cfg.adam, &sizes);
        let sampler = stream(cfg.seed, SAMPLER_STREAM);
        let dropout_rng = stream(cfg.seed, DROPOUT_STREAM);
        Self::assemble(cfg, data, head, adam, sampler, dropout_rng, 0, History::default(), None)
    }

    /// Continues from `last`; `best` is the best checkpoint written so far.
    pub fn resume(last: Checkpoint, best: Option<Checkpoint>, data: TrainData<'a>) -> Result<Self> {
        if last.categories.len() != data.corpus.categories.len()
            || last.categories.iter().zip(&data.corpus.categories).any(|(a, b)| *a != b.name)
            || last.head.spec != data.corpus.spec
        {
            return Err(Error::Shape("checkpoint does not match the training data".into()));
        }
        let best = match best {
            Some(b) => Some(b),
            None if last.val_accuracy.is_some() => Some(last.clone()),
            None => None,
        };
        Self::assemble(
            last.config,
            data,
            last.head,
            last.adam,
            last.sampler_rng.restore(),
            last.dropout_rng.restore(),
            last.epoch,
            last.history,
            best,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: TrainConfig,
        data: TrainData<'a>,
        head: CompatibilityHead,
        adam: Adam,
        sampler: ChaCha8Rng,
        dropout_rng: ChaCha8Rng,
        epoch: usize,
        history: History,
        best: Option<Checkpoint>,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::EmptyDataset("training split has no pairs".into()));
        }
        if data.val.is_empty() {
            return Err(Error::EmptyDataset("validation split has no pairs".into()));
        }
        let catalog = Catalog::from_pairs(data.corpus.categories.len(), &data.train);
        for p in &data.train {
            if catalog.products(p.category).len() < 2 {
                return Err(Error::SingletonCategory(data.corpus.categories[p.category].name.clone()));
            }
        }
        let val_catalog = Catalog::from_pairs(data.corpus.categories.len(), &data.val);
        let questions = make_questions(data.corpus, &data.val, &val_catalog, cfg.val_seed)?;
        Ok(Self { cfg, data, catalog, questions, head, adam, sampler, dropout_rng, epoch, history, best })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn head(&self) -> &CompatibilityHead {
        &self.head
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.cfg.batch_size)
    }

    /// Runs one epoch, validating when scheduled.
    pub fn run_epoch(&mut self) -> Result<Option<f64>> {
        let epoch = self.epoch + 1;
        let mut total = 0.0;
        let batches = self.batches_per_epoch();
        for batch in 0..batches {
            let triplets =
                sample_batch(&self.data.train, &self.catalog, self.data.corpus, &mut self.sampler, self.cfg.batch_size)?;
            let pass = batch_pass(
                &self.head,
                self.data.corpus,
                &triplets,
                self.cfg.variant,
                self.cfg.margin,
                self.cfg.dropout,
                &mut self.dropout_rng,
            )?;
            let finite_grads = pass.grads.slices().iter().all(|s| s.iter().all(|v| v.is_finite()));
            if !pass.loss.is_finite() || !finite_grads {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch + 1,
                    detail: format!("loss {} with finite gradients: {finite_grads}", pass.loss),
                });
            }
            total += pass.loss;
            let grads = pass.grads.slices();
            self.adam.update(parameter_slices_mut(&mut self.head), grads)?;
            pass.update_running_stats(&mut self.head);
        }
        let mean = total / batches as f64;
        self.history.epoch_loss.push(mean);
        self.epoch = epoch;
        debug!("epoch {epoch}: mean loss {mean:.6}");

        if epoch % self.cfg.validate_every == 0 || epoch == self.cfg.epochs {
            let scorer = ModelScorer::new(&self.head, self.data.corpus, self.cfg.variant)?;
            let accuracy = binary_accuracy(&scorer, &self.questions);
            self.history.validations.push(Validation { epoch, accuracy });
            info!("epoch {epoch}: loss {mean:.6}, validation accuracy {accuracy:.4}");
            let improved = self.best.as_ref().and_then(|b| b.val_accuracy).is_none_or(|b| accuracy > b);
            if improved {
                self.best = Some(self.checkpoint(Some(accuracy)));
            }
            return Ok(Some(accuracy));
        }
        Ok(None)
    }

    pub fn checkpoint(&self, val_accuracy: Option<f64>) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            val_accuracy,
            categories: self.data.corpus.categories.iter().map(|c| c.name.clone()).collect(),
            head: self.head.clone(),
            adam: self.adam.clone(),
            sampler_rng: RngState::capture(&self.sampler),
            dropout_rng: RngState::capture(&self.dropout_rng),
            history: self.history.clone(),
        }
    }

    /// Validation accuracy of the current epoch, if validation ran.
    pub fn last_validation(&self) -> Option<f64> {
        self.history.validations.last().filter(|v| v.epoch == self.epoch).map(|v| v.accuracy)
    }

    /// Best checkpoint so far.
    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        let last = self.checkpoint(self.last_validation());
        let best = self.best.take().unwrap_or_else(|| last.clone());
        Ok(TrainOutcome { best, last, history: self.history })
    }
}

pub fn train(cfg: &TrainConfig, data: TrainData<'_>) -> Result<TrainOutcome> {
    Trainer::new(cfg.clone(), data)?.run()
}

/// Per-category training pair counts, for logging.
pub fn category_counts(corpus: &Corpus, pairs: &[PairRef]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for p in pairs {
        *out.entry(corpus.categories[p.category].name.clone()).or_insert(0) += 1;
    }
    out
}
