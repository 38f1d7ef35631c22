//! Evaluation protocols: binary comparisons (equivalently AUC), Top-K
//! retrieval, attention-region hits, baselines and the ablation runner.

mod attention;
mod report;
mod scorer;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{
    attention_hit_rate, attention_pgm, cell_box, is_hit, random_hit_expectation, random_hit_monte_carlo,
    random_hit_probability, relevant_regions, AttentionExample, HitRate, RELEVANCE_OVERLAP,
};
pub use report::{AttentionSummary, EvalReport};
pub use scorer::{
    ConstantScorer, LinearMetric, LinearMetricConfig, LinearMetricScorer, ModelScorer, PopularityScorer,
    RandomScorer, RawFeatureScorer, Scorer, ScorerKind,
};

use crate::corpus::{Catalog, Corpus, PairRef};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::training::{sample_negative, train, TrainConfig, TrainData};

/// A scene, its positive product and one same-category negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BinaryQuestion {
    pub pair: PairRef,
    pub negative: usize,
}

/// One question per pair with a seeded same-category negative.
pub fn make_questions(corpus: &Corpus, pairs: &[PairRef], catalog: &Catalog, seed: u64) -> Result<Vec<BinaryQuestion>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .map(|&pair| Ok(BinaryQuestion { pair, negative: sample_negative(pair, catalog, corpus, &mut rng)? }))
        .collect()
}

fn credit(pos: f64, neg: f64) -> f64 {
    if pos < neg {
        1.0
    } else if pos == neg {
        0.5
    } else {
        0.0
    }
}

pub fn question_credit(scorer: &dyn Scorer, q: &BinaryQuestion) -> f64 {
    let c = q.pair.category;
    credit(scorer.score(q.pair.scene, q.pair.product, c), scorer.score(q.pair.scene, q.negative, c))
}

/// Fraction of questions where the positive scores strictly lower; ties earn
/// half credit. Empty input gives 0.
pub fn binary_accuracy(scorer: &dyn Scorer, questions: &[BinaryQuestion]) -> f64 {
    if questions.is_empty() {
        return 0.0;
    }
    questions.iter().map(|q| question_credit(scorer, q)).sum::<f64>() / questions.len() as f64
}

pub fn per_category_accuracy(
    scorer: &dyn Scorer,
    questions: &[BinaryQuestion],
    corpus: &Corpus,
) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for q in questions {
        let e = acc.entry(corpus.categories[q.pair.category].name.clone()).or_default();
        e.0 += question_credit(scorer, q);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Exhaustive pairwise accuracy and rank-based AUC, both averaged over pairs.
///
/// The first counts wins over every same-category negative directly; the
/// second converts the positive's mid-rank among all candidates into an AUC.
pub fn auc_equivalence_check(scorer: &dyn Scorer, pairs: &[PairRef], catalog: &Catalog) -> (f64, f64) {
    let mut pairwise = 0.0;
    let mut auc = 0.0;
    let mut counted = 0usize;
    for p in pairs {
        let pool = catalog.products(p.category);
        if pool.len() < 2 || !pool.contains(&p.product) {
            continue;
        }
        let pos = scorer.score(p.scene, p.product, p.category);
        let negs: Vec<f64> = pool
            .iter()
            .filter(|q| **q != p.product)
            .map(|q| scorer.score(p.scene, *q, p.category))
            .collect();
        pairwise += negs.iter().map(|n| credit(pos, *n)).sum::<f64>() / negs.len() as f64;

        let mut scores: Vec<(f64, bool)> = negs.iter().map(|s| (*s, false)).collect();
        scores.push((pos, true));
        scores.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = scores.len();
        let mut i = 0;
        let mut mid_rank = 0.0;
        while i < n {
            let mut j = i;
            while j + 1 < n && scores[j + 1].0 == scores[i].0 {
                j += 1;
            }
            if scores[i..=j].iter().any(|s| s.1) {
                mid_rank = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        auc += (n as f64 - mid_rank) / (n as f64 - 1.0);
        counted += 1;
    }
    if counted == 0 {
        return (0.0, 0.0);
    }
    (pairwise / counted as f64, auc / counted as f64)
}

/// 0-based rank of the positive among its category's candidates; ties are
/// broken by product order (which is id order).
pub fn positive_rank(scorer: &dyn Scorer, pair: &PairRef, pool: &[usize]) -> usize {
    let pos = scorer.score(pair.scene, pair.product, pair.category);
    pool.iter()
        .filter(|&&q| q != pair.product)
        .filter(|&&q| {
            let s = scorer.score(pair.scene, q, pair.category);
            s < pos || (s == pos && q < pair.product)
        })
        .count()
}

/// Fraction of pairs whose positive is among the `k` lowest-scored candidates,
/// for each `k`.
pub fn topk_accuracy(scorer: &dyn Scorer, pairs: &[PairRef], catalog: &Catalog, ks: &[usize]) -> Vec<(usize, f64)> {
    let ranks: Vec<usize> = pairs.iter().map(|p| positive_rank(scorer, p, catalog.products(p.category))).collect();
    ks.iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| **r < k).count();
            let acc = if pairs.is_empty() { 0.0 } else { hits as f64 / pairs.len() as f64 };
            (k, acc)
        })
        .collect()
}

/// Largest candidate pool over the categories of `pairs`.
pub fn max_pool(pairs: &[PairRef], catalog: &Catalog) -> usize {
    pairs.iter().map(|p| catalog.products(p.category).len()).max().unwrap_or(0)
}

/// Mean binary accuracy of `n_seeds` independent random scorers.
pub fn random_baseline_accuracy(questions: &[BinaryQuestion], seed: u64, n_seeds: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..n_seeds).map(|_| binary_accuracy(&RandomScorer { seed: rng.gen() }, questions)).sum();
    total / n_seeds.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub accuracy: f64,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    /// Whether every test attention map is uniform.
    pub uniform_attention: bool,
}

/// Trains one model per variant with otherwise identical configuration and
/// reports test binary accuracy of each best checkpoint.
pub fn run_ablations(
    base: &TrainConfig,
    data: &TrainData<'_>,
    test_questions: &[BinaryQuestion],
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    if test_questions.is_empty() {
        return Err(Error::EmptyDataset("no test questions".into()));
    }
    let corpus = data.corpus;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = TrainConfig { variant, ..base.clone() };
        let outcome = train(&cfg, data.clone())?;
        let head = &outcome.best.head;
        let test_pairs: Vec<PairRef> = test_questions.iter().map(|q| q.pair).collect();
        let scorer = ModelScorer::for_pairs(head, corpus, variant, &test_pairs)?;
        let accuracy = binary_accuracy(&scorer, test_questions);
        let uniform_attention = test_questions.iter().all(|q| {
            let a = scorer.attention(q.pair.scene, q.pair.category);
            let u = 1.0 / a.weights.len() as f64;
            a.weights.iter().all(|w| *w == u)
        });
        rows.push(AblationRow {
            variant,
            accuracy,
            best_epoch: outcome.best.epoch,
            val_accuracy: outcome.best.val_accuracy.unwrap_or(f64::NAN),
            uniform_attention,
        });
    }
    Ok(rows)
}
