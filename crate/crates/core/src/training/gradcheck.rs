//! Central finite-difference verification of [`batch_pass`] gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_pass, parameter_names, parameter_slices_mut, Triplet};
use crate::corpus::Corpus;
use crate::error::Result;
use crate::model::{CompatibilityHead, Variant};

/// Gradients with both magnitudes below this are counted as agreeing.
pub const NEGLIGIBLE_GRADIENT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or hinge kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Largest relative error per parameter group (`global`, `local`,
    /// `attention`, `categories`).
    pub per_group: BTreeMap<String, f64>,
    /// Checked coordinates per group.
    pub counts: BTreeMap<String, usize>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < NEGLIGIBLE_GRADIENT {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares analytic gradients with `(L(p+eps) - L(p-eps)) / 2eps` on
/// `coords` random coordinates. Dropout masks are held fixed by replaying the
/// same dropout stream for every evaluation.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    head: &CompatibilityHead,
    corpus: &Corpus,
    triplets: &[Triplet],
    variant: Variant,
    margin: f64,
    dropout: f64,
    seed: u64,
    coords: usize,
    eps: f64,
) -> Result<GradCheck> {
    let dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |h: &CompatibilityHead| batch_pass(h, corpus, triplets, variant, margin, dropout, &mut dropout_rng.clone());
    let base = eval(head)?;
    let signature = base.signature();
    let analytic: Vec<Vec<f64>> = base.grads.slices().iter().map(|s| s.to_vec()).collect();
    let names = parameter_names();

    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = GradCheck {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        per_group: BTreeMap::new(),
        counts: BTreeMap::new(),
    };
    let mut probe = head.clone();
    for _ in 0..coords {
        let t = pick.gen_range(0..analytic.len());
        let i = pick.gen_range(0..analytic[t].len());
        let original = parameter_slices_mut(&mut probe)[t][i];

        parameter_slices_mut(&mut probe)[t][i] = original + eps;
        let plus = eval(&probe)?;
        parameter_slices_mut(&mut probe)[t][i] = original - eps;
        let minus = eval(&probe)?;
        parameter_slices_mut(&mut probe)[t][i] = original;

        if plus.signature() != signature || minus.signature() != signature {
            out.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * eps);
        let err = relative_error(analytic[t][i], numeric);
        let group = names[t].split('.').next().unwrap_or("").to_string();
        let e = out.per_group.entry(group.clone()).or_insert(0.0);
        *e = e.max(err);
        *out.counts.entry(group).or_insert(0) += 1;
        out.max_rel_error = out.max_rel_error.max(err);
        out.checked += 1;
    }
    Ok(out)
}
