//! Batched train-mode forward pass and its hand-derived backward pass.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;

use super::Triplet;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{
    map_matrix, softmax, squared_distance, to_f64, CompatibilityHead, ForwardMode, ProjectionGrads,
    ProjectionTape, Variant,
};

/// Gradients for every trainable tensor of a [`CompatibilityHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub global: ProjectionGrads,
    pub local: ProjectionGrads,
    pub attention: ProjectionGrads,
    /// Gradient with respect to the raw (unnormalized) category rows.
    pub categories: Array2<f64>,
}

impl HeadGrads {
    pub fn zeros(head: &CompatibilityHead) -> Self {
        Self {
            global: head.global.zero_grads(),
            local: head.local.zero_grads(),
            attention: head.attention.zero_grads(),
            categories: Array2::zeros(head.categories.raw_dim()),
        }
    }

    /// Flat views in [`super::parameter_names`] order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(19);
        for g in [&self.global, &self.local, &self.attention] {
            for s in [
                g.w1.as_slice(),
                g.b1.as_slice(),
                g.gamma.as_slice(),
                g.beta.as_slice(),
                g.w2.as_slice(),
                g.b2.as_slice(),
            ] {
                out.push(s.expect("standard layout"));
            }
        }
        out.push(self.categories.as_slice().expect("standard layout"));
        out
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| *v == 0.0))
    }
}

/// Result of one forward/backward pass over a batch of triplets.
#[derive(Debug, Clone)]
pub struct BatchPass {
    /// Mean hinge loss.
    pub loss: f64,
    pub losses: Vec<f64>,
    pub grads: HeadGrads,
    global: ProjectionTape,
    local: Option<ProjectionTape>,
    attention: Option<ProjectionTape>,
}

impl BatchPass {
    /// Hinge activity plus every ReLU sign; the loss is smooth in a parameter
    /// neighbourhood where this stays constant.
    pub fn signature(&self) -> Vec<bool> {
        let mut sig: Vec<bool> = self.losses.iter().map(|l| *l > 0.0).collect();
        for t in [Some(&self.global), self.local.as_ref(), self.attention.as_ref()].into_iter().flatten() {
            sig.extend(t.relu_signature());
        }
        sig
    }

    pub fn update_running_stats(&self, head: &mut CompatibilityHead) {
        head.global.update_running_stats(&self.global);
        if let Some(t) = &self.local {
            head.local.update_running_stats(t);
        }
        if let Some(t) = &self.attention {
            head.attention.update_running_stats(t);
        }
    }
}

fn weights(variant: Variant) -> (f64, f64) {
    match variant {
        Variant::Global => (1.0, 0.0),
        Variant::Local => (0.0, 1.0),
        Variant::Hybrid | Variant::UniformLocal => (0.5, 0.5),
    }
}

/// Forward and backward over `triplets` with batch-norm batch statistics and
/// fresh dropout masks drawn from `rng`.
///
/// The global projection sees one batch of all scene, positive and negative
/// vectors (scenes are omitted for the local-only variant); the two region
/// projections each see every region of every scene in the batch.
pub fn batch_pass<R: Rng + ?Sized>(
    head: &CompatibilityHead,
    corpus: &Corpus,
    triplets: &[Triplet],
    variant: Variant,
    margin: f64,
    dropout: f64,
    rng: &mut R,
) -> Result<BatchPass> {
    let b = triplets.len();
    if b == 0 {
        return Err(Error::EmptyDataset("batch has no triplets".into()));
    }
    let spec = head.spec;
    let regions = spec.regions();
    let (wg, wl) = weights(variant);
    let use_global = variant.uses_global();
    let use_local = variant.uses_local();
    let use_attention = variant.uses_attention();

    let scene_rows = if use_global { b } else { 0 };
    let mut g_in = Array2::zeros((scene_rows + 2 * b, spec.d1));
    for (i, t) in triplets.iter().enumerate() {
        if use_global {
            let s = &corpus.scenes[t.pair.scene].global.0;
            g_in.row_mut(i).assign(&ArrayView1::from(&to_f64(s)[..]));
        }
        let p = &corpus.products[t.pair.product].features.0;
        let n = &corpus.products[t.negative].features.0;
        g_in.row_mut(scene_rows + i).assign(&ArrayView1::from(&to_f64(p)[..]));
        g_in.row_mut(scene_rows + b + i).assign(&ArrayView1::from(&to_f64(n)[..]));
    }
    let g_tape = head.global.forward(g_in.view(), ForwardMode::Train { rng: &mut *rng, dropout })?;

    let (l_tape, a_tape) = if use_local {
        let mut m = Array2::zeros((b * regions, spec.d2));
        for (i, t) in triplets.iter().enumerate() {
            let scene = &corpus.scenes[t.pair.scene];
            scene.check(&spec)?;
            m.slice_mut(s![i * regions..(i + 1) * regions, ..]).assign(&map_matrix(scene));
        }
        let l = head.local.forward(m.view(), ForwardMode::Train { rng: &mut *rng, dropout })?;
        let a = if use_attention {
            Some(head.attention.forward(m.view(), ForwardMode::Train { rng: &mut *rng, dropout })?)
        } else {
            None
        };
        (Some(l), a)
    } else {
        (None, None)
    };

    let gy = &g_tape.output;
    let mut g_gy = Array2::zeros(gy.raw_dim());
    let mut g_ly = l_tape.as_ref().map(|t| Array2::<f64>::zeros(t.output.raw_dim()));
    let mut g_ay = a_tape.as_ref().map(|t| Array2::<f64>::zeros(t.output.raw_dim()));
    let mut grads = HeadGrads::zeros(head);
    let mut losses = Vec::with_capacity(b);
    let coef = 1.0 / b as f64;

    for (i, t) in triplets.iter().enumerate() {
        let rows = i * regions..(i + 1) * regions;
        let cat = t.pair.category;
        let (attn, cat_emb) = match &a_tape {
            Some(at) => {
                let e = head.category_embedding(cat)?;
                let keys = at.output.slice(s![rows.clone(), ..]);
                let logits: Vec<f64> = keys.rows().into_iter().map(|k| -squared_distance(k, e.view())).collect();
                (softmax(&logits), Some(e))
            }
            None => (vec![1.0 / regions as f64; regions], None),
        };

        let pos_row = scene_rows + i;
        let neg_row = scene_rows + b + i;
        let mut q = [Vec::new(), Vec::new()];
        let mut d = [0.0f64; 2];
        for (k, row) in [pos_row, neg_row].into_iter().enumerate() {
            let p = gy.row(row);
            if use_global {
                d[k] += wg * squared_distance(gy.row(i), p);
            }
            if let Some(lt) = &l_tape {
                let reg = lt.output.slice(s![rows.clone(), ..]);
                q[k] = reg.rows().into_iter().map(|r| squared_distance(r, p)).collect();
                d[k] += wl * attn.iter().zip(&q[k]).map(|(a, q)| a * q).sum::<f64>();
            }
        }
        let loss = (d[0] - d[1] + margin).max(0.0);
        losses.push(loss);
        if loss <= 0.0 {
            continue;
        }

        let mut g_attn = vec![0.0f64; regions];
        for (k, (row, sign)) in [(pos_row, 1.0), (neg_row, -1.0)].into_iter().enumerate() {
            let gd = sign * coef;
            let p = gy.row(row).to_owned();
            let mut gp = Array1::<f64>::zeros(p.len());
            if use_global {
                let diff = &gy.row(i) - &p;
                let u = 2.0 * wg * gd;
                g_gy.row_mut(i).scaled_add(u, &diff);
                gp.scaled_add(-u, &diff);
            }
            if let (Some(lt), Some(gl)) = (&l_tape, g_ly.as_mut()) {
                let u = wl * gd;
                for (j, r) in rows.clone().enumerate() {
                    let diff = &lt.output.row(r) - &p;
                    gl.row_mut(r).scaled_add(2.0 * u * attn[j], &diff);
                    gp.scaled_add(-2.0 * u * attn[j], &diff);
                    g_attn[j] += u * q[k][j];
                }
            }
            let mut target = g_gy.row_mut(row);
            target += &gp;
        }

        if let (Some(at), Some(ga), Some(e)) = (&a_tape, g_ay.as_mut(), &cat_emb) {
            let mean: f64 = attn.iter().zip(&g_attn).map(|(a, g)| a * g).sum();
            let mut g_e = Array1::<f64>::zeros(e.len());
            for (j, r) in rows.clone().enumerate() {
                let g_logit = attn[j] * (g_attn[j] - mean);
                let diff = &at.output.row(r) - e;
                ga.row_mut(r).scaled_add(-2.0 * g_logit, &diff);
                g_e.scaled_add(2.0 * g_logit, &diff);
            }
            let raw = head.categories.row(cat);
            let norm = raw.dot(&raw).sqrt();
            let g_raw = (&g_e - &(e * e.dot(&g_e))) / norm;
            let mut target = grads.categories.row_mut(cat);
            target += &g_raw;
        }
    }

    head.global.backward(&g_tape, &g_gy, &mut grads.global);
    if let (Some(lt), Some(gl)) = (&l_tape, &g_ly) {
        head.local.backward(lt, gl, &mut grads.local);
    }
    if let (Some(at), Some(ga)) = (&a_tape, &g_ay) {
        head.attention.backward(at, ga, &mut grads.attention);
    }

    let loss = losses.iter().sum::<f64>() * coef;
    Ok(BatchPass { loss, losses, grads, global: g_tape, local: l_tape, attention: a_tape })
}

/// Mean loss only; the dropout stream is consumed exactly as in [`batch_pass`].
pub fn batch_loss<R: Rng + ?Sized>(
    head: &CompatibilityHead,
    corpus: &Corpus,
    triplets: &[Triplet],
    variant: Variant,
    margin: f64,
    dropout: f64,
    rng: &mut R,
) -> Result<f64> {
    Ok(batch_pass(head, corpus, triplets, variant, margin, dropout, rng)?.loss)
}
