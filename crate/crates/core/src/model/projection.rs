//! Two-layer projection into the unit-norm style space:
//! `Linear -> BatchNorm -> ReLU -> Dropout -> Linear -> L2Norm`.
//!
//! The forward pass records everything the backward pass needs, so gradients
//! can be taken without re-running the network.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const DROPOUT_RATE: f64 = 0.5;
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Gradients with the same layout as the trainable parts of [`Projection`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub enum ForwardMode<'a, R: Rng + ?Sized> {
    Eval,
    /// Batch statistics plus dropout drawn from `rng`.
    Train { rng: &'a mut R, dropout: f64 },
}

/// Cached activations from one batched forward pass.
#[derive(Debug, Clone)]
pub struct ProjectionTape {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    pre_relu: Array2<f64>,
    /// Dropout multipliers (0 or 1/(1-p)); `None` in eval mode.
    mask: Option<Array2<f64>>,
    hidden: Array2<f64>,
    norms: Array1<f64>,
    pub output: Array2<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
    train: bool,
}

impl ProjectionTape {
    pub fn rows(&self) -> usize {
        self.output.nrows()
    }

    /// ReLU activity pattern, used by gradient checks to detect kinks.
    pub fn relu_signature(&self) -> Vec<bool> {
        self.pre_relu.iter().map(|v| *v > 0.0).collect()
    }
}

impl Projection {
    /// He-style fan-in initialization, zero biases, identity batch-norm.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut he = |fan_in: usize, rows: usize, cols: usize| {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
        };
        let w1 = he(input, input, hidden);
        let w2 = he(hidden, hidden, output);
        Self {
            w1,
            b1: Array1::zeros(hidden),
            gamma: Array1::ones(hidden),
            beta: Array1::zeros(hidden),
            running_mean: Array1::zeros(hidden),
            running_var: Array1::ones(hidden),
            w2,
            b2: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn zero_grads(&self) -> ProjectionGrads {
        ProjectionGrads {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.len()),
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }

    /// Projects each row of `input` to a unit-norm embedding.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: ArrayView2<f64>,
        mode: ForwardMode<'_, R>,
    ) -> Result<ProjectionTape> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "projection expects {} inputs, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        let n = input.nrows();
        let z1 = input.dot(&self.w1) + &self.b1;

        let train = matches!(mode, ForwardMode::Train { .. });
        let (mean, var) = if train && n > 0 {
            let mean = z1.mean_axis(Axis(0)).expect("non-empty batch");
            let var = z1.var_axis(Axis(0), 0.0);
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = (&z1 - &mean) * &inv_std;
        let pre_relu = &xhat * &self.gamma + &self.beta;
        let relu = pre_relu.mapv(|v| v.max(0.0));

        let (hidden, mask) = match mode {
            ForwardMode::Eval => (relu, None),
            ForwardMode::Train { rng, dropout } => {
                if !(0.0..1.0).contains(&dropout) {
                    return Err(Error::InvalidConfig(format!("dropout rate {dropout} outside [0, 1)")));
                }
                let keep = 1.0 / (1.0 - dropout);
                let mask = Array2::from_shape_simple_fn(relu.raw_dim(), || {
                    if rng.gen_bool(dropout) {
                        0.0
                    } else {
                        keep
                    }
                });
                (&relu * &mask, Some(mask))
            }
        };

        let z2 = hidden.dot(&self.w2) + &self.b2;
        let norms = z2.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(bad) = norms.iter().find(|v| !(**v >= MIN_NORM)) {
            return Err(Error::DegenerateNorm(*bad));
        }
        let output = &z2 / &norms.view().insert_axis(Axis(1));
        Ok(ProjectionTape {
            input: input.to_owned(),
            xhat,
            inv_std,
            pre_relu,
            mask,
            hidden,
            norms,
            output,
            batch_mean: mean,
            batch_var: var,
            train,
        })
    }

    /// Accumulates parameter gradients given `d loss / d output`.
    pub fn backward(&self, tape: &ProjectionTape, grad_out: &Array2<f64>, grads: &mut ProjectionGrads) {
        let y = &tape.output;
        // through y = z / |z|
        let dots = (y * grad_out).sum_axis(Axis(1)).insert_axis(Axis(1));
        let g_z2 = (grad_out - &(y * &dots)) / &tape.norms.view().insert_axis(Axis(1));

        grads.w2 += &tape.hidden.t().dot(&g_z2);
        grads.b2 += &g_z2.sum_axis(Axis(0));
        let mut g = g_z2.dot(&self.w2.t());

        if let Some(mask) = &tape.mask {
            g *= mask;
        }
        g.zip_mut_with(&tape.pre_relu, |gv, &p| {
            if p <= 0.0 {
                *gv = 0.0;
            }
        });

        grads.gamma += &(&g * &tape.xhat).sum_axis(Axis(0));
        grads.beta += &g.sum_axis(Axis(0));
        let g_xhat = g * &self.gamma;

        let g_z1 = if tape.train {
            let n = tape.rows() as f64;
            let sum = g_xhat.sum_axis(Axis(0));
            let sum_x = (&g_xhat * &tape.xhat).sum_axis(Axis(0));
            ((&g_xhat * n) - &sum - &(&tape.xhat * &sum_x)) * &(&tape.inv_std / n)
        } else {
            g_xhat * &tape.inv_std
        };
        grads.w1 += &tape.input.t().dot(&g_z1);
        grads.b1 += &g_z1.sum_axis(Axis(0));
    }

    /// Moves the running statistics toward a train-mode batch's statistics.
    pub fn update_running_stats(&mut self, tape: &ProjectionTape) {
        let n = tape.rows();
        if !tape.train || n == 0 {
            return;
        }
        let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        self.running_mean = &self.running_mean * BN_MOMENTUM + &(&tape.batch_mean * (1.0 - BN_MOMENTUM));
        self.running_var =
            &self.running_var * BN_MOMENTUM + &(&tape.batch_var * ((1.0 - BN_MOMENTUM) * unbias));
    }

    /// Single-vector eval-mode projection.
    pub fn project_eval(&self, x: &[f64]) -> Result<Array1<f64>> {
        let input = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let tape = self.forward::<rand::rngs::mock::StepRng>(input, ForwardMode::Eval)?;
        Ok(tape.output.row(0).to_owned())
    }

    pub fn project_eval_rows(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward::<rand::rngs::mock::StepRng>(input, ForwardMode::Eval)?.output)
    }
}

impl ProjectionGrads {
    pub fn scale(&mut self, k: f64) {
        self.w1 *= k;
        self.b1 *= k;
        self.gamma *= k;
        self.beta *= k;
        self.w2 *= k;
        self.b2 *= k;
    }
}
