//! The hypernetwork `H(x; θ)`: a residual MLP backbone whose head emits a
//! per-instance local linear classifier `W ∈ R^{K×(D+1)}`.
//!
//! Layout of one output row: `K` blocks of `D + 1` values, each block being
//! `(bias, w_1, …, w_D)` for one class.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{
    softmax_rows, BatchStats, BoundParams, DropoutKey, ParamId, ParamStore, Tape, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub head_init_scale: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl HyperConfig {
    /// Backbone of 4 residual blocks, width 256, dropout 0.25.
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            classes,
            hidden: 256,
            blocks: 4,
            dropout: 0.25,
            head_init_scale: 1e-2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Width of one emitted weight row block, `D + 1`.
    pub fn row_width(&self) -> usize {
        self.input_dim + 1
    }

    pub fn output_dim(&self) -> usize {
        self.classes * self.row_width()
    }
}

/// Forward mode. Training uses batch statistics and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train {
        seed: u64,
        step: u64,
        /// Distinguishes several forwards within one step.
        call: u64,
    },
    /// Dropout as in training, normalization by the running statistics.
    TrainRunningNorm { seed: u64, step: u64, call: u64 },
    Eval,
}

impl Mode {
    /// The same mode for another forward within the step.
    pub fn next_call(self) -> Self {
        match self {
            Mode::Train { seed, step, call } => Mode::Train {
                seed,
                step,
                call: call + 1,
            },
            Mode::TrainRunningNorm { seed, step, call } => Mode::TrainRunningNorm {
                seed,
                step,
                call: call + 1,
            },
            Mode::Eval => Mode::Eval,
        }
    }

    /// Keeps dropout but switches normalization to the running statistics.
    pub fn with_running_norm(self) -> Self {
        match self {
            Mode::Train { seed, step, call } | Mode::TrainRunningNorm { seed, step, call } => {
                Mode::TrainRunningNorm { seed, step, call }
            }
            Mode::Eval => Mode::Eval,
        }
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    gamma: ParamId,
    beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Running batch-normalization statistics of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct HyperNetwork {
    pub config: HyperConfig,
    pub params: ParamStore,
    pub running: Vec<RunningStats>,
    input_w: ParamId,
    input_b: ParamId,
    blocks: Vec<BlockIds>,
    head_w: ParamId,
    head_b: ParamId,
    rows_evaluated: AtomicU64,
}

impl Clone for HyperNetwork {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            running: self.running.clone(),
            input_w: self.input_w,
            input_b: self.input_b,
            blocks: self.blocks.clone(),
            head_w: self.head_w,
            head_b: self.head_b,
            rows_evaluated: AtomicU64::new(self.rows_evaluated()),
        }
    }
}

impl std::fmt::Debug for HyperNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HyperNetwork")
            .field("config", &self.config)
            .field("scalars", &self.params.num_scalars())
            .finish()
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

impl HyperNetwork {
    /// Initializes parameters deterministically from `seed`.
    ///
    /// Linear layers use `U(±1/√fan_in)`; the head uses
    /// `U(±head_init_scale)` with zero bias so the initial `W` is near zero.
    pub fn new(config: HyperConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, h) = (config.input_dim, config.hidden);
        let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let input_w = params.add("input.weight", uniform(&mut rng, d, h, bound(d)));
        let input_b = params.add("input.bias", uniform(&mut rng, 1, h, bound(d)));
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut running = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            blocks.push(BlockIds {
                gamma: params.add(format!("block{i}.bn.gamma"), Tensor::full(1, h, 1.0)),
                beta: params.add(format!("block{i}.bn.beta"), Tensor::zeros(1, h)),
                w1: params.add(format!("block{i}.fc1.weight"), uniform(&mut rng, h, h, bound(h))),
                b1: params.add(format!("block{i}.fc1.bias"), uniform(&mut rng, 1, h, bound(h))),
                w2: params.add(format!("block{i}.fc2.weight"), uniform(&mut rng, h, h, bound(h))),
                b2: params.add(format!("block{i}.fc2.bias"), uniform(&mut rng, 1, h, bound(h))),
            });
            running.push(RunningStats {
                mean: vec![0.0; h],
                var: vec![1.0; h],
            });
        }
        let out = config.output_dim();
        let head_w = params.add(
            "head.weight",
            uniform(&mut rng, h, out, config.head_init_scale),
        );
        let head_b = params.add("head.bias", Tensor::zeros(1, out));
        Self {
            config,
            params,
            running,
            input_w,
            input_b,
            blocks,
            head_w,
            head_b,
            rows_evaluated: AtomicU64::new(0),
        }
    }

    /// Rebuilds a network around previously saved parameters.
    pub fn from_parts(config: HyperConfig, params: ParamStore, running: Vec<RunningStats>) -> Result<Self> {
        let template = Self::new(config.clone(), 0);
        if template.params.len() != params.len() || running.len() != config.blocks {
            return Err(Error::Bundle("hypernetwork parameter count mismatch".into()));
        }
        for ((_, n1, t1), (_, n2, t2)) in template.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Bundle(format!(
                    "hypernetwork parameter `{n2}` does not match `{n1}`"
                )));
            }
        }
        Ok(Self {
            params,
            running,
            rows_evaluated: AtomicU64::new(0),
            ..template
        })
    }

    /// Number of input rows pushed through [`HyperNetwork::forward`] so far.
    pub fn rows_evaluated(&self) -> u64 {
        self.rows_evaluated.load(Ordering::Relaxed)
    }

    /// Records the forward pass on `tape`, returning `W` as `B × K(D+1)`
    /// and, in training mode, the batch statistics of every block.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &BoundParams,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let [b, d] = tape.shape(x);
        if d != self.config.input_dim {
            return Err(Error::InvalidArgument(format!(
                "hypernetwork expects {} features, got {d}",
                self.config.input_dim
            )));
        }
        self.rows_evaluated.fetch_add(b as u64, Ordering::Relaxed);
        let p = |id: ParamId| bound.var(id);
        let mut h = tape.affine(x, p(self.input_w), p(self.input_b));
        let mut stats = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let running = match mode {
                Mode::Train { .. } => None,
                Mode::TrainRunningNorm { .. } | Mode::Eval => Some((
                    self.running[i].mean.as_slice(),
                    self.running[i].var.as_slice(),
                )),
            };
            let (n, s) = tape.batch_norm(h, p(blk.gamma), p(blk.beta), running, self.config.bn_eps);
            stats.extend(s);
            let a = tape.affine(n, p(blk.w1), p(blk.b1));
            let a = tape.relu(a);
            let a = match mode {
                Mode::Train { seed, step, call } | Mode::TrainRunningNorm { seed, step, call } => tape.dropout(
                    a,
                    self.config.dropout,
                    DropoutKey {
                        seed,
                        step,
                        layer: call * 1000 + i as u64,
                    },
                ),
                Mode::Eval => a,
            };
            let a = tape.affine(a, p(blk.w2), p(blk.b2));
            h = tape.add(h, a);
        }
        let w = tape.affine(h, p(self.head_w), p(self.head_b));
        Ok((w, stats))
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let m = self.config.bn_momentum;
        for (r, s) in self.running.iter_mut().zip(stats) {
            for (a, b) in r.mean.iter_mut().zip(&s.mean) {
                *a = (1.0 - m) * *a + m * b;
            }
            for (a, b) in r.var.iter_mut().zip(&s.var) {
                *a = (1.0 - m) * *a + m * b;
            }
        }
    }

    /// Evaluation-mode weights for a batch, `B × K(D+1)`.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (w, _) = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
        Ok(tape.value(w).clone())
    }

    /// Evaluation-mode class probabilities, `B × K`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weights(x)?;
        Ok(softmax_rows(&local_logits(x, &w, self.config.classes)))
    }
}

/// `z_k = W_{k,0} + Σ_d W_{k,d} x_d` for every row, without a tape.
pub fn local_logits(x: &Tensor, w: &Tensor, classes: usize) -> Tensor {
    let d = x.cols();
    assert_eq!(w.shape(), [x.rows(), classes * (d + 1)], "local_logits shapes");
    let mut z = Tensor::zeros(x.rows(), classes);
    for i in 0..x.rows() {
        let (xi, wi) = (x.row(i), w.row(i));
        for k in 0..classes {
            let blk = &wi[k * (d + 1)..(k + 1) * (d + 1)];
            z.set(i, k, blk[0] + blk[1..].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    z
}

/// Weight coordinates `W_{m,1..D}` of class `m` in one output row.
pub fn class_weights(w_row: &[f64], class: usize, dim: usize) -> &[f64] {
    &w_row[class * (dim + 1) + 1..(class + 1) * (dim + 1)]
}

/// Bias and weights of class `m`: `(W_{m,0}, W_{m,1..D})`.
pub fn class_row(w_row: &[f64], class: usize, dim: usize) -> (f64, &[f64]) {
    (w_row[class * (dim + 1)], class_weights(w_row, class, dim))
}

/// Local explanation of one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub predicted: usize,
    pub bias: f64,
    /// Weights of the predicted class, one per encoded feature.
    pub weights: Vec<f64>,
    /// Full `K × (D+1)` matrix.
    pub matrix: Vec<Vec<f64>>,
}

pub fn feature_importance(net: &HyperNetwork, x: &[f64]) -> Result<FeatureImportance> {
    let xt = Tensor::row_vector(x);
    let w = net.weights(&xt)?;
    let k = net.config.classes;
    let d = net.config.input_dim;
    let z = local_logits(&xt, &w, k);
    let predicted = crate::gradcore::argmax(z.row(0));
    let (bias, weights) = class_row(w.row(0), predicted, d);
    let matrix = (0..k)
        .map(|c| w.row(0)[c * (d + 1)..(c + 1) * (d + 1)].to_vec())
        .collect();
    Ok(FeatureImportance {
        predicted,
        bias,
        weights: weights.to_vec(),
        matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(d: usize, k: usize) -> HyperConfig {
        HyperConfig {
            hidden: 16,
            blocks: 2,
            ..HyperConfig::new(d, k)
        }
    }

    #[test]
    fn output_shapes() {
        let net = HyperNetwork::new(HyperConfig::new(2, 2), 0);
        let w = net.weights(&Tensor::zeros(3, 2)).unwrap();
        assert_eq!(w.shape(), [3, 2 * 3]);
        let net = HyperNetwork::new(small(64, 10), 0);
        let w = net.weights(&Tensor::zeros(1, 64)).unwrap();
        assert_eq!(w.shape(), [1, 10 * 65]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = HyperNetwork::new(small(3, 2), 0);
        assert!(net.weights(&Tensor::zeros(2, 4)).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let net = HyperNetwork::new(small(4, 3), 5);
        let x = Tensor::from_vec(2, 4, vec![0.1, -0.2, 0.3, 1.0, 2.0, 0.0, -1.0, 0.5]);
        assert_eq!(net.weights(&x).unwrap(), net.weights(&x).unwrap());
        let fi1 = feature_importance(&net, x.row(0)).unwrap();
        let fi2 = feature_importance(&net, x.row(0)).unwrap();
        assert_eq!(fi1, fi2);
        assert_eq!(fi1.weights.len(), 4);
        assert!(fi1.bias.is_finite() && fi1.weights.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn local_logit_arithmetic() {
        let x = Tensor::row_vector(&[2.0, 1.0]);
        let w = Tensor::row_vector(&[0.5, 1.0, -1.0, 0.0, 0.0, 0.0]);
        let z = local_logits(&x, &w, 2);
        assert_eq!(z.data(), &[1.5, 0.0]);
        let zero_x = Tensor::row_vector(&[0.0, 0.0]);
        let w = Tensor::row_vector(&[0.5, 1.0, -1.0, -3.0, 2.0, 2.0]);
        assert_eq!(local_logits(&zero_x, &w, 2).data(), &[0.5, -3.0]);
    }

    #[test]
    fn softmax_values() {
        let p = softmax_rows(&Tensor::row_vector(&[0.0, 0.0]));
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax_rows(&Tensor::row_vector(&[3f64.ln(), 0.0]));
        assert!((p.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((p.get(0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn initial_predictions_are_near_uniform() {
        let net = HyperNetwork::new(HyperConfig::new(2, 2), 3);
        let p = net
            .predict_proba(&Tensor::from_rows(&[vec![0.5, -1.0], vec![1.0, 1.0]]))
            .unwrap();
        for i in 0..2 {
            assert!((p.get(i, 0) - 0.5).abs() < 0.2);
        }
    }

    #[test]
    fn from_parts_round_trip() {
        let net = HyperNetwork::new(small(3, 2), 1);
        let back = HyperNetwork::from_parts(net.config.clone(), net.params.clone(), net.running.clone()).unwrap();
        let x = Tensor::from_vec(1, 3, vec![0.3, 0.2, 0.1]);
        assert_eq!(net.weights(&x).unwrap(), back.weights(&x).unwrap());
    }
}
