//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends one node holding its forward value and whatever
//! context its backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse, so each record is visited exactly once. Shape errors panic when
//! the op is recorded, never during the backward sweep.
//!
//! Leaves may borrow their values (`Cow::Borrowed`), so binding a large
//! parameter set to a tape does not copy it.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Cow<'a, Tensor>),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    LogSumExp {
        x: Var,
        softmax: Tensor,
    },
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    RowNorm(Var),
    LocalLogits {
        weights: Var,
        x: Var,
        classes: usize,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op<'a>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when the batch has one row).
    pub var: Vec<f64>,
}

/// Key for the counter-based dropout generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub layer: u64,
}

impl DropoutKey {
    fn stream_seed(self) -> u64 {
        let mut h = self.seed ^ 0x9E37_79B9_7F4A_7C15;
        for v in [self.step, self.layer] {
            h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            h ^= h >> 31;
        }
        h
    }

    /// Inverted-dropout mask: kept entries are `1/(1-p)`, dropped are 0.
    pub fn mask(self, rows: usize, cols: usize, p: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.stream_seed());
        let keep = 1.0 - p;
        let data = (0..rows * cols)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op<'a>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: impl Into<Cow<'a, Tensor>>) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: impl Into<Cow<'a, Tensor>>) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.cols(),
            vb.rows(),
            "matmul: {:?} x {:?}",
            va.shape(),
            vb.shape()
        );
        let mut out = Tensor::zeros(va.rows(), vb.cols());
        gemm(va, false, vb, false, &mut out, false);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x + row`, broadcasting the `1 × n` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert!(
            vr.rows() == 1 && vr.cols() == vx.cols(),
            "add_row: {:?} + {:?}",
            vx.shape(),
            vr.shape()
        );
        let mut out = vx.clone();
        let r = vr.data();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row), &[x, row])
    }

    /// `x · weight + bias`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let h = self.matmul(x, weight);
        self.add_row(h, bias)
    }

    /// `x · (weight ⊙ mask) + bias` for a constant connectivity mask.
    pub fn masked_affine(
        &mut self,
        x: Var,
        weight: Var,
        mask: impl Into<Cow<'a, Tensor>>,
        bias: Var,
    ) -> Var {
        let w = self.mul_const(weight, mask);
        self.affine(x, w, bias)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: impl Into<Cow<'a, Tensor>>) -> Var {
        let c = c.into();
        assert_eq!(self.shape(x), c.shape(), "mul_const: shape mismatch");
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        self.push(out, Op::MulConst(x, c), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scaled(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    /// `max(a - b, 0)`; the subgradient at the kink is 0.
    pub fn hinge(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        self.relu(d)
    }

    /// Batch normalization over the rows of `x`.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the supplied `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var, Option<BatchStats>) {
        let vx = self.value(x);
        let (b, n) = (vx.rows(), vx.cols());
        assert_eq!(self.shape(gamma), [1, n], "batch_norm: gamma shape");
        assert_eq!(self.shape(beta), [1, n], "batch_norm: beta shape");
        let (mean, var_biased, stats) = match running {
            Some((m, v)) => {
                assert_eq!(m.len(), n);
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                assert!(b > 0, "batch_norm on empty batch");
                let mut mean = vec![0.0; n];
                for i in 0..b {
                    for (m, v) in mean.iter_mut().zip(vx.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; n];
                for i in 0..b {
                    for ((s, v), m) in var.iter_mut().zip(vx.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased: Vec<f64> = if b > 1 {
                    var.iter().map(|s| s / (b - 1) as f64).collect()
                } else {
                    vec![0.0; n]
                };
                var.iter_mut().for_each(|s| *s /= b as f64);
                (
                    mean.clone(),
                    var,
                    Some(BatchStats {
                        mean,
                        var: unbiased,
                    }),
                )
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(b, n);
        for i in 0..b {
            let src = vx.row(i);
            for (j, o) in xhat.row_mut(i).iter_mut().enumerate() {
                *o = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut out = xhat.clone();
        for i in 0..b {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[j] + be[j];
            }
        }
        let batch_stats = stats.is_some();
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        (v, stats)
    }

    /// Inverted dropout with a deterministic mask; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, key: DropoutKey) -> Var {
        if p <= 0.0 {
            return x;
        }
        let [r, c] = self.shape(x);
        let mask = key.mask(r, c, p);
        self.mul_const(x, mask)
    }

    /// Per-row cross-entropy `-log softmax(logits)[target]`, shape `B × 1`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), targets.len(), "cross-entropy: target count");
        let k = z.cols();
        let mut probs = Tensor::zeros(z.rows(), k);
        let mut loss = Tensor::zeros(z.rows(), 1);
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < k, "cross-entropy: target {t} out of range {k}");
            let row = z.row(i);
            let lse = log_sum_exp(row);
            for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            loss.set(i, 0, lse - row[t]);
        }
        self.push(
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Row-wise log-sum-exp, shape `B × 1`.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = Tensor::zeros(vx.rows(), 1);
        let mut softmax = Tensor::zeros(vx.rows(), vx.cols());
        for i in 0..vx.rows() {
            let lse = log_sum_exp(vx.row(i));
            out.set(i, 0, lse);
            for (s, &v) in softmax.row_mut(i).iter_mut().zip(vx.row(i)) {
                *s = (v - lse).exp();
            }
        }
        self.push(out, Op::LogSumExp { x, softmax }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert!(!v.is_empty(), "mean of empty tensor");
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::MeanAll(x), &[x])
    }

    /// Sum across columns: `B × n → B × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
        let out = Tensor::from_vec(v.rows(), 1, data);
        self.push(out, Op::SumCols(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0])[0];
        let cols: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p)[0], rows, "concat_cols: row mismatch");
                self.shape(p)[1]
            })
            .sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let dst = out.row_mut(i);
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(i);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0])[1];
        let values: Vec<&Tensor> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p)[1], cols, "concat_rows: column mismatch");
                self.value(p)
            })
            .collect();
        let out = Tensor::vstack(&values);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn select_cols(&mut self, x: Var, indices: &[usize]) -> Var {
        let v = self.value(x);
        assert!(
            indices.iter().all(|&c| c < v.cols()),
            "select_cols: index out of range"
        );
        let out = v.select_cols(indices);
        self.push(out, Op::SelectCols(x, indices.to_vec()), &[x])
    }

    /// Contiguous column range `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let idx: Vec<usize> = (start..end).collect();
        self.select_cols(x, &idx)
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let v = self.value(x);
        assert!(
            indices.iter().all(|&r| r < v.rows()),
            "select_rows: index out of range"
        );
        let out = v.select_rows(indices);
        self.push(out, Op::SelectRows(x, indices.to_vec()), &[x])
    }

    /// Euclidean norm of each row, `B × 1`; the gradient at a zero row is 0.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows())
            .map(|i| v.row(i).iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::from_vec(v.rows(), 1, data);
        self.push(out, Op::RowNorm(x), &[x])
    }

    /// Per-row local linear logits.
    ///
    /// `weights` is `B × K(D+1)` holding, for each row, `K` blocks of
    /// `(bias, w_1..w_D)`; `x` is `B × D`. Returns `B × K` with
    /// `z[b,k] = bias_k + Σ_d w_{k,d} x_d`.
    pub fn local_logits(&mut self, weights: Var, x: Var, classes: usize) -> Var {
        let (vw, vx) = (self.value(weights), self.value(x));
        let (b, d) = (vx.rows(), vx.cols());
        assert_eq!(
            vw.shape(),
            [b, classes * (d + 1)],
            "local_logits: weights {:?} vs x {:?}, K={classes}",
            vw.shape(),
            vx.shape()
        );
        let mut out = Tensor::zeros(b, classes);
        for i in 0..b {
            let w = vw.row(i);
            let xi = vx.row(i);
            for k in 0..classes {
                let blk = &w[k * (d + 1)..(k + 1) * (d + 1)];
                let z = blk[0] + blk[1..].iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
                out.set(i, k, z);
            }
        }
        self.push(out, Op::LocalLogits { weights, x, classes }, &[weights, x])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are returned for every leaf created with [`Tape::leaf`];
    /// leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), [1, 1], "backward from non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }
        let leaf_grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match node.op {
                    Op::Leaf if node.requires_grad => Some(
                        g.unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols())),
                    ),
                    _ => None,
                }
            })
            .collect();
        Gradients { grads: leaf_grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let [r, c] = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
        if let Some(s) = self.slot(grads, v) {
            s.add_assign(g);
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if let Some(s) = self.slot(grads, v) {
            f(s);
        }
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, |s| gemm(g, false, vb, true, s, true));
                self.acc_with(grads, *b, |s| gemm(va, true, g, false, s, true));
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g);
                self.acc_with(grads, *row, |s| {
                    let s = s.data_mut();
                    for i in 0..g.rows() {
                        for (a, b) in s.iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                self.acc_with(grads, *b, |s| {
                    for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                        *a -= b;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, &g.zip_map(vb, |x, y| x * y));
                self.acc(grads, *b, &g.zip_map(va, |x, y| x * y));
            }
            Op::MulConst(x, c) => self.acc(grads, *x, &g.zip_map(c, |a, b| a * b)),
            Op::Scale(x, s) => self.acc(grads, *x, &g.scaled(*s)),
            Op::Relu(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, &g.zip_map(vx, |a, v| if v > 0.0 { a } else { 0.0 }));
            }
            Op::Tanh(x) => self.acc(grads, *x, &g.zip_map(out, |a, y| a * (1.0 - y * y))),
            Op::Sigmoid(x) => self.acc(grads, *x, &g.zip_map(out, |a, y| a * y * (1.0 - y))),
            Op::Exp(x) => self.acc(grads, *x, &g.zip_map(out, |a, y| a * y)),
            Op::Square(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, &g.zip_map(vx, |a, v| 2.0 * a * v));
            }
            Op::Abs(x) => {
                let vx = self.value(*x);
                self.acc(
                    grads,
                    *x,
                    &g.zip_map(vx, |a, v| {
                        if v > 0.0 {
                            a
                        } else if v < 0.0 {
                            -a
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, n) = (g.rows(), g.cols());
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..b {
                    for j in 0..n {
                        dgamma[j] += g.get(i, j) * xhat.get(i, j);
                        dbeta[j] += g.get(i, j);
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = Tensor::zeros(b, n);
                    if *batch_stats {
                        let bf = b as f64;
                        for j in 0..n {
                            // dxhat = g * gamma; sums over the batch
                            let sum_dxhat = dbeta[j] * gam[j];
                            let sum_dxhat_xhat = dgamma[j] * gam[j];
                            for i in 0..b {
                                let dxhat = g.get(i, j) * gam[j];
                                dx.set(
                                    i,
                                    j,
                                    inv_std[j] / bf
                                        * (bf * dxhat - sum_dxhat - xhat.get(i, j) * sum_dxhat_xhat),
                                );
                            }
                        }
                    } else {
                        for i in 0..b {
                            for j in 0..n {
                                dx.set(i, j, g.get(i, j) * gam[j] * inv_std[j]);
                            }
                        }
                    }
                    self.acc(grads, *x, &dx);
                }
                self.acc(grads, *gamma, &Tensor::from_vec(1, n, dgamma));
                self.acc(grads, *beta, &Tensor::from_vec(1, n, dbeta));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let gi = g.get(i, 0);
                    let row = d.row_mut(i);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gi);
                }
                self.acc(grads, *logits, &d);
            }
            Op::LogSumExp { x, softmax } => {
                let mut d = softmax.clone();
                for i in 0..d.rows() {
                    let gi = g.get(i, 0);
                    d.row_mut(i).iter_mut().for_each(|v| *v *= gi);
                }
                self.acc(grads, *x, &d);
            }
            Op::SumAll(x) => {
                let [r, c] = self.shape(*x);
                self.acc(grads, *x, &Tensor::full(r, c, g.item()));
            }
            Op::MeanAll(x) => {
                let [r, c] = self.shape(*x);
                self.acc(grads, *x, &Tensor::full(r, c, g.item() / (r * c) as f64));
            }
            Op::SumCols(x) => {
                self.acc_with(grads, *x, |s| {
                    for i in 0..s.rows() {
                        let gi = g.get(i, 0);
                        s.row_mut(i).iter_mut().for_each(|v| *v += gi);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.acc_with(grads, p, |s| {
                        for i in 0..g.rows() {
                            for (a, b) in s.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                                *a += b;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    self.acc_with(grads, p, |s| {
                        for i in 0..r {
                            for (a, b) in s.row_mut(i).iter_mut().zip(g.row(off + i)) {
                                *a += b;
                            }
                        }
                    });
                    off += r;
                }
            }
            Op::SelectCols(x, idx) => {
                self.acc_with(grads, *x, |s| {
                    for i in 0..g.rows() {
                        let gr = g.row(i);
                        let sr = s.row_mut(i);
                        for (j, &c) in idx.iter().enumerate() {
                            sr[c] += gr[j];
                        }
                    }
                });
            }
            Op::SelectRows(x, idx) => {
                self.acc_with(grads, *x, |s| {
                    for (j, &r) in idx.iter().enumerate() {
                        for (a, b) in s.row_mut(r).iter_mut().zip(g.row(j)) {
                            *a += b;
                        }
                    }
                });
            }
            Op::RowNorm(x) => {
                let vx = self.value(*x);
                self.acc_with(grads, *x, |s| {
                    for i in 0..vx.rows() {
                        let norm = out.get(i, 0);
                        if norm > 0.0 {
                            let f = g.get(i, 0) / norm;
                            for (a, v) in s.row_mut(i).iter_mut().zip(vx.row(i)) {
                                *a += f * v;
                            }
                        }
                    }
                });
            }
            Op::LocalLogits {
                weights,
                x,
                classes,
            } => {
                let (vw, vx) = (self.value(*weights), self.value(*x));
                let d = vx.cols();
                let k = *classes;
                self.acc_with(grads, *weights, |s| {
                    for i in 0..vx.rows() {
                        let xi = vx.row(i);
                        let sr = s.row_mut(i);
                        for c in 0..k {
                            let gz = g.get(i, c);
                            let blk = &mut sr[c * (d + 1)..(c + 1) * (d + 1)];
                            blk[0] += gz;
                            for (a, v) in blk[1..].iter_mut().zip(xi) {
                                *a += gz * v;
                            }
                        }
                    }
                });
                self.acc_with(grads, *x, |s| {
                    for i in 0..vx.rows() {
                        let wr = vw.row(i);
                        let sr = s.row_mut(i);
                        for c in 0..k {
                            let gz = g.get(i, c);
                            let blk = &wr[c * (d + 1) + 1..(c + 1) * (d + 1)];
                            for (a, w) in sr.iter_mut().zip(blk) {
                                *a += gz * w;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Gradients of one backward sweep, indexed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; panics if `v` is not a differentiable leaf.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .unwrap_or_else(|| panic!("no gradient recorded for {v:?}"))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax without a tape.
pub fn softmax_rows(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    for i in 0..z.rows() {
        let lse = log_sum_exp(z.row(i));
        out.row_mut(i).iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_gradient_is_piecewise() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[2.0, -1.0, 0.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[3.0, -4.0]));
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        assert_eq!(tape.value(half).item(), 12.5);
        let g = tape.backward(half);
        assert_eq!(g.wrt(x).data(), &[3.0, -4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::row_vector(&[1.0, 1.0]));
        let y = tape.square(x);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x).item(), 4.0);
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(3.0));
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(c, x);
        let g = tape.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).item(), 3.0);
    }

    #[test]
    fn hinge_is_zero_at_kink() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::row_vector(&[1.0, 2.0, 0.5]));
        let b = tape.leaf(Tensor::row_vector(&[1.0, 1.0, 1.0]));
        let h = tape.hinge(a, b);
        assert_eq!(tape.value(h).data(), &[0.0, 1.0, 0.0]);
        let s = tape.sum(h);
        let g = tape.backward(s);
        assert_eq!(g.wrt(a).data(), &[0.0, 1.0, 0.0]);
        assert_eq!(g.wrt(b).data(), &[0.0, -1.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn shape_errors_fail_at_record_time() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        tape.matmul(a, b);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let z = [50.0, -50.0, 3.0];
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::row_vector(&z));
        let ce = tape.softmax_cross_entropy(l, &[2]);
        let p = softmax_rows(&Tensor::row_vector(&z));
        assert!((tape.value(ce).item() + p.get(0, 2).ln()).abs() < 1e-9);
    }

    #[test]
    fn dropout_mask_is_keyed() {
        let k = DropoutKey {
            seed: 1,
            step: 2,
            layer: 3,
        };
        assert_eq!(k.mask(4, 8, 0.25), k.mask(4, 8, 0.25));
        let other = DropoutKey { layer: 4, ..k };
        assert_ne!(k.mask(4, 8, 0.25), other.mask(4, 8, 0.25));
        assert!(k
            .mask(16, 16, 0.25)
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
    }
}
