//! Class-conditional masked autoregressive flow.
//!
//! Each layer is an affine autoregressive map in the density direction,
//! `z_i = (x_i − t_i(x_<i, y)) · exp(−s_i(x_<i, y))`, where `<i` follows the
//! layer's variable order. Orders alternate between natural and reversed.
//! Shifts and log-scales come from a masked residual MLP whose every layer
//! also sees the one-hot class vector. The conditioner reads its inputs
//! through `5·tanh(v/5)`, so shifts and log-scales level off far from the
//! data and log densities decay quadratically there. Log-scales are
//! squashed to `10·tanh(raw/10)` so every layer stays invertible.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::FeatureLayout;
use crate::error::{Error, Result};
use crate::gradcore::{Adam, BoundParams, CosineSchedule, ParamId, ParamStore, Tape, Tensor, Var};

pub const LOG_SCALE_BOUND: f64 = 10.0;
pub const CONDITIONER_INPUT_BOUND: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub classes: usize,
    pub layers: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Variable order of every layer.
    pub orders: Vec<Vec<usize>>,
}

impl FlowConfig {
    /// 8 layers of 4 masked residual blocks with 16 hidden features.
    pub fn new(dim: usize, classes: usize) -> Self {
        Self::with_sizes(dim, classes, 8, 16, 4)
    }

    pub fn with_sizes(dim: usize, classes: usize, layers: usize, hidden: usize, blocks: usize) -> Self {
        let orders = (0..layers)
            .map(|l| {
                let mut o: Vec<usize> = (0..dim).collect();
                if l % 2 == 1 {
                    o.reverse();
                }
                o
            })
            .collect();
        Self {
            dim,
            classes,
            layers,
            hidden,
            blocks,
            orders,
        }
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    w0: ParamId,
    c0: ParamId,
    b0: ParamId,
    w1: ParamId,
    b1: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    in_w: ParamId,
    in_c: ParamId,
    in_b: ParamId,
    blocks: Vec<BlockIds>,
    out_w: ParamId,
    out_c: ParamId,
    out_b: ParamId,
}

/// Connectivity masks of one layer, `in × out` like the weights.
#[derive(Clone, Debug)]
struct LayerMasks {
    input: Tensor,
    hidden: Tensor,
    output: Tensor,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub params: ParamStore,
    layers: Vec<LayerIds>,
    masks: Vec<LayerMasks>,
}

fn masks_for(order: &[usize], hidden: usize) -> LayerMasks {
    let d = order.len();
    let mut deg_in = vec![0usize; d];
    for (pos, &var) in order.iter().enumerate() {
        deg_in[var] = pos + 1;
    }
    let span = d.saturating_sub(1).max(1);
    let deg_h: Vec<usize> = (0..hidden).map(|h| h % span + 1).collect();
    let mut input = Tensor::zeros(d, hidden);
    for i in 0..d {
        for h in 0..hidden {
            if deg_h[h] >= deg_in[i] {
                input.set(i, h, 1.0);
            }
        }
    }
    let mut hid = Tensor::zeros(hidden, hidden);
    for a in 0..hidden {
        for b in 0..hidden {
            if deg_h[b] >= deg_h[a] {
                hid.set(a, b, 1.0);
            }
        }
    }
    let mut output = Tensor::zeros(hidden, 2 * d);
    for h in 0..hidden {
        for i in 0..d {
            if deg_in[i] > deg_h[h] {
                output.set(h, i, 1.0);
                output.set(h, d + i, 1.0);
            }
        }
    }
    LayerMasks {
        input,
        hidden: hid,
        output,
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-b..=b)).collect())
}

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        t.set(i, y, 1.0);
    }
    t
}

/// Per-row log density of the standard normal in `R^D`.
fn std_normal_log_density(z: &Tensor) -> Vec<f64> {
    let c = -0.5 * z.cols() as f64 * (2.0 * PI).ln();
    (0..z.rows())
        .map(|i| c - 0.5 * z.row(i).iter().map(|v| v * v).sum::<f64>())
        .collect()
}

impl FlowModel {
    /// Random hidden layers and zero output layers: the initial flow is the
    /// identity but every parameter receives gradient.
    pub fn new(config: FlowConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |rows, cols, fan_in, output| {
            if output {
                Tensor::zeros(rows, cols)
            } else {
                uniform(&mut rng, rows, cols, fan_in)
            }
        })
    }

    /// Every parameter zero; maps `x` to itself.
    pub fn zeros(config: FlowConfig) -> Self {
        Self::build(config, |rows, cols, _, _| Tensor::zeros(rows, cols))
    }

    fn build(config: FlowConfig, mut init: impl FnMut(usize, usize, usize, bool) -> Tensor) -> Self {
        assert_eq!(config.orders.len(), config.layers, "one order per layer");
        let (d, k, h) = (config.dim, config.classes, config.hidden);
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(config.layers);
        let mut masks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let fan = d + k;
            let in_w = params.add(format!("l{l}.in.weight"), init(d, h, fan, false));
            let in_c = params.add(format!("l{l}.in.context"), init(k, h, fan, false));
            let in_b = params.add(format!("l{l}.in.bias"), init(1, h, fan, false));
            let blocks = (0..config.blocks)
                .map(|b| BlockIds {
                    w0: params.add(format!("l{l}.b{b}.fc0.weight"), init(h, h, h + k, false)),
                    c0: params.add(format!("l{l}.b{b}.fc0.context"), init(k, h, h + k, false)),
                    b0: params.add(format!("l{l}.b{b}.fc0.bias"), init(1, h, h + k, false)),
                    w1: params.add(format!("l{l}.b{b}.fc1.weight"), init(h, h, h, false)),
                    b1: params.add(format!("l{l}.b{b}.fc1.bias"), init(1, h, h, false)),
                })
                .collect();
            let out_w = params.add(format!("l{l}.out.weight"), init(h, 2 * d, h + k, true));
            let out_c = params.add(format!("l{l}.out.context"), init(k, 2 * d, h + k, true));
            let out_b = params.add(format!("l{l}.out.bias"), init(1, 2 * d, h + k, true));
            layers.push(LayerIds {
                in_w,
                in_c,
                in_b,
                blocks,
                out_w,
                out_c,
                out_b,
            });
            masks.push(masks_for(&config.orders[l], h));
        }
        Self {
            config,
            params,
            layers,
            masks,
        }
    }

    pub fn from_parts(config: FlowConfig, params: ParamStore) -> Result<Self> {
        let template = Self::zeros(config);
        if template.params.len() != params.len() {
            return Err(Error::Bundle("flow parameter count mismatch".into()));
        }
        for ((_, n1, t1), (_, n2, t2)) in template.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Bundle(format!("flow parameter `{n2}` does not match `{n1}`")));
            }
        }
        Ok(Self { params, ..template })
    }

    /// Shift and squashed log-scale of layer `l`, each `B × D`.
    fn conditioner<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &BoundParams,
        l: usize,
        x: Var,
        ctx: Var,
    ) -> (Var, Var) {
        let ids = &self.layers[l];
        let masks = &self.masks[l];
        let p = |id: ParamId| bound.var(id);
        let d = self.config.dim;

        let u = tape.scale(x, 1.0 / CONDITIONER_INPUT_BOUND);
        let u = tape.tanh(u);
        let u = tape.scale(u, CONDITIONER_INPUT_BOUND);
        let h = tape.masked_affine(u, p(ids.in_w), &masks.input, p(ids.in_b));
        let c = tape.matmul(ctx, p(ids.in_c));
        let mut h = tape.add(h, c);
        for blk in &ids.blocks {
            let t = tape.relu(h);
            let t = tape.masked_affine(t, p(blk.w0), &masks.hidden, p(blk.b0));
            let c = tape.matmul(ctx, p(blk.c0));
            let t = tape.add(t, c);
            let t = tape.relu(t);
            let t = tape.masked_affine(t, p(blk.w1), &masks.hidden, p(blk.b1));
            h = tape.add(h, t);
        }
        let h = tape.relu(h);
        let out = tape.masked_affine(h, p(ids.out_w), &masks.output, p(ids.out_b));
        let c = tape.matmul(ctx, p(ids.out_c));
        let out = tape.add(out, c);
        let shift = tape.slice_cols(out, 0, d);
        let raw = tape.slice_cols(out, d, 2 * d);
        let raw = tape.scale(raw, 1.0 / LOG_SCALE_BOUND);
        let raw = tape.tanh(raw);
        let log_scale = tape.scale(raw, LOG_SCALE_BOUND);
        (shift, log_scale)
    }

    /// Density direction on a tape: returns `z` (`B × D`) and
    /// `log|det ∂z/∂x|` (`B × 1`).
    pub fn inverse_var<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &BoundParams,
        x: Var,
        labels: &[usize],
    ) -> Result<(Var, Var)> {
        let [b, d] = tape.shape(x);
        if d != self.config.dim {
            return Err(Error::InvalidArgument(format!(
                "flow expects {} features, got {d}",
                self.config.dim
            )));
        }
        if labels.len() != b || labels.iter().any(|&y| y >= self.config.classes) {
            return Err(Error::InvalidArgument("invalid flow condition labels".into()));
        }
        let ctx = tape.constant(one_hot(labels, self.config.classes));
        let mut z = x;
        let mut log_det: Option<Var> = None;
        for l in 0..self.config.layers {
            let (shift, log_scale) = self.conditioner(tape, bound, l, z, ctx);
            let centered = tape.sub(z, shift);
            let neg = tape.scale(log_scale, -1.0);
            let inv_scale = tape.exp(neg);
            z = tape.mul(centered, inv_scale);
            if !tape.value(z).is_finite() {
                return Err(Error::FlowNonFinite { layer: l });
            }
            let ld = tape.sum_cols(neg);
            log_det = Some(match log_det {
                Some(acc) => tape.add(acc, ld),
                None => ld,
            });
        }
        let log_det = match log_det {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(b, 1)),
        };
        Ok((z, log_det))
    }

    /// `log p(x | y)` on a tape, `B × 1`.
    pub fn log_prob_var<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &BoundParams,
        x: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let (z, log_det) = self.inverse_var(tape, bound, x, labels)?;
        let d = self.config.dim as f64;
        let sq = tape.square(z);
        let sq = tape.sum_cols(sq);
        let base = tape.scale(sq, -0.5);
        let [b, _] = tape.shape(z);
        let c = tape.constant(Tensor::full(b, 1, -0.5 * d * (2.0 * PI).ln()));
        let base = tape.add(base, c);
        Ok(tape.add(base, log_det))
    }

    /// Maps data to latent space: `(z, log|det ∂z/∂x|)`.
    pub fn inverse(&self, x: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (z, ld) = self.inverse_var(&mut tape, &bound, xv, labels)?;
        Ok((tape.value(z).clone(), tape.value(ld).data().to_vec()))
    }

    /// Maps latent samples to data space by `D` sequential passes per layer.
    pub fn forward(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (b, d) = (z.rows(), self.config.dim);
        if z.cols() != d || labels.len() != b {
            return Err(Error::InvalidArgument("flow forward: shape mismatch".into()));
        }
        let ctx_t = one_hot(labels, self.config.classes);
        let mut cur = z.clone();
        for l in (0..self.config.layers).rev() {
            let mut x = Tensor::zeros(b, d);
            for &var in &self.config.orders[l] {
                let mut tape = Tape::new();
                let bound = self.params.bind(&mut tape, false);
                let xv = tape.constant(&x);
                let ctx = tape.constant(&ctx_t);
                let (shift, log_scale) = self.conditioner(&mut tape, &bound, l, xv, ctx);
                let (sh, ls) = (tape.value(shift).clone(), tape.value(log_scale).clone());
                drop(tape);
                for i in 0..b {
                    let v = cur.get(i, var) * ls.get(i, var).exp() + sh.get(i, var);
                    x.set(i, var, v);
                }
            }
            if !x.is_finite() {
                return Err(Error::FlowNonFinite { layer: l });
            }
            cur = x;
        }
        Ok(cur)
    }

    /// `log p(x | y)` for each row.
    pub fn log_prob(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let (z, ld) = self.inverse(x, labels)?;
        Ok(std_normal_log_density(&z)
            .into_iter()
            .zip(ld)
            .map(|(a, b)| a + b)
            .collect())
    }

    /// Single-layer density map, for structural checks.
    pub fn layer_inverse(&self, layer: usize, x: &Tensor, labels: &[usize]) -> Tensor {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let ctx = tape.constant(one_hot(labels, self.config.classes));
        let (shift, log_scale) = self.conditioner(&mut tape, &bound, layer, xv, ctx);
        let c = tape.sub(xv, shift);
        let n = tape.scale(log_scale, -1.0);
        let e = tape.exp(n);
        let z = tape.mul(c, e);
        tape.value(z).clone()
    }

    /// Products of the connectivity masks of `layer`, `D × D`: entry
    /// `(j, i)` is nonzero when output `i` can depend on input `j`.
    pub fn mask_connectivity(&self, layer: usize) -> Tensor {
        let m = &self.masks[layer];
        let mut path = crate::gradcore::matmul(&m.input, &m.hidden);
        for _ in 1..self.config.blocks {
            path = crate::gradcore::matmul(&path, &m.hidden);
        }
        let full = crate::gradcore::matmul(&path, &m.output);
        full.select_cols(&(0..self.config.dim).collect::<Vec<_>>())
    }
}

/// Training options for [`fit_flow`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub seed: u64,
    /// Dequantization noise added to one-hot blocks of each batch.
    pub noise_sigma: f64,
    /// Stop after this many epochs without a better validation NLL and
    /// restore the best parameters; 0 disables both. Needs validation data.
    pub patience: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            min_lr: 1e-5,
            seed: 0,
            noise_sigma: 0.0,
            patience: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowFitReport {
    pub steps: u64,
    /// Mean negative log-likelihood over the last epoch.
    pub final_nll: f64,
    pub epoch_nll: Vec<f64>,
    /// Validation NLL after every epoch, when validation data was given.
    pub val_nll: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

/// Adds `N(0, σ²)` to the one-hot coordinates of every row.
pub fn add_group_noise(x: &mut Tensor, layout: &FeatureLayout, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 || layout.groups.is_empty() {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        for g in &layout.groups {
            for v in &mut row[g.span.clone()] {
                *v += normal.sample(rng);
            }
        }
    }
}

/// Shuffled mini-batches of `0..n`.
pub(crate) fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn mean_nll(flow: &FlowModel, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let lp = flow.log_prob(x, labels)?;
    Ok(-lp.iter().sum::<f64>() / lp.len().max(1) as f64)
}

/// Maximum-likelihood fit with Adam and a cosine schedule.
///
/// With `validation`, the validation NLL is tracked every epoch; when
/// `patience` is nonzero the parameters of the best epoch are kept.
pub fn fit_flow(
    flow: &mut FlowModel,
    x: &Tensor,
    labels: &[usize],
    layout: Option<&FeatureLayout>,
    cfg: &FlowTrainConfig,
    validation: Option<(&Tensor, &[usize])>,
) -> Result<FlowFitReport> {
    let n = x.rows();
    if labels.len() != n || validation.is_some_and(|(v, y)| v.rows() != y.len()) {
        return Err(Error::InvalidArgument("label count mismatch".into()));
    }
    let mut report = FlowFitReport {
        steps: 0,
        final_nll: f64::NAN,
        epoch_nll: Vec::new(),
        val_nll: Vec::new(),
        best_epoch: None,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    if cfg.epochs == 0 || n == 0 {
        return Ok(report);
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size.max(1)) as u64;
    let sched = CosineSchedule::new(cfg.lr, cfg.min_lr, steps_per_epoch * cfg.epochs as u64);
    let mut adam = Adam::new(&flow.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in batches(n, cfg.batch_size, &mut rng) {
            let mut xb = x.select_rows(&idx);
            if let Some(layout) = layout {
                add_group_noise(&mut xb, layout, cfg.noise_sigma, &mut rng);
            }
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let step = report.steps;
            let grads = {
                let mut tape = Tape::new();
                let bound = flow.params.bind(&mut tape, true);
                let xv = tape.constant(&xb);
                let lp = flow
                    .log_prob_var(&mut tape, &bound, xv, &yb)
                    .map_err(|e| divergence(step, e.to_string()))?;
                let m = tape.mean(lp);
                let nll = tape.scale(m, -1.0);
                let value = tape.value(nll).item();
                if !value.is_finite() {
                    return Err(divergence(step, "non-finite negative log-likelihood".into()));
                }
                total += value * idx.len() as f64;
                let g = tape.backward(nll);
                bound.gradients(&tape, &g)
            };
            adam.step(&mut flow.params, &grads, sched.lr(step))
                .map_err(|e| divergence(step, e.to_string()))?;
            report.steps += 1;
        }
        report.epoch_nll.push(total / n as f64);
        if let Some((vx, vy)) = validation {
            let v = mean_nll(flow, vx, vy)?;
            report.val_nll.push(v);
            if v.is_finite() && best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, flow.params.clone()));
                report.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    report.final_nll = *report.epoch_nll.last().unwrap();
    if let Some((_, params)) = best.filter(|_| cfg.patience > 0) {
        flow.params = params;
    }
    Ok(report)
}

fn divergence(step: u64, reason: String) -> Error {
    Error::Divergence {
        phase: "flow".into(),
        step,
        reason,
    }
}

/// Log-density thresholds: per-class and global medians over training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityThresholds {
    pub per_class: Vec<f64>,
    pub global: f64,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl DensityThresholds {
    /// Medians of the given log densities; a class without rows falls back
    /// to the global median.
    pub fn from_log_densities(log_densities: &[f64], labels: &[usize], classes: usize) -> Self {
        let global = median(log_densities);
        let per_class = (0..classes)
            .map(|c| {
                let v: Vec<f64> = log_densities
                    .iter()
                    .zip(labels)
                    .filter(|(_, &y)| y == c)
                    .map(|(&d, _)| d)
                    .collect();
                if v.is_empty() {
                    global
                } else {
                    median(&v)
                }
            })
            .collect();
        Self { per_class, global }
    }
}

pub fn density_thresholds(flow: &FlowModel, x: &Tensor, labels: &[usize]) -> Result<DensityThresholds> {
    let lp = flow.log_prob(x, labels)?;
    Ok(DensityThresholds::from_log_densities(&lp, labels, flow.config.classes))
}
