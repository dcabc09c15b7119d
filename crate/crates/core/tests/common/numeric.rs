//! Flow and softmax identities that need no training beyond a few epochs.

use std::f64::consts::PI;

use hyconex::flow::{fit_flow, FlowConfig, FlowModel, FlowTrainConfig};
use hyconex::gradcore::{log_sum_exp, softmax_rows, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A flow with its output layers moved off zero so every layer acts.
pub fn perturbed(config: FlowConfig, seed: u64, amount: f64) -> FlowModel {
    let mut f = FlowModel::new(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for t in f.params.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-amount..amount);
        }
    }
    f
}

pub fn fit(flow: &mut FlowModel, x: &Tensor, labels: &[usize], epochs: usize) {
    let cfg = FlowTrainConfig {
        epochs,
        batch_size: 128,
        lr: 3e-3,
        min_lr: 1e-4,
        seed: 1,
        ..Default::default()
    };
    fit_flow(flow, x, labels, None, &cfg, None).unwrap();
}

/// Midpoint-rule mass of `p(· | label)` over `[-half, half]²`.
pub fn grid_mass(flow: &FlowModel, label: usize, half: f64, step: f64) -> f64 {
    let n = (2.0 * half / step).round() as usize;
    let mut pts = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        for j in 0..n {
            pts.push(-half + (i as f64 + 0.5) * step);
            pts.push(-half + (j as f64 + 0.5) * step);
        }
    }
    let x = Tensor::from_vec(n * n, 2, pts);
    let lp = flow.log_prob(&x, &vec![label; n * n]).unwrap();
    lp.iter().map(|v| v.exp()).sum::<f64>() * step * step
}

/// Two noisy half moons scaled into the unit box.
pub fn moons_points(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t: f64 = rng.random_range(0.0..PI);
        let (x, y) = if rng.random_bool(0.5) {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        pts.push(1.5 * (x - 0.5) + 0.15 * nx);
        pts.push(2.0 * (y - 0.25) + 0.15 * ny);
    }
    Tensor::from_vec(n, 2, pts)
}

/// Largest `|inverse(forward(z)) − z|` over random flows and latents.
pub fn invertibility(seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=5);
        let k = rng.random_range(1..=3);
        let flow = perturbed(FlowConfig::with_sizes(d, k, 4, 8, 2), seed, 0.3);
        let z = Tensor::from_vec(6, d, (0..6 * d).map(|_| rng.random_range(-2.5..2.5)).collect());
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..k)).collect();
        let x = flow.forward(&z, &labels).map_err(|e| e.to_string())?;
        let (back, _) = flow.inverse(&x, &labels).map_err(|e| e.to_string())?;
        for (a, b) in back.data().iter().zip(z.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst < 1e-8 {
        Ok(worst)
    } else {
        Err(format!("round trip error {worst:.3e}"))
    }
}

/// The zero flow is the identity, so `log p(x) = −(D/2) ln 2π − |x|²/2`.
pub fn identity_closed_form(seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=6);
        let flow = FlowModel::zeros(FlowConfig::new(d, 2));
        let x = Tensor::from_vec(4, d, (0..4 * d).map(|_| rng.random_range(-3.0..3.0)).collect());
        let lp = flow.log_prob(&x, &[0, 1, 1, 0]).map_err(|e| e.to_string())?;
        for (i, v) in lp.iter().enumerate() {
            let sq: f64 = x.row(i).iter().map(|a| a * a).sum();
            let exact = -0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * sq;
            worst = worst.max((v - exact).abs());
        }
    }
    if worst <= 1e-12 {
        Ok(worst)
    } else {
        Err(format!("closed form deviates by {worst:.3e}"))
    }
}

/// Mass over `[-6, 6]²` of random conditional flows and of a flow fitted to
/// two moons. Returns the largest deviation from 1.
pub fn density_integrates(seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let flow = perturbed(FlowConfig::with_sizes(2, 2, 4, 8, 2), seed, 0.1);
        for label in 0..2 {
            worst = worst.max((grid_mass(&flow, label, 6.0, 0.04) - 1.0).abs());
        }
    }
    let x = moons_points(800, 3);
    let mut flow = FlowModel::new(FlowConfig::with_sizes(2, 1, 4, 16, 2), 5);
    fit(&mut flow, &x, &[0; 800], 40);
    worst = worst.max((grid_mass(&flow, 0, 6.0, 0.04) - 1.0).abs());
    if worst <= 0.02 {
        Ok(worst)
    } else {
        Err(format!("mass deviates from 1 by {worst:.4}"))
    }
}

/// Softmax rows sum to one and are shift invariant; cross-entropy equals
/// `lse(z) − z_y` and its gradient is `softmax − onehot`.
pub fn softmax_identities(seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = (rng.random_range(1..=8), rng.random_range(2..=6));
        let scale = [1.0, 30.0, 300.0][seed as usize % 3];
        let z = Tensor::from_vec(b, k, (0..b * k).map(|_| rng.random_range(-scale..scale)).collect());
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let p = softmax_rows(&z);
        let shift = rng.random_range(-50.0..50.0);
        let shifted = Tensor::from_vec(b, k, z.data().iter().map(|v| v + shift).collect());
        let ps = softmax_rows(&shifted);
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let ce = tape.softmax_cross_entropy(zv, &y);
        let total = tape.sum(ce);
        let g = tape.backward(total);
        for i in 0..b {
            worst = worst.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
            let expect = log_sum_exp(z.row(i)) - z.get(i, y[i]);
            worst = worst.max((tape.value(ce).get(i, 0) - expect).abs() / expect.abs().max(1.0));
            for c in 0..k {
                worst = worst.max((p.get(i, c) - ps.get(i, c)).abs());
                let onehot = if c == y[i] { 1.0 } else { 0.0 };
                worst = worst.max((g.wrt(zv).get(i, c) - (p.get(i, c) - onehot)).abs());
            }
        }
    }
    if worst <= 1e-9 {
        Ok(worst)
    } else {
        Err(format!("identity deviates by {worst:.3e}"))
    }
}
