//! Analytic gradients against central differences over many random seeds.

use hyconex::flow::{FlowConfig, FlowModel};
use hyconex::gradcore::{relative_error, Tape, Tensor, Var, FD_STEP};
use hyconex::hypernet::{HyperConfig, HyperNetwork, Mode};
use hyconex::training::{hyconex_loss, JointContext, LossToggles};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error over all seeds, and coordinates that needed the
/// small-step retry.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradSummary {
    pub worst: f64,
    pub retried: usize,
    pub checked: usize,
}

impl GradSummary {
    fn absorb(&mut self, seed: u64, (worst, retried, checked): (f64, usize, usize)) -> Result<(), String> {
        if worst.is_nan() || worst >= TOLERANCE {
            return Err(format!("seed {seed}: relative error {worst:.3e}"));
        }
        self.worst = self.worst.max(worst);
        self.retried += retried;
        self.checked += checked;
        Ok(())
    }
}

/// Central differences that tolerate ReLU and hinge kinks: a coordinate
/// failing at the default step is retried with a step small enough not to
/// straddle a kink.
fn kink_aware_check(f: impl Fn(&[f64]) -> f64, point: &[f64], analytic: &[f64]) -> (f64, usize, usize) {
    let central = |i: usize, h: f64| {
        let mut up = point.to_vec();
        let mut down = point.to_vec();
        up[i] += h;
        down[i] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    };
    let mut worst: f64 = 0.0;
    let mut retried = 0;
    for i in 0..point.len() {
        let mut err = relative_error(analytic[i], central(i, FD_STEP));
        if err >= TOLERANCE {
            retried += 1;
            err = relative_error(analytic[i], central(i, 1e-6));
        }
        worst = worst.max(err);
    }
    (worst, retried, point.len())
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn split(shapes: &[[usize; 2]], flat: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    shapes
        .iter()
        .map(|&[r, c]| {
            let t = Tensor::from_vec(r, c, flat[off..off + r * c].to_vec());
            off += r * c;
            t
        })
        .collect()
}

/// A smooth graph touching every differentiable primitive used by the
/// classifier: affine maps, batch norm, tanh, sigmoid, exp, local logits,
/// cross-entropy, log-sum-exp, row norms and row and column plumbing.
fn composite(tape: &mut Tape<'_>, v: &[Var], labels: &[usize], classes: usize) -> Var {
    let (x, w1, b1, gamma, beta, w2, b2) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
    let (b, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let h = tape.affine(x, w1, b1);
    let (h, _) = tape.batch_norm(h, gamma, beta, None, 1e-5);
    let h = tape.tanh(h);
    let weights = tape.affine(h, w2, b2);
    let logits = tape.local_logits(weights, x, classes);
    let ce = tape.softmax_cross_entropy(logits, labels);
    let ce = tape.mean(ce);
    let lse = tape.log_sum_exp(logits);
    let lse = tape.sigmoid(lse);
    let lse = tape.mean(lse);
    let first = tape.slice_cols(weights, 1, d + 1);
    let norms = tape.row_norm(first);
    let norms = tape.mean(norms);
    let picked = tape.select_cols(h, &[0, 2]);
    let both = tape.concat_cols(&[picked, x]);
    let sq = tape.square(both);
    let sq = tape.scale(sq, -0.1);
    let e = tape.exp(sq);
    let e = tape.mean(e);
    let order: Vec<usize> = (0..b).rev().collect();
    let rows = tape.select_rows(x, &order);
    let m = tape.mul(rows, x);
    let m = tape.sum(m);
    let m = tape.scale(m, 0.05);
    let s = tape.add(ce, lse);
    let s = tape.add(s, norms);
    let s = tape.add(s, e);
    tape.add(s, m)
}

pub fn composite_suite(seeds: u64) -> Result<GradSummary, String> {
    let (b, d, hdim, k) = (5, 3, 4, 3);
    let mut summary = GradSummary::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = vec![
            random(&mut rng, b, d, 1.5),
            random(&mut rng, d, hdim, 1.0),
            random(&mut rng, 1, hdim, 0.5),
            random(&mut rng, 1, hdim, 1.5),
            random(&mut rng, 1, hdim, 0.5),
            random(&mut rng, hdim, k * (d + 1), 1.0),
            random(&mut rng, 1, k * (d + 1), 0.5),
        ];
        let shapes: Vec<[usize; 2]> = parts.iter().map(|t| t.shape()).collect();
        let point: Vec<f64> = parts.iter().flat_map(|t| t.data().to_vec()).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let eval = |flat: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = split(&shapes, flat).into_iter().map(|t| tape.leaf(t)).collect();
            let out = composite(&mut tape, &vars, &labels, k);
            let value = tape.value(out).item();
            if !grad {
                return (value, Vec::new());
            }
            let g = tape.backward(out);
            (value, vars.iter().flat_map(|&v| g.wrt(v).data().to_vec()).collect())
        };
        let (_, analytic) = eval(&point, true);
        summary.absorb(seed, kink_aware_check(|p| eval(p, false).0, &point, &analytic))?;
    }
    Ok(summary)
}

/// Gradient of the summed flow log density with respect to both the flow
/// parameters and the input.
pub fn flow_suite(seeds: u64) -> Result<GradSummary, String> {
    let mut summary = GradSummary::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (d, k) = (3, 2);
        let mut flow = FlowModel::new(FlowConfig::with_sizes(d, k, 2, 6, 1), seed);
        for t in flow.params.values_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = random(&mut rng, 4, d, 2.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..k)).collect();
        let eval = |flat: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let mut f = flow.clone();
            let n = f.params.num_scalars();
            f.params.assign_flat(&flat[..n]);
            let xt = Tensor::from_vec(4, d, flat[n..].to_vec());
            let mut tape = Tape::new();
            let bound = f.params.bind(&mut tape, true);
            let xv = tape.leaf(xt);
            let lp = f.log_prob_var(&mut tape, &bound, xv, &labels).unwrap();
            let out = tape.sum(lp);
            let value = tape.value(out).item();
            if !grad {
                return (value, Vec::new());
            }
            let g = tape.backward(out);
            let mut all: Vec<f64> = bound.gradients(&tape, &g).iter().flat_map(|t| t.data().to_vec()).collect();
            all.extend_from_slice(g.wrt(xv).data());
            (value, all)
        };
        let mut point = flow.params.flatten();
        point.extend_from_slice(x.data());
        let (_, analytic) = eval(&point, true);
        summary.absorb(seed, kink_aware_check(|p| eval(p, false).0, &point, &analytic))?;
    }
    Ok(summary)
}

/// Gradient of the full joint objective with every term switched on.
pub fn joint_suite(seeds: u64) -> Result<GradSummary, String> {
    let mut summary = GradSummary::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (d, k) = (2, 3);
        let net = HyperNetwork::new(
            HyperConfig {
                hidden: 6,
                blocks: 1,
                dropout: 0.2,
                head_init_scale: 0.3,
                ..HyperConfig::new(d, k)
            },
            seed,
        );
        let mut flow = FlowModel::new(FlowConfig::with_sizes(d, k, 2, 6, 1), seed + 7);
        for t in flow.params.values_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let xt = random(&mut rng, 4, d, 1.5);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..k)).collect();
        let thresholds: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..-1.0)).collect();
        let mode = Mode::Train { seed, step: 3, call: 0 };
        let eval = |flat: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let mut n = net.clone();
            n.params.assign_flat(flat);
            let mut tape = Tape::new();
            let bound = n.params.bind(&mut tape, true);
            let fb = flow.params.bind(&mut tape, false);
            let ctx = JointContext {
                net: &n,
                bound: &bound,
                flow: &flow,
                flow_bound: &fb,
                thresholds: &thresholds,
                toggles: LossToggles::FULL,
            };
            let x = tape.constant(&xt);
            let l = hyconex_loss(&mut tape, &ctx, x, &labels, [0.8, 0.1, 0.1], mode).unwrap();
            let value = tape.value(l.total).item();
            if !grad {
                return (value, Vec::new());
            }
            let g = tape.backward(l.total);
            (value, bound.gradients(&tape, &g).iter().flat_map(|t| t.data().to_vec()).collect())
        };
        let point = net.params.flatten();
        let (_, analytic) = eval(&point, true);
        summary.absorb(seed, kink_aware_check(|p| eval(p, false).0, &point, &analytic))?;
    }
    Ok(summary)
}
