//! Training objectives recorded on a tape.

use crate::error::Result;
use crate::flow::FlowModel;
use crate::gradcore::{BatchStats, BoundParams, Tape, Tensor, Var};
use crate::hypernet::{HyperNetwork, Mode};

use super::config::LossToggles;

/// `(input, target)` for every class other than each row's label.
pub fn alternative_pairs(labels: &[usize], classes: usize) -> Vec<(usize, usize)> {
    labels
        .iter()
        .enumerate()
        .flat_map(|(i, &y)| (0..classes).filter(move |&m| m != y).map(move |m| (i, m)))
        .collect()
}

/// Rows of `W_m`'s weight coordinates (bias excluded), one per pair.
fn pair_weights(tape: &mut Tape<'_>, w: Var, pairs: &[(usize, usize)], classes: usize, dim: usize) -> Var {
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(pairs.len());
    for m in 0..classes {
        let idx: Vec<usize> = (0..pairs.len()).filter(|&p| pairs[p].1 == m).collect();
        if idx.is_empty() {
            continue;
        }
        let inputs: Vec<usize> = idx.iter().map(|&p| pairs[p].0).collect();
        let rows = tape.select_rows(w, &inputs);
        let start = m * (dim + 1) + 1;
        parts.push(tape.slice_cols(rows, start, start + dim));
        order.extend(idx);
    }
    let stacked = tape.concat_rows(&parts);
    let mut inverse = vec![0; order.len()];
    for (pos, &p) in order.iter().enumerate() {
        inverse[p] = pos;
    }
    tape.select_rows(stacked, &inverse)
}

/// `x' = x − W_m` for every pair, `P × D`.
pub fn counterfactual_candidate(
    tape: &mut Tape<'_>,
    x: Var,
    w: Var,
    pairs: &[(usize, usize)],
    classes: usize,
) -> Var {
    let dim = tape.shape(x)[1];
    let inputs: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let xs = tape.select_rows(x, &inputs);
    let wm = pair_weights(tape, w, pairs, classes, dim);
    tape.sub(xs, wm)
}

/// `max(δ_m − log p(x'|m), 0)` per row, `P × 1`.
pub fn plausibility_loss<'a>(
    tape: &mut Tape<'a>,
    flow: &'a FlowModel,
    flow_bound: &BoundParams,
    x_cf: Var,
    targets: &[usize],
    thresholds: &[f64],
) -> Result<Var> {
    let lp = flow.log_prob_var(tape, flow_bound, x_cf, targets)?;
    let delta = tape.constant(Tensor::from_vec(thresholds.len(), 1, thresholds.to_vec()));
    Ok(tape.hinge(delta, lp))
}

/// Mean squared coordinate difference per row, `P × 1`.
pub fn proximity_loss(tape: &mut Tape<'_>, a: Var, b: Var) -> Var {
    let d = tape.shape(a)[1];
    let diff = tape.sub(a, b);
    let sq = tape.square(diff);
    let s = tape.sum_cols(sq);
    tape.scale(s, 1.0 / d as f64)
}

/// Per-pair counterfactual terms before weighting, each `P × 1`.
pub struct ConexTerms {
    pub cf_ce: Option<Var>,
    pub proximity: Option<Var>,
    pub plausibility: Option<Var>,
}

/// Everything the joint objective needs besides the batch.
pub struct JointContext<'a, 'b> {
    pub net: &'a HyperNetwork,
    pub bound: &'b BoundParams,
    pub flow: &'a FlowModel,
    pub flow_bound: &'b BoundParams,
    /// Log-density threshold per class.
    pub thresholds: &'b [f64],
    pub toggles: LossToggles,
}

/// Counterfactual terms for every pair. `W' = H(x')` is recomputed with
/// dropout but with normalization by the running statistics.
pub fn conex_terms<'a>(
    tape: &mut Tape<'a>,
    ctx: &JointContext<'a, '_>,
    x: Var,
    w: Var,
    pairs: &[(usize, usize)],
    mode: Mode,
) -> Result<ConexTerms> {
    let k = ctx.net.config.classes;
    let targets: Vec<usize> = pairs.iter().map(|&(_, m)| m).collect();
    let x_cf = counterfactual_candidate(tape, x, w, pairs, k);
    let mut out = ConexTerms {
        cf_ce: None,
        proximity: None,
        plausibility: None,
    };
    if ctx.toggles.counterfactual_ce {
        let mode = mode.next_call().with_running_norm();
        let (w_cf, _) = ctx.net.forward(tape, ctx.bound, x_cf, mode)?;
        let logits = tape.local_logits(w_cf, x_cf, k);
        out.cf_ce = Some(tape.softmax_cross_entropy(logits, &targets));
    }
    if ctx.toggles.proximity {
        let inputs: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
        let xs = tape.select_rows(x, &inputs);
        out.proximity = Some(proximity_loss(tape, xs, x_cf));
    }
    if ctx.toggles.plausibility {
        let deltas: Vec<f64> = targets.iter().map(|&m| ctx.thresholds[m]).collect();
        out.plausibility = Some(plausibility_loss(
            tape,
            ctx.flow,
            ctx.flow_bound,
            x_cf,
            &targets,
            &deltas,
        )?);
    }
    Ok(out)
}

/// Scalars of one evaluation of the joint objective.
pub struct JointLoss {
    pub total: Var,
    pub ce: Var,
    pub cf_ce: Option<Var>,
    pub proximity: Option<Var>,
    pub plausibility: Option<Var>,
    /// Batch statistics of the forward over `x`.
    pub stats: Vec<BatchStats>,
}

/// `mean_i [CE(f(x_i), y_i) + Σ_{m≠y_i} (α₁·CE' + α₂·MSE + α₃·L_F)]`.
///
/// Each component scalar is reported as its batch mean of per-sample sums.
pub fn hyconex_loss<'a>(
    tape: &mut Tape<'a>,
    ctx: &JointContext<'a, '_>,
    x: Var,
    labels: &[usize],
    alpha: [f64; 3],
    mode: Mode,
) -> Result<JointLoss> {
    let k = ctx.net.config.classes;
    let b = labels.len() as f64;
    let (w, stats) = ctx.net.forward(tape, ctx.bound, x, mode)?;
    let logits = tape.local_logits(w, x, k);
    let ce_rows = tape.softmax_cross_entropy(logits, labels);
    let ce = tape.mean(ce_rows);
    let mut loss = JointLoss {
        total: ce,
        ce,
        cf_ce: None,
        proximity: None,
        plausibility: None,
        stats,
    };
    if !ctx.toggles.any() || k < 2 {
        return Ok(loss);
    }
    let pairs = alternative_pairs(labels, k);
    let terms = conex_terms(tape, ctx, x, w, &pairs, mode)?;
    let mut weighted = Vec::new();
    let mut per_sample = |tape: &mut Tape<'a>, v: Option<Var>, a: f64| -> Option<Var> {
        v.map(|v| {
            let s = tape.sum(v);
            let m = tape.scale(s, 1.0 / b);
            weighted.push(tape.scale(m, a));
            m
        })
    };
    loss.cf_ce = per_sample(tape, terms.cf_ce, alpha[0]);
    loss.proximity = per_sample(tape, terms.proximity, alpha[1]);
    loss.plausibility = per_sample(tape, terms.plausibility, alpha[2]);
    for v in weighted {
        loss.total = tape.add(loss.total, v);
    }
    Ok(loss)
}

/// Pre-training objective:
/// `mean_i [CE(f(x_i), y_i) + α Σ_{m≠y_i} ‖x'_{i,m} − r_{i,m}‖]`, with
/// `r_{i,m}` the given cluster center for each pair.
pub struct PretrainLoss {
    pub total: Var,
    pub ce: Var,
    pub distance: Var,
    pub stats: Vec<BatchStats>,
}

#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss<'a>(
    tape: &mut Tape<'a>,
    net: &'a HyperNetwork,
    bound: &BoundParams,
    x: Var,
    labels: &[usize],
    centers: &Tensor,
    alpha: f64,
    literal_target: bool,
    mode: Mode,
) -> Result<PretrainLoss> {
    let k = net.config.classes;
    let b = labels.len() as f64;
    let (w, stats) = net.forward(tape, bound, x, mode)?;
    let logits = tape.local_logits(w, x, k);
    let ce_rows = tape.softmax_cross_entropy(logits, labels);
    let ce = tape.mean(ce_rows);
    let pairs = alternative_pairs(labels, k);
    assert_eq!(centers.rows(), pairs.len(), "one center per alternative pair");
    let cand = if literal_target {
        let d = tape.shape(x)[1];
        pair_weights(tape, w, &pairs, k, d)
    } else {
        counterfactual_candidate(tape, x, w, &pairs, k)
    };
    let r = tape.constant(centers.clone());
    let diff = tape.sub(cand, r);
    let norms = tape.row_norm(diff);
    let s = tape.sum(norms);
    let distance = tape.scale(s, 1.0 / b);
    let weighted = tape.scale(distance, alpha);
    let total = tape.add(ce, weighted);
    Ok(PretrainLoss {
        total,
        ce,
        distance,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowConfig, FlowModel};
    use crate::gradcore::finite_diff_check;
    use crate::hypernet::HyperConfig;

    fn small_net(d: usize, k: usize, seed: u64) -> HyperNetwork {
        HyperNetwork::new(
            HyperConfig {
                hidden: 8,
                blocks: 1,
                dropout: 0.0,
                head_init_scale: 0.3,
                ..HyperConfig::new(d, k)
            },
            seed,
        )
    }

    #[test]
    fn pairs_skip_the_label() {
        assert_eq!(alternative_pairs(&[1, 0], 2), vec![(0, 0), (1, 1)]);
        assert_eq!(alternative_pairs(&[2], 3), vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn candidate_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]));
        // Class 1 block is (bias 9, weights 0.5, −1).
        let w = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 9.0, 0.5, -1.0]]));
        let c = counterfactual_candidate(&mut tape, x, w, &[(0, 1)], 2);
        assert_eq!(tape.value(c).data(), &[0.5, 3.0]);
        let s = tape.sum(c);
        let g = tape.backward(s);
        assert_eq!(g.wrt(w).data(), &[0.0, 0.0, 0.0, 0.0, -1.0, -1.0]);
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn plausibility_hinge_values() {
        let flow = FlowModel::zeros(FlowConfig::new(2, 2));
        let at_origin = -(2.0 * std::f64::consts::PI).ln();
        for (delta, expected) in [(at_origin - 1.0, 0.0), (at_origin + 0.5, 0.5)] {
            let mut tape = Tape::new();
            let fb = flow.params.bind(&mut tape, false);
            let x = tape.leaf(Tensor::zeros(1, 2));
            let l = plausibility_loss(&mut tape, &flow, &fb, x, &[0], &[delta]).unwrap();
            assert!((tape.value(l).item() - expected).abs() < 1e-12);
            let s = tape.sum(l);
            let g = tape.backward(s);
            if expected == 0.0 {
                assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn toggles_off_is_plain_cross_entropy() {
        let net = small_net(2, 2, 1);
        let flow = FlowModel::zeros(FlowConfig::new(2, 2));
        let xt = Tensor::from_rows(&[vec![0.1, 0.2], vec![-1.0, 0.4], vec![0.3, -0.7]]);
        let labels = [0, 1, 1];
        let mut tape = Tape::new();
        let bound = net.params.bind(&mut tape, true);
        let fb = flow.params.bind(&mut tape, false);
        let ctx = JointContext {
            net: &net,
            bound: &bound,
            flow: &flow,
            flow_bound: &fb,
            thresholds: &[0.0, 0.0],
            toggles: LossToggles::BASE,
        };
        let x = tape.constant(&xt);
        let l = hyconex_loss(&mut tape, &ctx, x, &labels, [0.8, 0.1, 0.1], Mode::Eval).unwrap();
        let probs = net.predict_proba(&xt).unwrap();
        let ce: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs.get(i, y).ln())
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(l.total).item() - ce).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_of_terms() {
        let net = small_net(2, 2, 2);
        let flow = FlowModel::zeros(FlowConfig::new(2, 2));
        let xt = Tensor::from_rows(&[vec![0.1, 0.2], vec![-1.0, 0.4]]);
        let mut tape = Tape::new();
        let bound = net.params.bind(&mut tape, false);
        let fb = flow.params.bind(&mut tape, false);
        let ctx = JointContext {
            net: &net,
            bound: &bound,
            flow: &flow,
            flow_bound: &fb,
            thresholds: &[-1.0, -1.5],
            toggles: LossToggles::FULL,
        };
        let x = tape.constant(&xt);
        let a = [0.8, 0.1, 0.1];
        let l = hyconex_loss(&mut tape, &ctx, x, &[0, 1], a, Mode::Eval).unwrap();
        let v = |o: Option<Var>| tape.value(o.unwrap()).item();
        let expected = tape.value(l.ce).item() + a[0] * v(l.cf_ce) + a[1] * v(l.proximity) + a[2] * v(l.plausibility);
        assert!((tape.value(l.total).item() - expected).abs() < 1e-12);
        let mut tape = Tape::new();
        let bound = net.params.bind(&mut tape, false);
        let fb = flow.params.bind(&mut tape, false);
        let ctx = JointContext { bound: &bound, flow_bound: &fb, ..ctx };
        let x = tape.constant(&xt);
        let l0 = hyconex_loss(&mut tape, &ctx, x, &[0, 1], [0.0; 3], Mode::Eval).unwrap();
        assert_eq!(tape.value(l0.total).item(), tape.value(l0.ce).item());
    }

    #[test]
    fn pretrain_arithmetic() {
        // W ≡ 0 makes x' = x, so the distance term is ‖x − r‖.
        let mut net = small_net(2, 2, 3);
        for (_, name, _) in net.params.clone().iter() {
            if name.starts_with("head") {
                let id = net.params.iter().find(|(_, n, _)| *n == name).unwrap().0;
                let t = net.params.get_mut(id);
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let xt = Tensor::from_rows(&[vec![0.0, 0.0]]);
        let centers = Tensor::from_rows(&[vec![0.3, 0.4]]);
        let mut tape = Tape::new();
        let bound = net.params.bind(&mut tape, false);
        let x = tape.constant(&xt);
        let l = pretrain_loss(&mut tape, &net, &bound, x, &[0], &centers, 0.8, false, Mode::Eval).unwrap();
        assert!((tape.value(l.ce).item() - 2f64.ln()).abs() < 1e-12);
        assert!((tape.value(l.distance).item() - 0.5).abs() < 1e-12);
        assert!((tape.value(l.total).item() - (2f64.ln() + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let net = small_net(2, 2, 4);
        let mut flow = FlowModel::new(FlowConfig::with_sizes(2, 2, 2, 8, 1), 5);
        for t in flow.params.values_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i % 7) as f64 - 3.0));
        }
        let xt = Tensor::from_rows(&[vec![0.3, -0.2], vec![-0.8, 0.5], vec![1.1, 0.9], vec![-0.4, -1.2]]);
        let labels = [0, 1, 1, 0];
        let thresholds = [5.0, 5.0];
        let mode = Mode::Train { seed: 1, step: 0, call: 0 };
        let loss_at = |flat: &[f64]| -> (f64, Vec<f64>) {
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
            let v = tape.value(l.total).item();
            let g = tape.backward(l.total);
            let flat_g: Vec<f64> = bound.gradients(&tape, &g).iter().flat_map(|t| t.data().to_vec()).collect();
            (v, flat_g)
        };
        let point = net.params.flatten();
        let (_, analytic) = loss_at(&point);
        let report = finite_diff_check(|p| loss_at(p).0, &point, &analytic, None);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
