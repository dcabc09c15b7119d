use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{TradeoffSchedule, TrainConfig};
use super::losses::{alternative_pairs, hyconex_loss, pretrain_loss, JointContext};
use crate::counterfact::generate_all;
use crate::dataio::{
    downsample_balance, kmeans_per_class, split_train_test, ClusterIndex, Dataset, FeatureLayout,
    Preprocessor, RawDataset,
};
use crate::error::{Error, Result};
use crate::flow::{add_group_noise, batches, density_thresholds, fit_flow, FlowConfig, FlowModel, FlowTrainConfig};
use crate::gradcore::{Adam, CosineSchedule, ParamStore, Tape, Tensor};
use crate::hypernet::{HyperConfig, HyperNetwork, Mode, RunningStats};
use crate::metrics::cf_report;
use crate::model::Model;

/// Validation quantities used for model selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub accuracy: f64,
    pub validity: f64,
    pub p_plaus: f64,
    pub mean_l2: f64,
}

/// Accuracy, validity, plausibility and mean L2 of the counterfactuals of
/// `data` under the given model parts.
pub fn validation_metrics(
    net: &HyperNetwork,
    flow: &FlowModel,
    layout: &FeatureLayout,
    global_threshold: f64,
    data: &Dataset,
) -> Result<ValMetrics> {
    let batch = generate_all(net, flow, layout, &data.x)?;
    let c = &batch.candidates;
    let correct = c.predicted.iter().zip(&data.y).filter(|(a, b)| a == b).count();
    let report = cf_report(&data.x, &batch, layout, global_threshold, 0.0, None)?;
    Ok(ValMetrics {
        accuracy: correct as f64 / data.len().max(1) as f64,
        validity: report.validity,
        p_plaus: report.p_plaus,
        mean_l2: report.l2,
    })
}

/// Model-selection score: `P.Plaus − w·L2` when accuracy and validity pass
/// their gates, otherwise `−∞`.
pub fn early_stop_score(
    m: &ValMetrics,
    pretrain_accuracy: f64,
    accuracy_slack: f64,
    min_validity: f64,
    l2_weight: f64,
) -> f64 {
    if m.accuracy >= pretrain_accuracy - accuracy_slack && m.validity >= min_validity {
        m.p_plaus - l2_weight * m.mean_l2
    } else {
        f64::NEG_INFINITY
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cf_ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proximity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plausibility: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_nll: Option<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: LossSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_plaus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub lr: f64,
    pub alpha: [f64; 3],
}

impl LogRecord {
    fn with_val(m: &ValMetrics) -> Self {
        Self {
            phase: String::new(),
            epoch: 0,
            loss: LossSummary::default(),
            val_accuracy: Some(m.accuracy),
            validity: Some(m.validity),
            p_plaus: Some(m.p_plaus),
            mean_l2: Some(m.mean_l2),
            score: None,
            lr: 0.0,
            alpha: [0.0; 3],
        }
    }
}

/// JSON Lines rendering of a log.
pub fn log_to_jsonl(log: &[LogRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
        .collect()
}

pub fn log_hash(log: &[LogRecord]) -> String {
    hex::encode(Sha256::digest(log_to_jsonl(log).as_bytes()))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
    /// The validation split in raw form, for later re-evaluation.
    pub validation: RawDataset,
    pub pretrain_accuracy: f64,
    pub final_validation: ValMetrics,
    /// Joint-phase epoch whose parameters were kept, if any passed the gates.
    pub selected_epoch: Option<usize>,
    /// Epoch kept when none passed the gates: the one closest to passing.
    pub fallback_epoch: Option<usize>,
}

#[derive(Clone)]
struct Snapshot {
    params: ParamStore,
    running: Vec<RunningStats>,
}

fn snapshot(net: &HyperNetwork) -> Snapshot {
    Snapshot {
        params: net.params.clone(),
        running: net.running.clone(),
    }
}

fn restore(net: &mut HyperNetwork, s: Snapshot) {
    net.params = s.params;
    net.running = s.running;
}

fn divergence(phase: &str, step: u64, e: impl std::fmt::Display) -> Error {
    Error::Divergence {
        phase: phase.into(),
        step,
        reason: e.to_string(),
    }
}

fn seed_for(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

/// Splits, encodes and balances `raw` per the configuration.
struct Prepared {
    prep: Preprocessor,
    train: Dataset,
    val: Dataset,
    val_raw: RawDataset,
}

fn prepare(cfg: &TrainConfig, raw: &RawDataset) -> Result<Prepared> {
    let k = raw.schema.num_classes();
    let (mut train_idx, val_idx) = split_train_test(&raw.labels, k, cfg.validation_fraction, seed_for(cfg.seed, 1))?;
    if cfg.balance {
        let labels: Vec<usize> = train_idx.iter().map(|&i| raw.labels[i]).collect();
        let keep = downsample_balance(&labels, k, seed_for(cfg.seed, 2))?;
        train_idx = keep.iter().map(|&j| train_idx[j]).collect();
    }
    let train_raw = raw.subset(&train_idx);
    let val_raw = raw.subset(&val_idx);
    let prep = Preprocessor::fit(&train_raw)?.with_noise_sigma(cfg.noise_sigma);
    let train = prep.encode(&train_raw, None)?;
    let val = prep.encode(&val_raw, None)?;
    Ok(Prepared {
        prep,
        train,
        val,
        val_raw,
    })
}

/// Nearest alternative cluster center for each `(input, target)` pair.
fn pair_centers(clusters: &ClusterIndex, x: &Tensor, pairs: &[(usize, usize)]) -> Tensor {
    let d = x.cols();
    let mut data = Vec::with_capacity(pairs.len() * d);
    for &(i, m) in pairs {
        data.extend_from_slice(clusters.nearest_alt_center(x.row(i), m));
    }
    Tensor::from_vec(pairs.len(), d, data)
}

/// Runs all three phases on `raw` and returns the selected model.
///
/// 1. Pre-train the hypernetwork on cross-entropy plus distance to the
///    nearest cluster center of each alternative class.
/// 2. Fit the flow on the hypernetwork's predicted labels, compute density
///    thresholds and freeze it.
/// 3. Train the hypernetwork on the joint objective with ramped trade-off
///    weights, selecting parameters by validation score.
pub fn train(cfg: &TrainConfig, raw: &RawDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let Prepared {
        prep,
        train: data,
        val,
        val_raw,
    } = prepare(cfg, raw)?;
    let layout = prep.layout();
    let k = raw.schema.num_classes();
    let d = layout.dim;
    let min_class = crate::dataio::class_counts(&data.y, k).into_iter().min().unwrap_or(0);
    let clusters = kmeans_per_class(
        &data.x,
        &data.y,
        k,
        cfg.clusters_per_class.min(min_class.max(1)),
        seed_for(cfg.seed, 3),
    )?;
    let net_cfg = HyperConfig {
        hidden: cfg.network.hidden,
        blocks: cfg.network.blocks,
        dropout: cfg.network.dropout,
        ..HyperConfig::new(d, k)
    };
    let mut net = HyperNetwork::new(net_cfg, seed_for(cfg.seed, 4));
    let mut log = Vec::new();
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let dropout_seed = seed_for(cfg.seed, 5);

    // Phase 1.
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, 6));
    let mut adam = Adam::new(&net.params);
    let sched = CosineSchedule::new(
        cfg.pretrain.lr,
        cfg.pretrain.min_lr,
        steps_per_epoch * cfg.pretrain.epochs as u64,
    );
    let mut step = 0u64;
    for epoch in 0..cfg.pretrain.epochs {
        let mut acc = LossSummary::default();
        let mut dist = 0.0;
        for idx in batches(n, cfg.batch_size, &mut rng) {
            let mut xb = data.x.select_rows(&idx);
            add_group_noise(&mut xb, &layout, cfg.noise_sigma, &mut rng);
            let yb: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
            let pairs = alternative_pairs(&yb, k);
            let centers = pair_centers(&clusters, &xb, &pairs);
            let lr = sched.lr(step);
            let (grads, stats) = {
                let mut tape = Tape::new();
                let bound = net.params.bind(&mut tape, true);
                let x = tape.constant(&xb);
                let mode = Mode::Train {
                    seed: dropout_seed,
                    step,
                    call: 0,
                };
                let l = pretrain_loss(
                    &mut tape,
                    &net,
                    &bound,
                    x,
                    &yb,
                    &centers,
                    cfg.pretrain.alpha,
                    cfg.pretrain.literal_target,
                    mode,
                )
                .map_err(|e| divergence("pretrain", step, e))?;
                let total = tape.value(l.total).item();
                if !total.is_finite() {
                    return Err(divergence("pretrain", step, "non-finite loss"));
                }
                let w = idx.len() as f64 / n as f64;
                acc.total += w * total;
                acc.ce += w * tape.value(l.ce).item();
                dist += w * tape.value(l.distance).item();
                let g = tape.backward(l.total);
                (bound.gradients(&tape, &g), l.stats)
            };
            adam.step(&mut net.params, &grads, lr)
                .map_err(|e| divergence("pretrain", step, e))?;
            net.update_running_stats(&stats);
            step += 1;
        }
        acc.distance = Some(dist);
        let val_acc = accuracy(&net, &val)?;
        log.push(LogRecord {
            phase: "pretrain".into(),
            epoch,
            loss: acc,
            val_accuracy: Some(val_acc),
            validity: None,
            p_plaus: None,
            mean_l2: None,
            score: None,
            lr: sched.lr(step.saturating_sub(1)),
            alpha: [cfg.pretrain.alpha, 0.0, 0.0],
        });
    }
    let pretrain_accuracy = accuracy(&net, &val)?;

    // Phase 2.
    let predicted = net.predict_proba(&data.x)?.argmax_rows();
    let val_predicted = net.predict_proba(&val.x)?.argmax_rows();
    let flow_cfg = FlowConfig::with_sizes(
        d,
        k,
        cfg.network.flow_layers,
        cfg.network.flow_hidden,
        cfg.network.flow_blocks,
    );
    let mut flow = FlowModel::new(flow_cfg, seed_for(cfg.seed, 7));
    let fit = fit_flow(
        &mut flow,
        &data.x,
        &predicted,
        Some(&layout),
        &FlowTrainConfig {
            epochs: cfg.flow.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.flow.lr,
            min_lr: cfg.flow.min_lr,
            seed: seed_for(cfg.seed, 8),
            noise_sigma: cfg.noise_sigma,
            patience: cfg.flow.patience,
        },
        Some((&val.x, &val_predicted)),
    )?;
    for (epoch, nll) in fit.epoch_nll.iter().enumerate() {
        log.push(LogRecord {
            phase: "flow".into(),
            epoch,
            loss: LossSummary {
                total: *nll,
                nll: Some(*nll),
                val_nll: fit.val_nll.get(epoch).copied(),
                ..Default::default()
            },
            val_accuracy: None,
            validity: None,
            p_plaus: None,
            mean_l2: None,
            score: None,
            lr: cfg.flow.lr,
            alpha: [0.0; 3],
        });
    }
    let thresholds = density_thresholds(&flow, &data.x, &predicted)?;
    let deltas: Vec<f64> = if cfg.joint.global_threshold {
        vec![thresholds.global; k]
    } else {
        thresholds.per_class.clone()
    };

    // Phase 3.
    let j = &cfg.joint;
    let schedule = TradeoffSchedule {
        targets: j.alpha,
        ramp_steps: steps_per_epoch * j.ramp_epochs as u64,
    };
    let sched = CosineSchedule::new(j.lr, j.min_lr, steps_per_epoch * j.epochs as u64);
    let mut adam = Adam::new(&net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, 9));
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut since_best = 0usize;
    let mut closest: Option<(f64, usize, Snapshot)> = None;
    let mut jstep = 0u64;
    for epoch in 0..j.epochs {
        let mut acc = LossSummary::default();
        let (mut cf_ce, mut prox, mut plaus) = (0.0, 0.0, 0.0);
        for idx in batches(n, cfg.batch_size, &mut rng) {
            let mut xb = data.x.select_rows(&idx);
            add_group_noise(&mut xb, &layout, cfg.noise_sigma, &mut rng);
            let yb: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
            let alpha = schedule.alpha(jstep);
            let lr = sched.lr(jstep);
            let gstep = step + jstep;
            let (grads, stats) = {
                let mut tape = Tape::new();
                let bound = net.params.bind(&mut tape, true);
                let fb = flow.params.bind(&mut tape, false);
                let ctx = JointContext {
                    net: &net,
                    bound: &bound,
                    flow: &flow,
                    flow_bound: &fb,
                    thresholds: &deltas,
                    toggles: cfg.losses,
                };
                let x = tape.constant(&xb);
                let mode = Mode::Train {
                    seed: dropout_seed,
                    step: gstep,
                    call: 0,
                };
                let l = hyconex_loss(&mut tape, &ctx, x, &yb, alpha, mode)
                    .map_err(|e| divergence("joint", gstep, e))?;
                let total = tape.value(l.total).item();
                if !total.is_finite() {
                    return Err(divergence("joint", gstep, "non-finite loss"));
                }
                let w = idx.len() as f64 / n as f64;
                acc.total += w * total;
                acc.ce += w * tape.value(l.ce).item();
                let val = |v: Option<crate::gradcore::Var>| v.map_or(0.0, |v| tape.value(v).item());
                cf_ce += w * val(l.cf_ce);
                prox += w * val(l.proximity);
                plaus += w * val(l.plausibility);
                let g = tape.backward(l.total);
                (bound.gradients(&tape, &g), l.stats)
            };
            adam.step(&mut net.params, &grads, lr)
                .map_err(|e| divergence("joint", gstep, e))?;
            net.update_running_stats(&stats);
            jstep += 1;
        }
        acc.cf_ce = cfg.losses.counterfactual_ce.then_some(cf_ce);
        acc.proximity = cfg.losses.proximity.then_some(prox);
        acc.plausibility = cfg.losses.plausibility.then_some(plaus);
        let vm = validation_metrics(&net, &flow, &layout, thresholds.global, &val)?;
        let ramped = epoch + 1 >= j.ramp_epochs;
        let score = early_stop_score(&vm, pretrain_accuracy, j.accuracy_slack, j.min_validity, j.l2_weight);
        log.push(LogRecord {
            phase: "joint".into(),
            epoch,
            loss: acc,
            score: score.is_finite().then_some(score),
            lr: sched.lr(jstep.saturating_sub(1)),
            alpha: schedule.alpha(jstep),
            ..LogRecord::with_val(&vm)
        });
        if !(j.early_stopping && ramped) {
            continue;
        }
        let gap = (vm.accuracy - (pretrain_accuracy - j.accuracy_slack)).min(vm.validity - j.min_validity);
        if best.is_none() && closest.as_ref().is_none_or(|(g, _, _)| gap > *g) {
            closest = Some((gap, epoch, snapshot(&net)));
        }
        if score.is_finite() && best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, snapshot(&net)));
            since_best = 0;
        } else if best.is_some() {
            since_best += 1;
            if since_best >= j.patience {
                break;
            }
        }
    }
    let selected_epoch = best.as_ref().map(|(_, e, _)| *e);
    let mut fallback_epoch = None;
    if let Some((_, _, s)) = best {
        restore(&mut net, s);
    } else if let Some((_, e, s)) = closest {
        fallback_epoch = Some(e);
        restore(&mut net, s);
    }
    let final_validation = validation_metrics(&net, &flow, &layout, thresholds.global, &val)?;
    log.push(LogRecord {
        phase: "final".into(),
        epoch: selected_epoch.or(fallback_epoch).unwrap_or(log.last().map_or(0, |r| r.epoch)),
        loss: LossSummary::default(),
        score: Some(early_stop_score(
            &final_validation,
            pretrain_accuracy,
            j.accuracy_slack,
            j.min_validity,
            j.l2_weight,
        ))
        .filter(|s| s.is_finite()),
        lr: 0.0,
        alpha: schedule.alpha(jstep),
        ..LogRecord::with_val(&final_validation)
    });
    let model = Model {
        schema: raw.schema.clone(),
        preprocessor: prep,
        hypernet: net,
        flow,
        thresholds,
        clusters,
        config: cfg.clone(),
    };
    Ok(TrainOutcome {
        model,
        log,
        validation: val_raw,
        pretrain_accuracy,
        final_validation,
        selected_epoch,
        fallback_epoch,
    })
}

fn accuracy(net: &HyperNetwork, data: &Dataset) -> Result<f64> {
    let pred = net.predict_proba(&data.x)?.argmax_rows();
    Ok(pred.iter().zip(&data.y).filter(|(a, b)| a == b).count() as f64 / data.len().max(1) as f64)
}
