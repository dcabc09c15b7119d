//! Counterfactual generation from a single hypernetwork pass, categorical
//! projection, raw-space rendering and a gradient-descent baseline.

use serde::{Deserialize, Serialize};

use crate::dataio::{ColumnKind, FeatureLayout, Preprocessor, RawValue};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::gradcore::{argmax, softmax_rows, Tape, Tensor, Var};
use crate::hypernet::{class_weights, local_logits, HyperNetwork, Mode};

/// Replaces every one-hot block of `x` by the indicator of its largest
/// entry; ties go to the first index. Numeric coordinates are untouched.
pub fn project_categorical(x: &mut [f64], layout: &FeatureLayout) {
    for g in &layout.groups {
        let block = &mut x[g.span.clone()];
        let k = argmax(block);
        for (i, v) in block.iter_mut().enumerate() {
            *v = if i == k { 1.0 } else { 0.0 };
        }
    }
}

/// Candidates `x − W_m` for every input and every class other than its
/// prediction, from exactly one hypernetwork forward over `x`.
#[derive(Clone, Debug)]
pub struct Candidates {
    pub weights: Tensor,
    pub probabilities: Tensor,
    pub predicted: Vec<usize>,
    /// `(input, target)` for each candidate row, input-major.
    pub pairs: Vec<(usize, usize)>,
    /// Candidates before projection, one row per pair.
    pub unprojected: Tensor,
    /// Candidates with one-hot blocks projected.
    pub projected: Tensor,
}

pub fn generate_candidates(net: &HyperNetwork, layout: &FeatureLayout, x: &Tensor) -> Result<Candidates> {
    let k = net.config.classes;
    let d = x.cols();
    let weights = net.weights(x)?;
    let probabilities = softmax_rows(&local_logits(x, &weights, k));
    let predicted = probabilities.argmax_rows();
    let mut pairs = Vec::with_capacity(x.rows() * (k - 1));
    let mut unprojected = Vec::with_capacity(x.rows() * (k - 1) * d);
    for (i, &p) in predicted.iter().enumerate() {
        let xi = x.row(i);
        for m in (0..k).filter(|&m| m != p) {
            let wm = class_weights(weights.row(i), m, d);
            unprojected.extend(xi.iter().zip(wm).map(|(a, b)| a - b));
            pairs.push((i, m));
        }
    }
    let unprojected = Tensor::from_vec(pairs.len(), d, unprojected);
    let mut projected = unprojected.clone();
    for r in 0..projected.rows() {
        project_categorical(projected.row_mut(r), layout);
    }
    Ok(Candidates {
        weights,
        probabilities,
        predicted,
        pairs,
        unprojected,
        projected,
    })
}

/// Candidates annotated with the model's own verdict and flow densities.
#[derive(Clone, Debug)]
pub struct CounterfactualBatch {
    pub candidates: Candidates,
    /// Prediction for each projected candidate.
    pub cf_predicted: Vec<usize>,
    pub cf_predicted_unprojected: Vec<usize>,
    /// `log p(x' | target)` of each projected candidate.
    pub log_density: Vec<f64>,
}

impl CounterfactualBatch {
    pub fn len(&self) -> usize {
        self.candidates.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn target(&self, p: usize) -> usize {
        self.candidates.pairs[p].1
    }

    pub fn is_valid(&self, p: usize) -> bool {
        self.cf_predicted[p] == self.target(p)
    }
}

/// Generates and annotates counterfactuals for every row of `x`.
///
/// Generation itself is one forward pass per input; the annotation runs a
/// second batched pass over the candidates to judge validity and a flow
/// pass for log densities.
pub fn generate_all(
    net: &HyperNetwork,
    flow: &FlowModel,
    layout: &FeatureLayout,
    x: &Tensor,
) -> Result<CounterfactualBatch> {
    let candidates = generate_candidates(net, layout, x)?;
    if candidates.pairs.is_empty() {
        return Ok(CounterfactualBatch {
            candidates,
            cf_predicted: Vec::new(),
            cf_predicted_unprojected: Vec::new(),
            log_density: Vec::new(),
        });
    }
    let cf_predicted = net.predict_proba(&candidates.projected)?.argmax_rows();
    let cf_predicted_unprojected = if layout.groups.is_empty() {
        cf_predicted.clone()
    } else {
        net.predict_proba(&candidates.unprojected)?.argmax_rows()
    };
    let targets: Vec<usize> = candidates.pairs.iter().map(|&(_, m)| m).collect();
    let log_density = flow.log_prob(&candidates.projected, &targets)?;
    Ok(CounterfactualBatch {
        candidates,
        cf_predicted,
        cf_predicted_unprojected,
        log_density,
    })
}

/// Change of one raw feature between an input and its counterfactual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureDiff {
    Numeric {
        column: String,
        from: f64,
        to: f64,
        delta: f64,
    },
    Categorical {
        column: String,
        from: String,
        to: String,
        changed: bool,
    },
}

impl FeatureDiff {
    pub fn is_change(&self) -> bool {
        match self {
            FeatureDiff::Numeric { delta, .. } => *delta != 0.0,
            FeatureDiff::Categorical { changed, .. } => *changed,
        }
    }
}

pub fn raw_diffs(prep: &Preprocessor, from: &[RawValue], to: &[RawValue]) -> Vec<FeatureDiff> {
    prep.schema
        .columns
        .iter()
        .zip(from.iter().zip(to))
        .map(|(col, (a, b))| match col.kind {
            ColumnKind::Numeric => {
                let (fa, fb) = (a.as_num().unwrap_or(f64::NAN), b.as_num().unwrap_or(f64::NAN));
                FeatureDiff::Numeric {
                    column: col.name.clone(),
                    from: fa,
                    to: fb,
                    delta: fb - fa,
                }
            }
            ColumnKind::Categorical { .. } => FeatureDiff::Categorical {
                column: col.name.clone(),
                from: a.to_string(),
                to: b.to_string(),
                changed: a != b,
            },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualEntry {
    pub target: usize,
    pub target_label: String,
    pub encoded: Vec<f64>,
    pub raw: Vec<RawValue>,
    pub predicted: usize,
    pub valid: bool,
    pub log_density: f64,
    /// Whether the log density exceeds the global training median.
    pub plausible: bool,
    pub diffs: Vec<FeatureDiff>,
}

/// Every counterfactual of one input, in raw and encoded form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSet {
    pub encoded: Vec<f64>,
    pub raw: Vec<RawValue>,
    pub predicted: usize,
    pub predicted_label: String,
    pub probabilities: Vec<f64>,
    pub entries: Vec<CounterfactualEntry>,
}

/// Renders the counterfactuals of input `i` of `batch`.
pub fn render_set(
    prep: &Preprocessor,
    x: &Tensor,
    batch: &CounterfactualBatch,
    i: usize,
    density_threshold: f64,
) -> CounterfactualSet {
    let c = &batch.candidates;
    let raw = prep.inverse_row(x.row(i));
    let entries = c
        .pairs
        .iter()
        .enumerate()
        .filter(|(_, &(input, _))| input == i)
        .map(|(p, &(_, m))| {
            let encoded = c.projected.row(p).to_vec();
            let cf_raw = prep.inverse_row(&encoded);
            CounterfactualEntry {
                target: m,
                target_label: prep.schema.classes[m].clone(),
                diffs: raw_diffs(prep, &raw, &cf_raw),
                encoded,
                raw: cf_raw,
                predicted: batch.cf_predicted[p],
                valid: batch.is_valid(p),
                log_density: batch.log_density[p],
                plausible: batch.log_density[p] > density_threshold,
            }
        })
        .collect();
    let predicted = c.predicted[i];
    CounterfactualSet {
        encoded: x.row(i).to_vec(),
        raw,
        predicted,
        predicted_label: prep.schema.classes[predicted].clone(),
        probabilities: c.probabilities.row(i).to_vec(),
        entries,
    }
}

/// One exported `(input, target)` record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub input: usize,
    pub predicted: String,
    pub target: String,
    pub valid: bool,
    pub log_density: f64,
    pub values: Vec<RawValue>,
    pub diffs: Vec<FeatureDiff>,
}

pub fn export_rows(prep: &Preprocessor, x: &Tensor, batch: &CounterfactualBatch, threshold: f64) -> Vec<ExportRow> {
    (0..x.rows())
        .flat_map(|i| {
            let set = render_set(prep, x, batch, i, threshold);
            set.entries.into_iter().map(move |e| ExportRow {
                input: i,
                predicted: set.predicted_label.clone(),
                target: e.target_label,
                valid: e.valid,
                log_density: e.log_density,
                values: e.raw,
                diffs: e.diffs,
            })
        })
        .collect()
}

/// A classifier whose logits can be recorded on a tape as a function of
/// its input.
pub trait Differentiable {
    fn num_classes(&self) -> usize;
    fn logits_var<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var>;
}

impl Differentiable for HyperNetwork {
    fn num_classes(&self) -> usize {
        self.config.classes
    }

    fn logits_var<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let bound = self.params.bind(tape, false);
        let (w, _) = self.forward(tape, &bound, x, Mode::Eval)?;
        Ok(tape.local_logits(w, x, self.config.classes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WachterConfig {
    pub steps: usize,
    pub lr: f64,
    /// Weight of the squared distance penalty.
    pub c: f64,
}

impl Default for WachterConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.05,
            c: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WachterResult {
    pub x: Vec<f64>,
    pub valid: bool,
    pub objective: f64,
    pub steps: usize,
}

/// Minimizes `CE(f(x'), target) + c·‖x − x'‖²` by gradient descent from
/// `x' = x`. Returns the valid iterate with the lowest objective, or the
/// last iterate flagged invalid.
pub fn wachter_baseline(
    model: &impl Differentiable,
    x: &[f64],
    target: usize,
    cfg: &WachterConfig,
) -> Result<WachterResult> {
    if target >= model.num_classes() {
        return Err(Error::InvalidArgument(format!("target class {target} out of range")));
    }
    let origin = Tensor::row_vector(x);
    let mut cur = x.to_vec();
    let mut best: Option<WachterResult> = None;
    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::row_vector(&cur));
        let logits = model.logits_var(&mut tape, xv)?;
        let valid = argmax(tape.value(logits).row(0)) == target;
        let ce = tape.softmax_cross_entropy(logits, &[target]);
        let o = tape.constant(&origin);
        let diff = tape.sub(xv, o);
        let sq = tape.square(diff);
        let dist = tape.sum(sq);
        let dist = tape.scale(dist, cfg.c);
        let ce = tape.sum(ce);
        let loss = tape.add(ce, dist);
        let objective = tape.value(loss).item();
        if valid {
            if step == 0 {
                return Ok(WachterResult {
                    x: cur,
                    valid: true,
                    objective,
                    steps: 0,
                });
            }
            if best.as_ref().is_none_or(|b| objective < b.objective) {
                best = Some(WachterResult {
                    x: cur.clone(),
                    valid: true,
                    objective,
                    steps: step,
                });
            }
        }
        if step == cfg.steps {
            return Ok(best.unwrap_or(WachterResult {
                x: cur,
                valid: false,
                objective,
                steps: step,
            }));
        }
        let grads = tape.backward(loss);
        for (v, g) in cur.iter_mut().zip(grads.wrt(xv).data()) {
            *v -= cfg.lr * g;
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                phase: "wachter".into(),
                step: step as u64,
                reason: "non-finite iterate".into(),
            });
        }
    }
    unreachable!("loop returns at the final step")
}

/// Runs the Wachter baseline for every `(input, alternative class)` pair of
/// `x` and annotates the results like [`generate_all`].
pub fn wachter_batch(
    net: &HyperNetwork,
    flow: &FlowModel,
    layout: &FeatureLayout,
    x: &Tensor,
    cfg: &WachterConfig,
) -> Result<CounterfactualBatch> {
    let mut candidates = generate_candidates(net, layout, x)?;
    let mut found = Vec::with_capacity(candidates.unprojected.data().len());
    for &(i, m) in &candidates.pairs {
        found.extend(wachter_baseline(net, x.row(i), m, cfg)?.x);
    }
    candidates.unprojected = Tensor::from_vec(candidates.pairs.len(), x.cols(), found);
    candidates.projected = candidates.unprojected.clone();
    for r in 0..candidates.projected.rows() {
        project_categorical(candidates.projected.row_mut(r), layout);
    }
    if candidates.pairs.is_empty() {
        return Ok(CounterfactualBatch {
            candidates,
            cf_predicted: Vec::new(),
            cf_predicted_unprojected: Vec::new(),
            log_density: Vec::new(),
        });
    }
    let cf_predicted = net.predict_proba(&candidates.projected)?.argmax_rows();
    let cf_predicted_unprojected = net.predict_proba(&candidates.unprojected)?.argmax_rows();
    let targets: Vec<usize> = candidates.pairs.iter().map(|&(_, m)| m).collect();
    let log_density = flow.log_prob(&candidates.projected, &targets)?;
    Ok(CounterfactualBatch {
        candidates,
        cf_predicted,
        cf_predicted_unprojected,
        log_density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Column, Schema};
    use crate::hypernet::HyperConfig;

    fn cat_layout() -> FeatureLayout {
        Schema::new(
            vec![
                Column::numeric("a"),
                Column::categorical("c", &["x", "y", "z"]),
            ],
            "t",
            vec!["0".into(), "1".into()],
        )
        .unwrap()
        .layout()
    }

    #[test]
    fn projection_takes_argmax() {
        let layout = cat_layout();
        let mut v = vec![0.3, 0.2, 0.7, 0.1];
        project_categorical(&mut v, &layout);
        assert_eq!(v, vec![0.3, 0.0, 1.0, 0.0]);
        let before = v.clone();
        project_categorical(&mut v, &layout);
        assert_eq!(v, before);
        let mut tie = vec![-1.0, 0.5, 0.5, 0.1];
        project_categorical(&mut tie, &layout);
        assert_eq!(tie, vec![-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn candidates_translate_by_weight_rows() {
        let net = HyperNetwork::new(
            HyperConfig {
                hidden: 8,
                blocks: 1,
                head_init_scale: 0.5,
                ..HyperConfig::new(2, 3)
            },
            1,
        );
        let layout = FeatureLayout {
            dim: 2,
            numeric: vec![0, 1],
            groups: vec![],
            spans: vec![0..1, 1..2],
        };
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]);
        let before = net.rows_evaluated();
        let c = generate_candidates(&net, &layout, &x).unwrap();
        assert_eq!(net.rows_evaluated() - before, 2);
        assert_eq!(c.pairs.len(), 4);
        for (p, &(i, m)) in c.pairs.iter().enumerate() {
            assert_ne!(m, c.predicted[i]);
            let wm = class_weights(c.weights.row(i), m, 2);
            for j in 0..2 {
                assert_eq!(c.unprojected.get(p, j), x.get(i, j) - wm[j]);
            }
        }
    }

    #[test]
    fn x_minus_w_example() {
        let x = [1.0, 2.0];
        let w = [0.5, -1.0];
        let xp: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a - b).collect();
        assert_eq!(xp, vec![0.5, 3.0]);
    }

    struct Logistic {
        slope: f64,
    }

    impl Differentiable for Logistic {
        fn num_classes(&self) -> usize {
            2
        }

        fn logits_var<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
            let zero = tape.constant(Tensor::zeros(1, 1));
            let z1 = tape.scale(x, self.slope);
            Ok(tape.concat_cols(&[zero, z1]))
        }
    }

    #[test]
    fn wachter_crosses_a_one_dimensional_boundary() {
        let m = Logistic { slope: 2.0 };
        let r = wachter_baseline(&m, &[-1.0], 1, &WachterConfig::default()).unwrap();
        assert!(r.valid);
        assert!(r.x[0] > 0.0);
        // Stationary point of CE + c(x'+1)²: 2(1 − σ(2x')) = 0.2(x' + 1).
        let f = |t: f64| 2.0 * (1.0 - 1.0 / (1.0 + (-2.0 * t).exp())) - 0.2 * (t + 1.0);
        let (mut lo, mut hi) = (0.0, 5.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((r.x[0] - lo).abs() < 1e-3, "{} vs {lo}", r.x[0]);
    }

    #[test]
    fn wachter_fixed_point_for_current_class() {
        let m = Logistic { slope: 2.0 };
        let r = wachter_baseline(&m, &[1.5], 1, &WachterConfig::default()).unwrap();
        assert_eq!(r.x, vec![1.5]);
        assert_eq!(r.steps, 0);
    }

    #[test]
    fn wachter_flags_failure() {
        let m = Logistic { slope: 2.0 };
        let cfg = WachterConfig {
            steps: 3,
            lr: 1e-3,
            c: 0.1,
        };
        let r = wachter_baseline(&m, &[-5.0], 1, &cfg).unwrap();
        assert!(!r.valid);
        assert_eq!(r.steps, 3);
    }
}
