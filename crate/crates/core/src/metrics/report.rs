use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::auroc::auroc;
use super::isoforest::IsoForest;
use super::lof::LofIndex;
use super::quality::{coverage_validity, plausibility, proximity};
use crate::counterfact::CounterfactualBatch;
use crate::dataio::{class_counts, FeatureLayout};
use crate::error::Result;
use crate::gradcore::Tensor;

pub const LOF_NEIGHBORS: usize = 20;
pub const ISOFOREST_TREES: usize = 100;
pub const ISOFOREST_SAMPLE: usize = 256;

/// Outlier detectors fitted on the training split.
#[derive(Clone, Debug)]
pub struct OutlierProbes {
    pub lof: LofIndex,
    pub isoforest: IsoForest,
}

impl OutlierProbes {
    pub fn fit(reference: &Tensor, seed: u64) -> Result<Self> {
        let k = LOF_NEIGHBORS.min(reference.rows().saturating_sub(1)).max(1);
        Ok(Self {
            lof: LofIndex::fit(reference, k)?,
            isoforest: IsoForest::fit(reference, ISOFOREST_TREES, ISOFOREST_SAMPLE, seed)?,
        })
    }
}

/// Counterfactual quality aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfReport {
    pub count: usize,
    pub coverage: f64,
    pub validity: f64,
    pub validity_unprojected: f64,
    /// Means over every produced counterfactual.
    pub l1: f64,
    pub l2: f64,
    /// `None` when the data has no categorical columns.
    pub hamming: Option<f64>,
    /// Means over valid counterfactuals only.
    pub l1_valid: Option<f64>,
    pub l2_valid: Option<f64>,
    pub p_plaus: f64,
    pub log_dens: f64,
    pub lof: Option<f64>,
    pub isoforest: Option<f64>,
    pub time_s: f64,
}

/// Aggregates `batch`, generated from the rows of `x`.
pub fn cf_report(
    x: &Tensor,
    batch: &CounterfactualBatch,
    layout: &FeatureLayout,
    global_threshold: f64,
    time_s: f64,
    probes: Option<&OutlierProbes>,
) -> Result<CfReport> {
    let c = &batch.candidates;
    let requested = x.rows() * (c.probabilities.cols().saturating_sub(1));
    let produced = (0..batch.len())
        .filter(|&p| c.projected.row(p).iter().all(|v| v.is_finite()))
        .count();
    let valid = (0..batch.len()).filter(|&p| batch.is_valid(p)).count();
    let (coverage, validity) = coverage_validity(requested, produced, valid)?;
    let valid_unprojected = (0..batch.len())
        .filter(|&p| batch.cf_predicted_unprojected[p] == batch.target(p))
        .count();
    let n = batch.len().max(1) as f64;
    let (mut l1, mut l2, mut ham) = (0.0, 0.0, 0.0);
    let (mut l1v, mut l2v) = (0.0, 0.0);
    for (p, &(i, _)) in c.pairs.iter().enumerate() {
        let pr = proximity(x.row(i), c.projected.row(p), layout);
        l1 += pr.l1;
        l2 += pr.l2;
        ham += pr.hamming;
        if batch.is_valid(p) {
            l1v += pr.l1;
            l2v += pr.l2;
        }
    }
    let (p_plaus, log_dens) = plausibility(&batch.log_density, global_threshold)?;
    let (lof, isoforest) = match probes {
        Some(pr) => (
            Some(pr.lof.mean_score(&c.projected)?),
            Some(pr.isoforest.mean_score(&c.projected)?),
        ),
        None => (None, None),
    };
    let per_valid = |s: f64| (valid > 0).then(|| s / valid as f64);
    Ok(CfReport {
        count: batch.len(),
        coverage,
        validity,
        validity_unprojected: valid_unprojected as f64 / n,
        l1: l1 / n,
        l2: l2 / n,
        hamming: (!layout.groups.is_empty()).then_some(ham / n),
        l1_valid: per_valid(l1v),
        l2_valid: per_valid(l2v),
        p_plaus,
        log_dens,
        lof,
        isoforest,
        time_s,
    })
}

/// Classification quality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifReport {
    pub auroc: f64,
    pub accuracy: f64,
    pub class_counts: Vec<usize>,
}

pub fn classif_report(probabilities: &Tensor, labels: &[usize]) -> Result<ClassifReport> {
    let predicted = probabilities.argmax_rows();
    let correct = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(ClassifReport {
        auroc: auroc(probabilities, labels)?,
        accuracy: correct as f64 / labels.len().max(1) as f64,
        class_counts: class_counts(labels, probabilities.cols()),
    })
}

/// Runs `f` and returns its output with the elapsed wall time in seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

/// Fixed-width text table in the usual column order. A `Ham.` column is
/// added when any row has categorical features.
pub fn format_cf_table(rows: &[(String, CfReport)]) -> String {
    let with_ham = rows.iter().any(|(_, r)| r.hamming.is_some());
    let mut header = vec!["Method", "Cover.", "Valid.", "L1", "L2"];
    if with_ham {
        header.push("Ham.");
    }
    header.extend(["P.Plaus.", "LogDens", "LOF", "IsoForest", "Time(s)"]);
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", header[0]);
    for h in &header[1..] {
        let _ = write!(out, " {h:>9}");
    }
    out.push('\n');
    for (name, r) in rows {
        let mut cells = vec![
            cell(Some(r.coverage), 2),
            cell(Some(r.validity), 3),
            cell(Some(r.l1), 3),
            cell(Some(r.l2), 3),
        ];
        if with_ham {
            cells.push(cell(r.hamming, 3));
        }
        cells.extend([
            cell(Some(r.p_plaus), 3),
            cell(Some(r.log_dens), 2),
            cell(r.lof, 2),
            cell(r.isoforest, 3),
            cell(Some(r.time_s), 3),
        ]);
        let _ = write!(out, "{name:<width$}");
        for c in cells {
            let _ = write!(out, " {c:>9}");
        }
        out.push('\n');
    }
    out
}
