use serde::{Deserialize, Serialize};

use crate::dataio::FeatureLayout;
use crate::error::{Error, Result};

/// `(coverage, validity)`: produced over requested, then valid over produced.
pub fn coverage_validity(requested: usize, produced: usize, valid: usize) -> Result<(f64, f64)> {
    if requested == 0 {
        return Err(Error::Metric("no counterfactuals were requested".into()));
    }
    if produced > requested || valid > produced {
        return Err(Error::Metric("inconsistent counterfactual counts".into()));
    }
    let coverage = produced as f64 / requested as f64;
    let validity = if produced == 0 {
        0.0
    } else {
        valid as f64 / produced as f64
    };
    Ok((coverage, validity))
}

/// Distances between an encoded input and its counterfactual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proximity {
    /// L1 over numeric coordinates.
    pub l1: f64,
    /// L2 over numeric coordinates.
    pub l2: f64,
    /// Fraction of categorical groups whose block changed; 0 without groups.
    pub hamming: f64,
}

pub fn proximity(x: &[f64], cf: &[f64], layout: &FeatureLayout) -> Proximity {
    let (mut l1, mut sq) = (0.0, 0.0);
    for &j in &layout.numeric {
        let d = cf[j] - x[j];
        l1 += d.abs();
        sq += d * d;
    }
    let changed = layout
        .groups
        .iter()
        .filter(|g| x[g.span.clone()] != cf[g.span.clone()])
        .count();
    let hamming = if layout.groups.is_empty() {
        0.0
    } else {
        changed as f64 / layout.groups.len() as f64
    };
    Proximity {
        l1,
        l2: sq.sqrt(),
        hamming,
    }
}

/// `(P.Plaus, mean log density)`: the fraction strictly above `threshold`
/// and the average.
pub fn plausibility(log_densities: &[f64], threshold: f64) -> Result<(f64, f64)> {
    if log_densities.is_empty() {
        return Err(Error::Metric("plausibility of an empty set".into()));
    }
    let n = log_densities.len() as f64;
    let above = log_densities.iter().filter(|&&v| v > threshold).count() as f64;
    Ok((above / n, log_densities.iter().sum::<f64>() / n))
}
