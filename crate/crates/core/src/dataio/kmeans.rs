use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

const MAX_ITERATIONS: usize = 300;
const TOLERANCE: f64 = 1e-6;

/// Result of one k-means run.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centers: Tensor,
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest row of `centers`; ties go to
/// the lower index.
fn nearest(centers: &Tensor, p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = sq_dist(centers.row(c), p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = points.rows();
    let mut centers = Tensor::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    centers
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Stops when no center moves more than `1e-6` or after 300 iterations. An
/// empty cluster is re-seeded at the point farthest from its own center.
pub fn kmeans(points: &Tensor, k: usize, seed: u64) -> Result<KMeansFit> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::InsufficientData(format!(
            "k-means with k = {k} needs at least {k} points, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let dim = points.cols();
    let mut assignments = vec![0; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(&centers, points.row(i));
            assignments[i] = c;
            dists[i] = d;
        }
        let mut counts = vec![0usize; k];
        for &c in &assignments {
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[assignments[i]] -= 1;
                    assignments[i] = c;
                    counts[c] = 1;
                    dists[i] = 0.0;
                }
            }
        }
        sse_history.push(dists.iter().sum());

        let mut sums = Tensor::zeros(k, dim);
        for i in 0..n {
            for (s, v) in sums.row_mut(assignments[i]).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let mut moved = 0.0;
            for (j, s) in sums.row(c).iter().enumerate() {
                let new = s * inv;
                moved += (new - centers.get(c, j)).powi(2);
                centers.set(c, j, new);
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < TOLERANCE {
            break;
        }
    }
    let final_sse = (0..n).map(|i| nearest(&centers, points.row(i)).1).sum();
    sse_history.push(final_sse);
    Ok(KMeansFit {
        centers,
        assignments,
        sse_history,
        iterations,
    })
}

/// Cluster centers of every class in encoded space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterIndex {
    pub centers: Vec<Tensor>,
}

impl ClusterIndex {
    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    /// Euclidean-nearest center of class `class` to `x`; ties go to the
    /// lower ordinal.
    pub fn nearest_alt_center(&self, x: &[f64], class: usize) -> &[f64] {
        let centers = &self.centers[class];
        let (c, _) = nearest(centers, x);
        centers.row(c)
    }
}

/// Clusters each class separately.
pub fn kmeans_per_class(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    k: usize,
    seed: u64,
) -> Result<ClusterIndex> {
    let mut centers = Vec::with_capacity(classes);
    for c in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < k {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} rows, fewer than k = {k} clusters",
                idx.len()
            )));
        }
        let fit = kmeans(&x.select_rows(&idx), k, seed.wrapping_add(c as u64))?;
        centers.push(fit.centers);
    }
    Ok(ClusterIndex { centers })
}
