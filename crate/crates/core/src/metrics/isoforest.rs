use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

const EULER_GAMMA: f64 = 0.5772156649;

/// Approximate harmonic number, exact at 1.
pub fn harmonic(i: usize) -> f64 {
    if i <= 1 {
        1.0
    } else {
        (i as f64).ln() + EULER_GAMMA
    }
}

/// Average path length of an unsuccessful binary-search-tree lookup among
/// `n` points.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => 2.0 * harmonic(n - 1) - 2.0 * (n - 1) as f64 / n as f64,
    }
}

#[derive(Clone, Debug)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        size: usize,
    },
}

impl Node {
    fn path_length(&self, x: &[f64], depth: usize) -> f64 {
        match self {
            Node::Leaf { size } => depth as f64 + average_path_length(*size),
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] < *threshold {
                    left.path_length(x, depth + 1)
                } else {
                    right.path_length(x, depth + 1)
                }
            }
        }
    }
}

fn build(points: &Tensor, idx: &mut [usize], depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> Node {
    if depth >= limit || idx.len() <= 1 {
        return Node::Leaf { size: idx.len() };
    }
    let mut features: Vec<usize> = (0..points.cols()).collect();
    features.shuffle(rng);
    for feature in features {
        let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = points.get(i, feature);
            (lo.min(v), hi.max(v))
        });
        if lo < hi {
            let threshold = rng.random_range(lo..hi);
            let mut split = 0;
            for j in 0..idx.len() {
                if points.get(idx[j], feature) < threshold {
                    idx.swap(split, j);
                    split += 1;
                }
            }
            let (l, r) = idx.split_at_mut(split);
            return Node::Split {
                feature,
                threshold,
                left: Box::new(build(points, l, depth + 1, limit, rng)),
                right: Box::new(build(points, r, depth + 1, limit, rng)),
            };
        }
    }
    Node::Leaf { size: idx.len() }
}

/// Isolation forest; scores are positive for inliers.
#[derive(Clone, Debug)]
pub struct IsoForest {
    trees: Vec<Node>,
    sample_size: usize,
}

impl IsoForest {
    /// `trees` trees, each on `min(sample_size, n)` points drawn without
    /// replacement, depth-limited to `⌈log₂ ψ⌉`.
    pub fn fit(points: &Tensor, trees: usize, sample_size: usize, seed: u64) -> Result<Self> {
        let n = points.rows();
        if n < 2 || trees == 0 {
            return Err(Error::Metric("isolation forest needs ≥ 2 points and ≥ 1 tree".into()));
        }
        let psi = sample_size.min(n).max(2);
        let limit = (psi as f64).log2().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all: Vec<usize> = (0..n).collect();
        let trees = (0..trees)
            .map(|_| {
                let mut idx: Vec<usize> = all.choose_multiple(&mut rng, psi).copied().collect();
                build(points, &mut idx, 0, limit, &mut rng)
            })
            .collect();
        Ok(Self {
            trees,
            sample_size: psi,
        })
    }

    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x, 0)).sum::<f64>() / self.trees.len() as f64
    }

    /// `0.5 − 2^{−E[h(x)]/c(ψ)}`.
    pub fn score(&self, x: &[f64]) -> f64 {
        0.5 - 2f64.powf(-self.mean_path_length(x) / average_path_length(self.sample_size))
    }

    pub fn mean_score(&self, queries: &Tensor) -> Result<f64> {
        if queries.rows() == 0 {
            return Err(Error::Metric("isolation forest score of an empty set".into()));
        }
        Ok((0..queries.rows()).map(|i| self.score(queries.row(i))).sum::<f64>() / queries.rows() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(n, 2, (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    #[test]
    fn normalization_constant() {
        assert_eq!(average_path_length(2), 1.0);
        assert_eq!(harmonic(1), 1.0);
        let c256 = 2.0 * ((255f64).ln() + EULER_GAMMA) - 2.0 * 255.0 / 256.0;
        assert!((average_path_length(256) - c256).abs() < 1e-12);
    }

    #[test]
    fn depth_equal_to_normalizer_scores_zero() {
        let c = average_path_length(256);
        assert!((0.5 - 2f64.powf(-c / c)).abs() < 1e-15);
    }

    #[test]
    fn inliers_beat_outliers_across_seeds() {
        let mut wins = 0;
        let mut positive_means = 0;
        for seed in 0..20 {
            let pts = cloud(seed, 500);
            let f = IsoForest::fit(&pts, 100, 256, seed).unwrap();
            if f.score(&[0.0, 0.0]) > f.score(&[10.0, 0.0]) {
                wins += 1;
            }
            if f.mean_score(&pts).unwrap() > 0.0 {
                positive_means += 1;
            }
            for i in 0..pts.rows() {
                let s = f.score(pts.row(i));
                assert!(s > -0.5 && s <= 0.5);
            }
        }
        assert!(wins > 10, "{wins}/20");
        assert!(positive_means > 10, "{positive_means}/20");
    }

    #[test]
    fn same_seed_same_forest() {
        let pts = cloud(1, 300);
        let a = IsoForest::fit(&pts, 10, 64, 5).unwrap();
        let b = IsoForest::fit(&pts, 10, 64, 5).unwrap();
        assert_eq!(a.score(&[0.3, 0.1]), b.score(&[0.3, 0.1]));
    }
}
