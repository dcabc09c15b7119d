//! Direct-definition metric oracles and randomized comparisons.

use hyconex::dataio::{Column, Schema};
use hyconex::gradcore::Tensor;
use hyconex::metrics::{auroc_binary, average_path_length, proximity, IsoForest, LofIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const TOLERANCE: f64 = 1e-9;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pair-counting AUROC: positives ranked above negatives, ties one half.
pub fn auroc_pairs(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// LOF straight from its definition: k-distance neighborhoods, reachability
/// distances, local reachability densities.
pub struct LofOracle<'a> {
    points: &'a [Vec<f64>],
    k: usize,
}

impl<'a> LofOracle<'a> {
    pub fn new(points: &'a [Vec<f64>], k: usize) -> Self {
        Self { points, k }
    }

    fn neighborhood(&self, q: &[f64], exclude: Option<usize>) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = (0..self.points.len())
            .filter(|&j| Some(j) != exclude)
            .map(|j| (dist(q, &self.points[j]), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let kd = d[self.k - 1].0;
        d.into_iter().take_while(|&(x, _)| x <= kd).map(|(_, j)| j).collect()
    }

    fn k_distance(&self, i: usize) -> f64 {
        let p = &self.points[i];
        let mut d: Vec<f64> = (0..self.points.len())
            .filter(|&j| j != i)
            .map(|j| dist(p, &self.points[j]))
            .collect();
        d.sort_by(f64::total_cmp);
        d[self.k - 1]
    }

    fn lrd(&self, q: &[f64], exclude: Option<usize>) -> f64 {
        let nb = self.neighborhood(q, exclude);
        let reach: f64 = nb
            .iter()
            .map(|&o| dist(q, &self.points[o]).max(self.k_distance(o)))
            .sum();
        nb.len() as f64 / reach
    }

    pub fn lof(&self, q: &[f64], exclude: Option<usize>) -> f64 {
        let nb = self.neighborhood(q, exclude);
        let own = self.lrd(q, exclude);
        nb.iter().map(|&o| self.lrd(&self.points[o], Some(o)) / own).sum::<f64>() / nb.len() as f64
    }
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(0.0..scale)).collect()).collect()
}

fn tensor(points: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(points)
}

/// Library LOF against the oracle on random sets of at most 64 points, for
/// reference points and fresh queries. Returns the largest deviation.
pub fn lof_suite(seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(8..=64);
        let d = rng.random_range(1..=3);
        let k = rng.random_range(1..=(n - 1).min(10));
        let pts = cloud(&mut rng, n, d, 10.0);
        let index = LofIndex::fit(&tensor(&pts), k).map_err(|e| e.to_string())?;
        let oracle = LofOracle::new(&pts, k);
        for i in 0..n {
            worst = worst.max((index.score_reference(i) - oracle.lof(&pts[i], Some(i))).abs());
        }
        for q in cloud(&mut rng, 8, d, 12.0) {
            worst = worst.max((index.score(&q) - oracle.lof(&q, None)).abs());
        }
        if !(worst <= TOLERANCE) {
            return Err(format!("seed {seed}: LOF deviates by {worst:.3e}"));
        }
    }
    Ok(worst)
}

/// On a 9 × 9 unit lattice with k = 4, every point at least three steps
/// from the border has LOF 1: its neighbors and theirs all have k-distance 1.
pub fn lattice_lof() -> Result<f64, String> {
    let pts: Vec<Vec<f64>> = (0..81).map(|i| vec![(i % 9) as f64, (i / 9) as f64]).collect();
    let index = LofIndex::fit(&tensor(&pts), 4).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (i, p) in pts.iter().enumerate() {
        if p.iter().all(|&c| (3.0..=5.0).contains(&c)) {
            worst = worst.max((index.score_reference(i) - 1.0).abs());
        }
    }
    if worst <= TOLERANCE {
        Ok(worst)
    } else {
        Err(format!("interior LOF deviates from 1 by {worst:.3e}"))
    }
}

/// Library AUROC against pair counting on random, tie-heavy score sets.
pub fn auroc_suite(seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.random_range(2..=64);
        let levels = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        pos[0] = true;
        pos[1] = false;
        let got = auroc_binary(&scores, &pos).map_err(|e| e.to_string())?;
        worst = worst.max((got - auroc_pairs(&scores, &pos)).abs());
        if !(worst <= TOLERANCE) {
            return Err(format!("seed {seed}: AUROC deviates by {worst:.3e}"));
        }
    }
    Ok(worst)
}

/// Library proximity against the direct L1, L2 and changed-group fraction
/// on random mixed layouts.
pub fn proximity_suite(seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let cols: Vec<Column> = (0..rng.random_range(1..=6))
            .map(|i| {
                if rng.random_bool(0.5) {
                    Column::numeric(format!("n{i}"))
                } else {
                    let cats: Vec<String> = (0..rng.random_range(2..=4)).map(|c| format!("v{c}")).collect();
                    let refs: Vec<&str> = cats.iter().map(String::as_str).collect();
                    Column::categorical(format!("c{i}"), &refs)
                }
            })
            .collect();
        let schema = Schema::new(cols, "t", vec!["0".into(), "1".into()]).map_err(|e| e.to_string())?;
        let layout = schema.layout();
        let mut x = vec![0.0f64; layout.dim];
        let mut cf = vec![0.0f64; layout.dim];
        for &j in &layout.numeric {
            x[j] = rng.random_range(-5.0..5.0);
            cf[j] = rng.random_range(-5.0..5.0);
        }
        let mut changed = 0;
        for g in &layout.groups {
            let (a, b) = (rng.random_range(g.span.clone()), rng.random_range(g.span.clone()));
            x[a] = 1.0;
            cf[b] = 1.0;
            changed += usize::from(a != b);
        }
        let l1: f64 = layout.numeric.iter().map(|&j| (x[j] - cf[j]).abs()).sum();
        let l2: f64 = layout.numeric.iter().map(|&j| (x[j] - cf[j]).powi(2)).sum::<f64>().sqrt();
        let ham = if layout.groups.is_empty() {
            0.0
        } else {
            changed as f64 / layout.groups.len() as f64
        };
        let p = proximity(&x, &cf, &layout);
        worst = worst
            .max((p.l1 - l1).abs())
            .max((p.l2 - l2).abs())
            .max((p.hamming - ham).abs());
        if !(worst <= TOLERANCE) {
            return Err(format!("seed {seed}: proximity deviates by {worst:.3e}"));
        }
    }
    Ok(worst)
}

/// `c(2) = 1` exactly, and on each of `clouds` seeded Gaussian clouds the
/// center scores above a far outlier.
pub fn isoforest_suite(clouds: u64) -> Result<(), String> {
    if average_path_length(2) != 1.0 {
        return Err(format!("c(2) = {}", average_path_length(2)));
    }
    for seed in 0..clouds {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| {
                (0..2)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        v
                    })
                    .collect()
            })
            .collect();
        let forest = IsoForest::fit(&tensor(&pts), 100, 256, seed).map_err(|e| e.to_string())?;
        let inlier = forest.score(&[0.0, 0.0]);
        let outlier = forest.score(&[6.0, -6.0]);
        if !(inlier > outlier) {
            return Err(format!("cloud {seed}: inlier {inlier} ≤ outlier {outlier}"));
        }
    }
    Ok(())
}
