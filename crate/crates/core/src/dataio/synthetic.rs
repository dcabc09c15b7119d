use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::schema::{Column, RawDataset, RawValue, Schema};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two interleaving half circles.
    Moons,
    /// Isotropic Gaussian clusters, one per class.
    Blobs { classes: usize },
}

/// Minimum pairwise distance between blob centers.
const BLOB_SEPARATION: f64 = 6.0;
const BLOB_BOX: f64 = 10.0;

/// Generates a two-feature dataset with columns `x1, x2` and target `label`.
///
/// Moons: class 0 lies on the upper unit half circle, class 1 on the lower
/// half circle centred at `(1, 0.5)`; angles are evenly spaced. Blobs:
/// unit-variance Gaussians around centers at least 6 apart, `n / K` points
/// each. Gaussian noise of standard deviation `noise` is added to moons;
/// rows are shuffled. Fully determined by `seed`.
pub fn generate_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<RawDataset> {
    let classes = match kind {
        SyntheticKind::Moons => 2,
        SyntheticKind::Blobs { classes } => classes,
    };
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if n < 2 * classes {
        return Err(Error::InvalidArgument(format!(
            "n = {n} is too small for {classes} classes"
        )));
    }
    if noise < 0.0 || !noise.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid noise {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    match kind {
        SyntheticKind::Moons => {
            let n_outer = n / 2;
            let n_inner = n - n_outer;
            for (count, class) in [(n_outer, 0), (n_inner, 1)] {
                for i in 0..count {
                    let t = if count > 1 {
                        PI * i as f64 / (count - 1) as f64
                    } else {
                        0.0
                    };
                    let p = if class == 0 {
                        [t.cos(), t.sin()]
                    } else {
                        [1.0 - t.cos(), 1.0 - t.sin() - 0.5]
                    };
                    points.push((p, class));
                }
            }
            if noise > 0.0 {
                let normal = Normal::new(0.0, noise).expect("valid noise");
                for (p, _) in &mut points {
                    p[0] += normal.sample(&mut rng);
                    p[1] += normal.sample(&mut rng);
                }
            }
        }
        SyntheticKind::Blobs { classes } => {
            let centers = blob_centers(classes, &mut rng)?;
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            for (c, center) in centers.iter().enumerate() {
                let count = n / classes + usize::from(c < n % classes);
                for _ in 0..count {
                    points.push((
                        [
                            center[0] + normal.sample(&mut rng),
                            center[1] + normal.sample(&mut rng),
                        ],
                        c,
                    ));
                }
            }
        }
    }
    points.shuffle(&mut rng);
    let schema = Schema::new(
        vec![Column::numeric("x1"), Column::numeric("x2")],
        "label",
        (0..classes).map(|c| c.to_string()).collect(),
    )?;
    Ok(RawDataset {
        schema,
        rows: points
            .iter()
            .map(|(p, _)| vec![RawValue::Num(p[0]), RawValue::Num(p[1])])
            .collect(),
        labels: points.iter().map(|&(_, c)| c).collect(),
    })
}

fn blob_centers(k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>> {
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(k);
    let mut tries = 0;
    while centers.len() < k {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::InvalidArgument(format!(
                "cannot place {k} blob centers {BLOB_SEPARATION} apart"
            )));
        }
        let c = [
            rng.random_range(-BLOB_BOX..BLOB_BOX),
            rng.random_range(-BLOB_BOX..BLOB_BOX),
        ];
        if centers
            .iter()
            .all(|o| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt() >= BLOB_SEPARATION)
        {
            centers.push(c);
        }
    }
    Ok(centers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_moons_lie_on_circles() {
        let d = generate_synthetic(SyntheticKind::Moons, 200, 0.0, 1).unwrap();
        for (r, &y) in d.rows.iter().zip(&d.labels) {
            let (a, b) = (r[0].as_num().unwrap(), r[1].as_num().unwrap());
            if y == 0 {
                assert!((a * a + b * b - 1.0).abs() < 1e-12);
                assert!(b >= -1e-12);
            } else {
                let (u, v) = (a - 1.0, b - 0.5);
                assert!((u * u + v * v - 1.0).abs() < 1e-12);
                assert!(v <= 1e-12);
            }
        }
        assert_eq!(d.class_counts(), vec![100, 100]);
    }

    #[test]
    fn blobs_allocate_equally_and_separate() {
        let d = generate_synthetic(SyntheticKind::Blobs { classes: 3 }, 300, 0.0, 3).unwrap();
        assert_eq!(d.class_counts(), vec![100, 100, 100]);
        let mut means = vec![[0.0; 2]; 3];
        for (r, &y) in d.rows.iter().zip(&d.labels) {
            means[y][0] += r[0].as_num().unwrap() / 100.0;
            means[y][1] += r[1].as_num().unwrap() / 100.0;
        }
        for i in 0..3 {
            for j in i + 1..3 {
                let dist = ((means[i][0] - means[j][0]).powi(2) + (means[i][1] - means[j][1]).powi(2)).sqrt();
                assert!(dist > 5.0, "blob means {i},{j} only {dist} apart");
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic(SyntheticKind::Moons, 100, 0.1, 9).unwrap();
        let b = generate_synthetic(SyntheticKind::Moons, 100, 0.1, 9).unwrap();
        let c = generate_synthetic(SyntheticKind::Moons, 100, 0.1, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_rows_is_rejected() {
        assert!(generate_synthetic(SyntheticKind::Blobs { classes: 3 }, 5, 0.0, 0).is_err());
    }
}
