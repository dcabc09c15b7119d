use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// Floor on the mean reachability distance before inverting, so duplicate
/// points do not produce infinite densities.
const MIN_REACH: f64 = 1e-10;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Local outlier factor fitted on reference points.
#[derive(Clone, Debug)]
pub struct LofIndex {
    points: Tensor,
    k: usize,
    k_distance: Vec<f64>,
    lrd: Vec<f64>,
}

impl LofIndex {
    pub fn fit(points: &Tensor, k: usize) -> Result<Self> {
        let n = points.rows();
        if k == 0 || k >= n {
            return Err(Error::Metric(format!("LOF needs 1 ≤ k < {n}, got k = {k}")));
        }
        let mut index = Self {
            points: points.clone(),
            k,
            k_distance: vec![0.0; n],
            lrd: vec![0.0; n],
        };
        let neighbors: Vec<Vec<(f64, usize)>> = (0..n)
            .map(|i| index.neighbors(points.row(i), Some(i)))
            .collect();
        for (i, nb) in neighbors.iter().enumerate() {
            index.k_distance[i] = nb[k - 1].0;
        }
        for (i, nb) in neighbors.iter().enumerate() {
            index.lrd[i] = index.lrd_of(nb);
        }
        Ok(index)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The `k` nearest reference points, ties by index.
    fn neighbors(&self, q: &[f64], exclude: Option<usize>) -> Vec<(f64, usize)> {
        let mut d: Vec<(f64, usize)> = (0..self.points.rows())
            .filter(|&j| Some(j) != exclude)
            .map(|j| (dist(q, self.points.row(j)), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(self.k);
        d
    }

    fn lrd_of(&self, neighbors: &[(f64, usize)]) -> f64 {
        let mean = neighbors
            .iter()
            .map(|&(d, o)| d.max(self.k_distance[o]))
            .sum::<f64>()
            / self.k as f64;
        1.0 / mean.max(MIN_REACH)
    }

    fn lof_of(&self, neighbors: &[(f64, usize)]) -> f64 {
        let lrd_p = self.lrd_of(neighbors);
        neighbors.iter().map(|&(_, o)| self.lrd[o] / lrd_p).sum::<f64>() / self.k as f64
    }

    /// LOF of a new point against the reference set.
    pub fn score(&self, q: &[f64]) -> f64 {
        self.lof_of(&self.neighbors(q, None))
    }

    /// LOF of reference point `i`, excluding itself from its neighborhood.
    pub fn score_reference(&self, i: usize) -> f64 {
        self.lof_of(&self.neighbors(self.points.row(i), Some(i)))
    }

    pub fn mean_score(&self, queries: &Tensor) -> Result<f64> {
        if queries.rows() == 0 {
            return Err(Error::Metric("LOF of an empty set".into()));
        }
        Ok((0..queries.rows()).map(|i| self.score(queries.row(i))).sum::<f64>() / queries.rows() as f64)
    }
}
