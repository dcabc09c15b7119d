use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::schema::{ColumnKind, FeatureLayout, RawDataset, RawValue, Schema};
use crate::error::{Error, Result};
use crate::gradcore::{argmax, Tensor};

/// Default standard deviation of the dequantization noise added to one-hot
/// blocks during training.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnStats {
    Numeric { mean: f64, std: f64 },
    Categorical { vocabulary: Vec<String> },
}

/// Fitted encoding: z-scores for numeric columns, one-hot for categoricals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub schema: Schema,
    pub stats: Vec<ColumnStats>,
    pub noise_sigma: f64,
}

/// Encoded training data.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    pub layout: FeatureLayout,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
            layout: self.layout.clone(),
        }
    }
}

impl Preprocessor {
    /// Fits statistics on the training split (population standard deviation).
    pub fn fit(train: &RawDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InsufficientData("empty training split".into()));
        }
        let mut stats = Vec::with_capacity(train.schema.columns.len());
        for (j, col) in train.schema.columns.iter().enumerate() {
            stats.push(match &col.kind {
                ColumnKind::Numeric => {
                    let vals: Vec<f64> = train
                        .rows
                        .iter()
                        .map(|r| {
                            r[j].as_num().ok_or_else(|| Error::InvalidValue {
                                column: col.name.clone(),
                                message: "expected a number".into(),
                            })
                        })
                        .collect::<Result<_>>()?;
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let std = var.sqrt();
                    if !(std > 0.0) || !std.is_finite() {
                        return Err(Error::ConstantColumn {
                            column: col.name.clone(),
                        });
                    }
                    ColumnStats::Numeric { mean, std }
                }
                ColumnKind::Categorical { categories } => ColumnStats::Categorical {
                    vocabulary: categories.clone(),
                },
            });
        }
        Ok(Self {
            schema: train.schema.clone(),
            stats,
            noise_sigma: DEFAULT_NOISE_SIGMA,
        })
    }

    pub fn with_noise_sigma(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn layout(&self) -> FeatureLayout {
        self.schema.layout()
    }

    pub fn dim(&self) -> usize {
        self.schema.encoded_dim()
    }

    /// Encodes one raw row.
    pub fn encode_row(&self, row: &[RawValue], out: &mut [f64]) -> Result<()> {
        if row.len() != self.stats.len() {
            return Err(Error::InvalidArgument(format!(
                "row has {} values, schema has {} columns",
                row.len(),
                self.stats.len()
            )));
        }
        let mut off = 0;
        for ((v, st), col) in row.iter().zip(&self.stats).zip(&self.schema.columns) {
            match (st, v) {
                (ColumnStats::Numeric { mean, std }, RawValue::Num(x)) => {
                    if !x.is_finite() {
                        return Err(Error::InvalidValue {
                            column: col.name.clone(),
                            message: "not a finite number".into(),
                        });
                    }
                    out[off] = (x - mean) / std;
                    off += 1;
                }
                (ColumnStats::Categorical { vocabulary }, RawValue::Cat(s)) => {
                    let k = vocabulary.iter().position(|c| c == s).ok_or_else(|| {
                        Error::UnseenCategory {
                            column: col.name.clone(),
                            value: s.clone(),
                        }
                    })?;
                    let blk = &mut out[off..off + vocabulary.len()];
                    blk.fill(0.0);
                    blk[k] = 1.0;
                    off += vocabulary.len();
                }
                (ColumnStats::Numeric { .. }, RawValue::Cat(s)) => {
                    return Err(Error::InvalidValue {
                        column: col.name.clone(),
                        message: format!("expected a number, got `{s}`"),
                    })
                }
                (ColumnStats::Categorical { .. }, RawValue::Num(x)) => {
                    return Err(Error::InvalidValue {
                        column: col.name.clone(),
                        message: format!("expected a category, got {x}"),
                    })
                }
            }
        }
        Ok(())
    }

    /// Encodes rows into an `N × D` matrix.
    ///
    /// With `noise_seed` set, i.i.d. `N(0, σ²)` is added to one-hot
    /// coordinates only. Never used for inference or evaluation.
    pub fn transform(&self, rows: &[Vec<RawValue>], noise_seed: Option<u64>) -> Result<Tensor> {
        let d = self.dim();
        let mut x = Tensor::zeros(rows.len(), d);
        for (i, r) in rows.iter().enumerate() {
            self.encode_row(r, x.row_mut(i))?;
        }
        if let Some(seed) = noise_seed {
            if self.noise_sigma > 0.0 {
                let layout = self.layout();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, self.noise_sigma).expect("valid sigma");
                for i in 0..x.rows() {
                    let row = x.row_mut(i);
                    for g in &layout.groups {
                        for v in &mut row[g.span.clone()] {
                            *v += normal.sample(&mut rng);
                        }
                    }
                }
            }
        }
        Ok(x)
    }

    pub fn encode(&self, data: &RawDataset, noise_seed: Option<u64>) -> Result<Dataset> {
        Ok(Dataset {
            x: self.transform(&data.rows, noise_seed)?,
            y: data.labels.clone(),
            classes: self.schema.num_classes(),
            layout: self.layout(),
        })
    }

    /// Maps an encoded row back to raw space; categorical blocks decode to
    /// their argmax category.
    pub fn inverse_row(&self, encoded: &[f64]) -> Vec<RawValue> {
        let mut off = 0;
        self.stats
            .iter()
            .map(|st| match st {
                ColumnStats::Numeric { mean, std } => {
                    let v = encoded[off] * std + mean;
                    off += 1;
                    RawValue::Num(v)
                }
                ColumnStats::Categorical { vocabulary } => {
                    let k = argmax(&encoded[off..off + vocabulary.len()]);
                    off += vocabulary.len();
                    RawValue::Cat(vocabulary[k].clone())
                }
            })
            .collect()
    }

    pub fn numeric_stats(&self) -> Vec<(f64, f64)> {
        self.stats
            .iter()
            .filter_map(|s| match s {
                ColumnStats::Numeric { mean, std } => Some((*mean, *std)),
                ColumnStats::Categorical { .. } => None,
            })
            .collect()
    }
}
