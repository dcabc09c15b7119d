use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical { categories: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

impl Column {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
        }
    }

    pub fn categorical(name: impl Into<String>, categories: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical {
                categories: categories.iter().map(|s| s.to_string()).collect(),
            },
        }
    }

    /// Width of the column once encoded.
    pub fn width(&self) -> usize {
        match &self.kind {
            ColumnKind::Numeric => 1,
            ColumnKind::Categorical { categories } => categories.len(),
        }
    }
}

/// Feature columns, target name and class labels of a tabular dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
    pub target: String,
    pub classes: Vec<String>,
}

impl Schema {
    pub fn new(columns: Vec<Column>, target: impl Into<String>, classes: Vec<String>) -> Result<Self> {
        let s = Self {
            columns,
            target: target.into(),
            classes,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{}`", c.name)));
            }
            if let ColumnKind::Categorical { categories } = &c.kind {
                if categories.len() < 2 {
                    return Err(Error::Schema(format!(
                        "categorical column `{}` needs at least 2 categories",
                        c.name
                    )));
                }
                let uniq: HashSet<_> = categories.iter().collect();
                if uniq.len() != categories.len() {
                    return Err(Error::Schema(format!(
                        "categorical column `{}` repeats a category",
                        c.name
                    )));
                }
            }
        }
        if seen.contains(self.target.as_str()) {
            return Err(Error::Schema(format!(
                "target `{}` is also a feature column",
                self.target
            )));
        }
        if self.classes.len() < 2 {
            return Err(Error::Schema(format!(
                "need at least 2 classes, found {}",
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Encoded dimension `D`.
    pub fn encoded_dim(&self) -> usize {
        self.columns.iter().map(Column::width).sum()
    }

    /// Names of the encoded coordinates: `col` for numeric columns and
    /// `col=category` for one-hot entries.
    pub fn encoded_names(&self) -> Vec<String> {
        self.columns
            .iter()
            .flat_map(|c| match &c.kind {
                ColumnKind::Numeric => vec![c.name.clone()],
                ColumnKind::Categorical { categories } => {
                    categories.iter().map(|v| format!("{}={v}", c.name)).collect()
                }
            })
            .collect()
    }

    pub fn layout(&self) -> FeatureLayout {
        let mut numeric = Vec::new();
        let mut groups = Vec::new();
        let mut spans = Vec::new();
        let mut off = 0;
        for (i, c) in self.columns.iter().enumerate() {
            let w = c.width();
            spans.push(off..off + w);
            match c.kind {
                ColumnKind::Numeric => numeric.push(off),
                ColumnKind::Categorical { .. } => groups.push(CategoricalGroup {
                    column: i,
                    span: off..off + w,
                }),
            }
            off += w;
        }
        FeatureLayout {
            dim: off,
            numeric,
            groups,
            spans,
        }
    }
}

/// One-hot block of a categorical column inside the encoded vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoricalGroup {
    /// Index of the source column in the schema.
    pub column: usize,
    pub span: Range<usize>,
}

/// Where each schema column lives in the encoded vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub dim: usize,
    /// Encoded coordinates holding standardized numeric columns.
    pub numeric: Vec<usize>,
    pub groups: Vec<CategoricalGroup>,
    /// Encoded span of every schema column, in schema order.
    pub spans: Vec<Range<usize>>,
}

/// A raw (unencoded) cell value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Num(f64),
    Cat(String),
}

impl RawValue {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            RawValue::Num(v) => Some(*v),
            RawValue::Cat(_) => None,
        }
    }
}

impl fmt::Display for RawValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawValue::Num(v) => write!(f, "{v}"),
            RawValue::Cat(s) => f.write_str(s),
        }
    }
}

/// Typed table in raw space: feature rows plus integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub schema: Schema,
    pub rows: Vec<Vec<RawValue>>,
    pub labels: Vec<usize>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> RawDataset {
        RawDataset {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.labels, self.schema.num_classes())
    }
}

pub fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}
