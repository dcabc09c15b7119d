//! Tabular data: schema, CSV input, preprocessing, synthetic generators,
//! splitting and per-class k-means.

mod csv_io;
mod kmeans;
mod manifest;
mod preprocess;
mod schema;
mod split;
mod synthetic;

pub use csv_io::{load_csv, load_csv_with_schema, parse_csv_str, write_csv, CsvOptions, KindHint};
pub use kmeans::{kmeans, kmeans_per_class, ClusterIndex, KMeansFit};
pub use manifest::{DatasetManifest, GeneratorSpec};
pub use preprocess::{ColumnStats, Dataset, Preprocessor, DEFAULT_NOISE_SIGMA};
pub use schema::{
    class_counts, CategoricalGroup, Column, ColumnKind, FeatureLayout, RawDataset, RawValue, Schema,
};
pub use split::{downsample_balance, split_train_test};
pub use synthetic::{generate_synthetic, SyntheticKind};
