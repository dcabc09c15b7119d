//! Loads the bundled Wine CSV, fits the preprocessor and trains a model.
//!
//! `cargo run --release --example wine_csv`

use hyconex::dataio::{load_csv, split_train_test, CsvOptions, Preprocessor};
use hyconex::metrics::{cf_report, classif_report};
use hyconex::training::{train, TrainConfig};

fn main() -> hyconex::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/wine.csv");
    let raw = load_csv(path, &CsvOptions::default())?;
    println!(
        "{} rows, {} columns, classes {:?}, counts {:?}",
        raw.len(),
        raw.schema.columns.len(),
        raw.schema.classes,
        raw.class_counts()
    );
    let prep = Preprocessor::fit(&raw)?;
    println!("encoded dimension {}", prep.dim());
    let (tr, te) = split_train_test(&raw.labels, 3, 0.2, 0)?;
    let cfg = TrainConfig::from_toml(include_str!("../../../configs/wine.toml"))?;
    let model = train(&cfg, &raw.subset(&tr))?.model;
    let test = model.encode(&raw.subset(&te))?;
    let c = classif_report(&model.predict_proba(&test.x)?, &test.y)?;
    let batch = model.counterfactuals(&test.x)?;
    let r = cf_report(&test.x, &batch, &model.layout(), model.thresholds.global, 0.0, None)?;
    println!("AUROC {:.3}, validity {:.3}, L2 {:.3}, P.Plaus {:.3}", c.auroc, r.validity, r.l2, r.p_plaus);
    Ok(())
}
