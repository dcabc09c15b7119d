//! Trains on two-moons data and prints classification and counterfactual quality.
//!
//! `cargo run --release --example train_moons`

use hyconex::dataio::{generate_synthetic, split_train_test, SyntheticKind};
use hyconex::metrics::{cf_report, classif_report, format_cf_table, timed, OutlierProbes};
use hyconex::training::{train, TrainConfig};

fn main() -> hyconex::Result<()> {
    let raw = generate_synthetic(SyntheticKind::Moons, 1000, 0.1, 7)?;
    let y: Vec<usize> = raw.labels.clone();
    let (tr, te) = split_train_test(&y, 2, 0.2, 7)?;
    let (train_raw, test_raw) = (raw.subset(&tr), raw.subset(&te));
    let cfg = TrainConfig::default();
    let (outcome, secs) = timed(|| train(&cfg, &train_raw));
    let outcome = outcome?;
    let model = &outcome.model;
    println!("trained in {secs:.1}s, selected epoch {:?}", outcome.selected_epoch);
    println!("final validation {:?}", outcome.final_validation);
    let test = model.encode(&test_raw)?;
    let train = model.encode(&train_raw)?;
    let probs = model.predict_proba(&test.x)?;
    let cr = classif_report(&probs, &test.y)?;
    println!("test AUROC {:.4} accuracy {:.4}", cr.auroc, cr.accuracy);
    let (batch, t) = timed(|| model.counterfactuals(&test.x));
    let batch = batch?;
    let probes = OutlierProbes::fit(&train.x, 0)?;
    let rep = cf_report(&test.x, &batch, &model.layout(), model.thresholds.global, t, Some(&probes))?;
    print!("{}", format_cf_table(&[("HyConEx".into(), rep)]));
    Ok(())
}
