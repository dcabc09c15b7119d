//! Trains a small blobs model and prints the rendered counterfactuals of a
//! few test points.
//!
//! `cargo run --release --example counterfactuals`

use hyconex::dataio::{generate_synthetic, split_train_test, SyntheticKind};
use hyconex::training::{train, TrainConfig};

fn main() -> hyconex::Result<()> {
    let raw = generate_synthetic(SyntheticKind::Blobs { classes: 3 }, 600, 0.0, 1)?;
    let (tr, te) = split_train_test(&raw.labels, 3, 0.2, 1)?;
    let mut cfg = TrainConfig::default();
    cfg.pretrain.epochs = 20;
    cfg.flow.epochs = 40;
    cfg.joint.epochs = 40;
    cfg.joint.ramp_epochs = 5;
    let model = train(&cfg, &raw.subset(&tr))?.model;
    let test = raw.subset(&te);
    for row in test.rows.iter().take(3) {
        let ex = model.explain(row)?;
        let set = &ex.counterfactuals;
        println!("input {:?} predicted {} {:?}", set.raw, set.predicted_label, set.probabilities);
        for e in &set.entries {
            println!(
                "  -> class {}: {:?} valid {} log density {:.2} plausible {}",
                e.target_label, e.raw, e.valid, e.log_density, e.plausible
            );
            for d in e.diffs.iter().filter(|d| d.is_change()) {
                println!("     {d:?}");
            }
        }
    }
    Ok(())
}
