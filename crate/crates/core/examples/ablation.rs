//! Trains every loss configuration on two-moons data and prints the
//! comparison table.
//!
//! `cargo run --release --example ablation`

use hyconex::cli::{ablation_matrix, format_ablation};
use hyconex::dataio::{generate_synthetic, split_train_test, SyntheticKind};
use hyconex::training::TrainConfig;

fn main() -> hyconex::Result<()> {
    let raw = generate_synthetic(SyntheticKind::Moons, 1000, 0.1, 7)?;
    let (tr, te) = split_train_test(&raw.labels, 2, 0.2, 7)?;
    let mut cfg = TrainConfig::default();
    cfg.joint.epochs = 60;
    let rows = ablation_matrix(&cfg, &raw.subset(&tr), &raw.subset(&te));
    print!("{}", format_ablation(&rows));
    Ok(())
}
