//! Compares single-pass counterfactual generation with the gradient-search
//! baseline on the same trained model.
//!
//! `cargo run --release --example wachter_speed`

use hyconex::cli::evaluate;
use hyconex::dataio::{generate_synthetic, split_train_test, SyntheticKind};
use hyconex::training::{train, TrainConfig};

fn main() -> hyconex::Result<()> {
    let raw = generate_synthetic(SyntheticKind::Moons, 1000, 0.1, 5)?;
    let (tr, te) = split_train_test(&raw.labels, 2, 0.2, 5)?;
    let mut cfg = TrainConfig::default();
    cfg.joint.epochs = 60;
    let model = train(&cfg, &raw.subset(&tr))?.model;
    let r = evaluate(&model, &raw.subset(&te), None, Some(20))?;
    let wt = r.wachter_time_per_sample.unwrap_or(f64::NAN);
    println!("single pass: {:.3} ms per sample, validity {:.3}", 1e3 * r.time_per_sample, r.hyconex.validity);
    if let Some(w) = &r.wachter {
        println!("gradient search: {:.3} ms per sample, validity {:.3}", 1e3 * wt, w.validity);
    }
    println!("speed-up {:.0}x", wt / r.time_per_sample);
    Ok(())
}
