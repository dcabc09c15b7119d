//! Saves a trained model to a `.hcx` bundle, reloads it and checks that
//! predictions and the content hash survive.
//!
//! `cargo run --release --example bundle_roundtrip`

use hyconex::dataio::{generate_synthetic, SyntheticKind};
use hyconex::persist::{hash_model, load_bundle, save_bundle};
use hyconex::training::{train, TrainConfig};

fn main() -> hyconex::Result<()> {
    let raw = generate_synthetic(SyntheticKind::Moons, 400, 0.1, 2)?;
    let mut cfg = TrainConfig::default();
    cfg.pretrain.epochs = 10;
    cfg.flow.epochs = 10;
    cfg.joint.epochs = 10;
    cfg.joint.ramp_epochs = 2;
    let model = train(&cfg, &raw)?.model;
    let path = std::env::temp_dir().join("hyconex-example.hcx");
    let manifest = save_bundle(&model, &path)?;
    println!("wrote {} ({} bytes, {} sections)", path.display(), manifest.bytes, manifest.sections);
    let back = load_bundle(&path)?;
    let x = model.encode(&raw)?.x;
    assert_eq!(model.predict_proba(&x)?, back.predict_proba(&x)?);
    println!("hash {}", hash_model(&back));
    println!("reloaded predictions are bit-identical");
    let header_end = std::fs::read(&path).map_err(|e| hyconex::Error::Bundle(e.to_string()))?;
    let preamble = header_end.split(|&b| b == b'\n').next().unwrap_or_default();
    println!("preamble: {}", String::from_utf8_lossy(preamble));
    Ok(())
}
