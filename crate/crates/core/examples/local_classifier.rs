//! Shows the per-input linear classifier emitted by an untrained
//! hypernetwork, and that its logits equal `W x̃`.
//!
//! `cargo run --example local_classifier`

use hyconex::hypernet::{feature_importance, local_logits, HyperConfig, HyperNetwork};
use hyconex::gradcore::Tensor;

fn main() -> hyconex::Result<()> {
    let net = HyperNetwork::new(HyperConfig::new(3, 2), 42);
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![-0.3, 0.0, 0.1]]);
    let w = net.weights(&x)?;
    for i in 0..x.rows() {
        println!("input {:?}", x.row(i));
        for k in 0..2 {
            let blk = &w.row(i)[k * 4..(k + 1) * 4];
            println!("  class {k}: bias {:+.4}, weights {:+.4?}", blk[0], &blk[1..]);
        }
    }
    println!("logits {:?}", local_logits(&x, &w, 2).data());
    println!("probabilities {:?}", net.predict_proba(&x)?.data());
    let imp = feature_importance(&net, x.row(0))?;
    println!("importance of input 0 for class {}: {:?}", imp.predicted, imp.weights);
    Ok(())
}
