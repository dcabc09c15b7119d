//! Runs the evaluation metrics on hand-made inputs.
//!
//! `cargo run --example metrics_tour`

use hyconex::dataio::{Column, Schema};
use hyconex::gradcore::Tensor;
use hyconex::metrics::{auroc, coverage_validity, plausibility, proximity, IsoForest, LofIndex};

fn main() -> hyconex::Result<()> {
    let probs = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.4, 0.6], vec![0.2, 0.8], vec![0.6, 0.4]]);
    println!("AUROC {:.3}", auroc(&probs, &[0, 1, 1, 0])?);
    println!("coverage/validity {:?}", coverage_validity(10, 10, 9)?);
    let layout = Schema::new(
        vec![Column::numeric("a"), Column::categorical("c", &["x", "y"])],
        "t",
        vec!["0".into(), "1".into()],
    )?
    .layout();
    println!("{:?}", proximity(&[0.0, 1.0, 0.0], &[1.5, 0.0, 1.0], &layout));
    println!("P.Plaus/LogDens {:?}", plausibility(&[1.0, -1.0, 2.0, 0.5], 0.0)?);
    let grid: Vec<f64> = (0..100).flat_map(|i| [(i % 10) as f64, (i / 10) as f64]).collect();
    let reference = Tensor::from_vec(100, 2, grid);
    let probes = Tensor::from_rows(&[vec![4.5, 4.5], vec![30.0, 30.0]]);
    let lof = LofIndex::fit(&reference, 10)?;
    let iso = IsoForest::fit(&reference, 100, 64, 0)?;
    for (i, p) in ["inside", "far away"].iter().enumerate() {
        let q = probes.row(i);
        println!("{p}: LOF {:.2}, isolation score {:.3}", lof.score(q), iso.score(q));
    }
    Ok(())
}
