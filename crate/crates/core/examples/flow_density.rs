//! Fits the class-conditional flow to two Gaussian clusters and compares
//! log densities at the cluster centers under both class conditions.
//!
//! `cargo run --release --example flow_density`

use hyconex::flow::{density_thresholds, fit_flow, FlowConfig, FlowModel, FlowTrainConfig};
use hyconex::gradcore::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> hyconex::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 800;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let cx = if y == 0 { -2.0 } else { 2.0 };
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        data.extend([cx + 0.5 * a, 0.5 * b]);
        labels.push(y);
    }
    let x = Tensor::from_vec(n, 2, data);
    let mut flow = FlowModel::new(FlowConfig::new(2, 2), 0);
    let cfg = FlowTrainConfig {
        epochs: 60,
        ..FlowTrainConfig::default()
    };
    let report = fit_flow(&mut flow, &x, &labels, None, &cfg, None)?;
    println!("final NLL {:.3}", report.final_nll);
    let centers = Tensor::from_rows(&[vec![-2.0, 0.0], vec![2.0, 0.0]]);
    for y in 0..2 {
        let lp = flow.log_prob(&centers, &[y, y])?;
        println!("condition {y}: log p(left) {:+.2}, log p(right) {:+.2}", lp[0], lp[1]);
    }
    let t = density_thresholds(&flow, &x, &labels)?;
    println!("median log density per class {:?}, global {:.3}", t.per_class, t.global);
    Ok(())
}
