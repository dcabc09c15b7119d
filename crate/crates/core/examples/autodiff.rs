//! Records a small computation on a tape and checks its gradient against
//! central finite differences.
//!
//! `cargo run --example autodiff`

use hyconex::gradcore::{finite_diff_check, Tape, Tensor};

fn loss(v: &[f64]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(2, 2, v.to_vec()));
    let t = tape.tanh(x);
    let s = tape.square(t);
    let ce = tape.softmax_cross_entropy(s, &[0, 1]);
    let l = tape.mean(ce);
    let g = tape.backward(l);
    (tape.value(l).item(), g.wrt(x).data().to_vec())
}

fn main() {
    let point = [0.3, -1.2, 0.7, 2.0];
    let (value, grad) = loss(&point);
    let report = finite_diff_check(|p| loss(p).0, &point, &grad, None);
    println!("loss {value:.6}");
    println!("analytic gradient {grad:?}");
    println!(
        "max relative error vs finite differences {:.2e} over {} coordinates",
        report.max_rel_error, report.checked
    );
}
