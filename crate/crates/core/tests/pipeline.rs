//! Training, persistence and counterfactual invariants on small problems.

use std::sync::OnceLock;

use hyconex::dataio::{generate_synthetic, Column, RawDataset, RawValue, Schema, SyntheticKind};
use hyconex::gradcore::Tensor;
use hyconex::persist::{hash_model, load_bundle, save_bundle};
use hyconex::training::{train, TrainConfig};
use hyconex::Model;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        batch_size: 64,
        clusters_per_class: 2,
        ..TrainConfig::default()
    };
    cfg.network.hidden = 16;
    cfg.network.blocks = 1;
    cfg.network.flow_layers = 2;
    cfg.network.flow_hidden = 8;
    cfg.network.flow_blocks = 1;
    cfg.pretrain.epochs = 4;
    cfg.flow.epochs = 4;
    cfg.joint.epochs = 4;
    cfg.joint.ramp_epochs = 2;
    cfg
}

/// Numeric `a`, `b` and categorical `c`; the label depends on all three.
fn mixed_data(n: usize, seed: u64) -> RawDataset {
    let schema = Schema::new(
        vec![
            Column::numeric("a"),
            Column::categorical("c", &["x", "y", "z"]),
            Column::numeric("b"),
        ],
        "t",
        vec!["no".into(), "yes".into()],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let a: f64 = rng.random_range(-2.0..2.0);
        let b: f64 = rng.random_range(0.0..10.0);
        let c = ["x", "y", "z"][rng.random_range(0..3)];
        let score = a + 0.3 * (b - 5.0) + if c == "y" { 1.0 } else { -0.5 };
        labels.push(usize::from(score > 0.0));
        rows.push(vec![RawValue::Num(a), RawValue::Cat(c.into()), RawValue::Num(b)]);
    }
    RawDataset { schema, rows, labels }
}

fn mixed_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| train(&tiny_config(5), &mixed_data(240, 1)).unwrap().model)
}

#[test]
fn same_seed_gives_the_same_model() {
    let data = generate_synthetic(SyntheticKind::Blobs { classes: 3 }, 240, 1.0, 4).unwrap();
    let a = train(&tiny_config(11), &data).unwrap();
    let b = train(&tiny_config(11), &data).unwrap();
    assert_eq!(hash_model(&a.model), hash_model(&b.model));
    assert_eq!(a.log.len(), b.log.len());
    let c = train(&tiny_config(12), &data).unwrap();
    assert_ne!(hash_model(&a.model), hash_model(&c.model));
}

#[test]
fn saved_model_predicts_identically() {
    let model = mixed_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hcx");
    let manifest = save_bundle(model, &path).unwrap();
    let loaded = load_bundle(&path).unwrap();
    assert_eq!(manifest.hash, hash_model(&loaded));
    let enc = model.encode(&mixed_data(50, 9)).unwrap();
    assert_eq!(model.predict_proba(&enc.x).unwrap(), loaded.predict_proba(&enc.x).unwrap());
    let (a, b) = (model.counterfactuals(&enc.x).unwrap(), loaded.counterfactuals(&enc.x).unwrap());
    assert_eq!(a.candidates.projected, b.candidates.projected);
    assert_eq!(a.log_density, b.log_density);
}

#[test]
fn explanation_matches_batch_inference() {
    let model = mixed_model();
    let data = mixed_data(5, 3);
    let enc = model.encode(&data).unwrap();
    let probs = model.predict_proba(&enc.x).unwrap();
    for (i, row) in data.rows.iter().enumerate() {
        let e = model.explain(row).unwrap();
        assert_eq!(e.counterfactuals.predicted, probs.argmax_rows()[i]);
        assert_eq!(e.counterfactuals.entries.len(), model.num_classes() - 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counterfactuals_follow_the_weight_rule(
        a in -3.0f64..3.0,
        b in -1.0f64..11.0,
        c in 0usize..3,
    ) {
        let model = mixed_model();
        let row = vec![RawValue::Num(a), RawValue::Cat(["x", "y", "z"][c].into()), RawValue::Num(b)];
        let mut enc = vec![0.0; model.preprocessor.dim()];
        model.preprocessor.encode_row(&row, &mut enc).unwrap();
        let x = Tensor::row_vector(&enc);
        let batch = model.counterfactuals(&x).unwrap();
        let cand = &batch.candidates;
        let (d, k) = (enc.len(), model.num_classes());
        let predicted = cand.predicted[0];
        prop_assert_eq!(cand.pairs.len(), k - 1);
        let layout = model.layout();
        for (p, &(i, m)) in cand.pairs.iter().enumerate() {
            prop_assert_eq!(i, 0);
            prop_assert_ne!(m, predicted);
            let block = &cand.weights.row(0)[m * (d + 1)..(m + 1) * (d + 1)];
            for j in 0..d {
                prop_assert_eq!(cand.unprojected.get(p, j), enc[j] - block[j + 1]);
            }
            let proj = cand.projected.row(p);
            for &j in &layout.numeric {
                prop_assert_eq!(proj[j], cand.unprojected.get(p, j));
            }
            for g in &layout.groups {
                let block = &proj[g.span.clone()];
                prop_assert_eq!(block.iter().filter(|&&v| v == 1.0).count(), 1);
                prop_assert_eq!(block.iter().filter(|&&v| v == 0.0).count(), block.len() - 1);
            }
            let again = model.predict_proba(&Tensor::row_vector(proj)).unwrap().argmax_rows()[0];
            prop_assert_eq!(again, batch.cf_predicted[p]);
            prop_assert_eq!(batch.is_valid(p), again == m);
            let lp = model.flow.log_prob(&Tensor::row_vector(proj), &[m]).unwrap()[0];
            prop_assert_eq!(lp, batch.log_density[p]);
        }
    }
}
