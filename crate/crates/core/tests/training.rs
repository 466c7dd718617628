//! Short training runs: determinism, extraction accounting and the loop's
//! bookkeeping.

use dalg_core::data::{generate_synthetic, SyntheticSpec};
use dalg_core::retrieval::extract;
use dalg_core::train::{train, TrainConfig};
use dalg_core::{DalgModel, ModelConfig, Tensor};

fn few_steps(steps: usize) -> TrainConfig {
    TrainConfig {
        max_steps: Some(steps),
        batch_size: 4,
        ..TrainConfig::toy()
    }
}

fn small_set() -> (Vec<Tensor>, Vec<usize>) {
    let spec = SyntheticSpec {
        images_per_class: 2,
        ..SyntheticSpec::default()
    };
    let set = generate_synthetic(&spec).unwrap();
    (set.iter().map(|s| s.image.clone()).collect(), set.iter().map(|s| s.label).collect())
}

fn bits(model: &DalgModel) -> Vec<u64> {
    model.store.iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn training_is_bit_reproducible() {
    let (images, labels) = small_set();
    let cfg = few_steps(3);
    let run = || {
        let mut m = DalgModel::new(&ModelConfig::toy(), 11).unwrap();
        let log = train(&mut m, &images, &labels, &cfg, &mut ()).unwrap();
        (bits(&m), log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.steps.len(), 3);
    let fresh = DalgModel::new(&ModelConfig::toy(), 11).unwrap();
    assert_ne!(bits(&fresh), a);
    // warmup starts from zero
    assert_eq!(log_a.steps[0].lr, 0.0);
    assert!(log_a.steps[1].lr > 0.0);
}

#[test]
fn extraction_runs_one_forward_per_image() {
    let (images, _) = small_set();
    let model = DalgModel::new(&ModelConfig::toy(), 12).unwrap();
    for batch in [1, 3, 16] {
        let before = model.forward_count();
        let d = extract(&model, &images[..7], batch).unwrap();
        assert_eq!(model.forward_count() - before, 7);
        assert_eq!(d.shape(), &[7, 128]);
        for row in d.data().chunks(128) {
            assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn batched_and_single_extraction_agree() {
    let (images, _) = small_set();
    let model = DalgModel::new(&ModelConfig::toy(), 13).unwrap();
    let one = extract(&model, &images[..4], 1).unwrap();
    let all = extract(&model, &images[..4], 4).unwrap();
    assert!(one.max_abs_diff(&all).unwrap() < 1e-12);
}
