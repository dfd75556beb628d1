mod common;

use common::rng;
use plateau_lab::checkpoint::Params;
use plateau_lab::train::{backward, backward_f64, loss_f64, FreezeMask, TrainItem};
use plateau_lab::{Checkpoint, CheckpointKind, ModelConfig, Prompt, Tensor};
use rand::Rng;

fn tiny_batch(seed: u64) -> (Checkpoint, Vec<TrainItem>) {
    let cfg = ModelConfig::tiny();
    let ckpt = Checkpoint::init_random(cfg, CheckpointKind::Mllm, seed).unwrap();
    let mut r = rng(seed + 1000);
    let v = cfg.vocab_size as u32;
    let items = (0..2)
        .map(|i| {
            let prompt = Prompt {
                prefix: vec![r.gen_range(0..v)],
                vision: Some(Tensor::randn(&[2 + i, cfg.vision_feature_dim], 1.0, &mut r)),
                instruction: (0..3).map(|_| r.gen_range(0..v)).collect(),
            };
            let n = prompt.len();
            TrainItem { prompt, targets: vec![(n - 1, r.gen_range(0..v)), (n - 3, r.gen_range(0..v))] }
        })
        .collect();
    (ckpt, items)
}

/// Relative error with a small absolute floor so that entries whose true
/// gradient is numerically zero are not judged on rounding noise.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn every_slot_matches_central_differences() {
    for seed in 0..2 {
        let (ckpt, batch) = tiny_batch(seed);
        let cfg = ckpt.config;
        let (_, grads) = backward_f64(&ckpt, &batch).unwrap();
        let base: Params<f64> = Params::from_checkpoint(&ckpt).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        let names: Vec<String> = base.named().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"projector".to_string()));
        for name in &names {
            let len = grads[name].len();
            for i in 0..len {
                let mut plus = base.clone();
                let mut minus = base.clone();
                set_entry(&mut plus, name, i, h);
                set_entry(&mut minus, name, i, -h);
                let fd = (loss_f64(&cfg, &plus, &batch).unwrap() - loss_f64(&cfg, &minus, &batch).unwrap()) / (2.0 * h);
                let g = grads[name].data()[i];
                let e = rel_err(g, fd);
                worst = worst.max(e);
                assert!(e <= 1e-4, "{name}[{i}]: analytic {g} vs numeric {fd} (rel {e:e})");
            }
        }
        assert!(worst <= 1e-4);
    }
}

fn set_entry(p: &mut Params<f64>, name: &str, i: usize, delta: f64) {
    for (n, t) in p.named_mut() {
        if n == name {
            t.data_mut()[i] += delta;
            return;
        }
    }
    panic!("no tensor {name}");
}

#[test]
fn f32_gradient_agrees_with_f64() {
    let (ckpt, batch) = tiny_batch(3);
    let (l32, g32) = backward(&ckpt, &batch, &FreezeMask::none()).unwrap();
    let (l64, g64) = backward_f64(&ckpt, &batch).unwrap();
    assert!((l32 - l64).abs() < 1e-4);
    for (name, g) in &g32 {
        for (a, b) in g.data().iter().zip(g64[name].data()) {
            assert!((*a as f64 - b).abs() < 1e-4 * (1.0 + b.abs()), "{name}");
        }
    }
}

#[test]
fn projector_only_mask() {
    let (ckpt, batch) = tiny_batch(4);
    let (_, g) = backward(&ckpt, &batch, &FreezeMask::all_but_projector(&ckpt.config)).unwrap();
    assert_eq!(g.keys().collect::<Vec<_>>(), vec!["projector"]);
}
