mod common;

use common::*;
use plateau_lab::interventions::{prune_equivalent_forward, verify_prune_equivalence, MaskSpec};
use plateau_lab::model::embed_multimodal;
use plateau_lab::{Capture, Checkpoint, CheckpointKind, Error, Model, ModelConfig, Prompt, SequenceLayout, Tensor};

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

#[test]
fn forward_matches_naive_reference() {
    let cfg = small_config();
    for seed in 0..6 {
        let ckpt = random_mllm(cfg, seed);
        let model = Model::new(&ckpt).unwrap();
        let mut r = rng(seed + 50);
        let prompt = random_prompt(&cfg, &mut r, 2, 5, 4);
        for mask in [None, Some(MaskSpec::new(1)), Some(MaskSpec::new(3))] {
            let got = model.forward_prompt(&prompt, mask, Capture::NONE).unwrap();
            let want = naive_forward(&ckpt, &prompt, mask);
            for p in 0..prompt.len() {
                assert!(max_diff(got.logits.row(p), &want[p]) < 1e-4, "seed {seed} pos {p} mask {mask:?}");
            }
        }
    }
}

#[test]
fn hand_computed_two_position_example() {
    // d = 2, one head, second layer inert (zero output projections). With
    // identity Q/K/V/O and zero FFN, position 1 attends to both positions.
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_dim: 2,
        num_heads: 1,
        vocab_size: 2,
        max_seq_len: 2,
        vision_feature_dim: 1,
        ffn_dim: 1,
    };
    let mut ckpt = Checkpoint::init_random(cfg, CheckpointKind::BaseLm, 0).unwrap();
    let set = |c: &mut Checkpoint, name: &str, data: Vec<f32>| {
        let shape = c.tensor(name).unwrap().shape().to_vec();
        *c.tensor_mut(name).unwrap() = Tensor::new(shape, data).unwrap();
    };
    set(&mut ckpt, "embed.tok", vec![1.0, 0.0, 0.0, 1.0]);
    set(&mut ckpt, "embed.pos", vec![0.0; 4]);
    set(&mut ckpt, "unembed", vec![1.0, 0.0, 0.0, 1.0]);
    for l in 1..=2 {
        for s in ["attn.q", "attn.k", "attn.v"] {
            set(&mut ckpt, &format!("layers.{l}.{s}"), vec![1.0, 0.0, 0.0, 1.0]);
        }
        let o = if l == 1 { vec![1.0, 0.0, 0.0, 1.0] } else { vec![0.0; 4] };
        set(&mut ckpt, &format!("layers.{l}.attn.o"), o);
        set(&mut ckpt, &format!("layers.{l}.ffn.up"), vec![0.0; 2]);
        set(&mut ckpt, &format!("layers.{l}.ffn.down"), vec![0.0; 2]);
    }
    let prompt = Prompt::text(vec![0, 1], vec![]);
    let out = Model::new(&ckpt).unwrap().forward_prompt(&prompt, None, Capture::NONE).unwrap();
    // rms of a unit basis vector in d = 2 is 1/sqrt(2), so normed = sqrt(2)·e.
    let n = (1.0f64 / (0.5 + 1e-6)).sqrt();
    // Position 0: attends only to itself; x = e0 + n·e0.
    let p0 = [1.0 + n, 0.0];
    // Position 1: q = n·e1, scores n²·<e1, e0>/√2 = 0 and n²/√2 for itself.
    let s = n * n / 2f64.sqrt();
    let (a0, a1) = (1.0 / (1.0 + s.exp()), s.exp() / (1.0 + s.exp()));
    let p1 = [a0 * n, 1.0 + a1 * n];
    assert!(max_diff(out.logits.row(0), &p0) < 1e-5);
    assert!(max_diff(out.logits.row(1), &p1) < 1e-5);
}

#[test]
fn causal_rows_ignore_future_tokens() {
    let cfg = small_config();
    let ckpt = random_mllm(cfg, 3);
    let model = Model::new(&ckpt).unwrap();
    let mut r = rng(9);
    let a = random_prompt(&cfg, &mut r, 2, 3, 5);
    let mut b = a.clone();
    let last = b.instruction.len() - 1;
    b.instruction[last] = (b.instruction[last] + 1) % cfg.vocab_size as u32;
    let ta = model.forward_prompt(&a, None, Capture::NONE).unwrap();
    let tb = model.forward_prompt(&b, None, Capture::NONE).unwrap();
    for p in 0..a.len() - 1 {
        assert_eq!(ta.logits.row(p), tb.logits.row(p));
    }
    assert_ne!(ta.last_logits(), tb.last_logits());
}

#[test]
fn no_op_mask_is_bitwise_unmasked() {
    let cfg = small_config();
    let ckpt = random_mllm(cfg, 4);
    let model = Model::new(&ckpt).unwrap();
    let prompt = random_prompt(&cfg, &mut rng(1), 1, 4, 3);
    let plain = model.forward_prompt(&prompt, None, Capture::ALL).unwrap();
    let noop = model.forward_prompt(&prompt, Some(MaskSpec::none(cfg.num_layers)), Capture::ALL).unwrap();
    assert_eq!(plain, noop);
}

#[test]
fn cached_decode_matches_recompute() {
    let cfg = small_config();
    for seed in 0..4 {
        let ckpt = random_mllm(cfg, seed);
        let model = Model::new(&ckpt).unwrap();
        let prompt = random_prompt(&cfg, &mut rng(seed), 1, 4, 3);
        for mask in [None, Some(MaskSpec::new(2))] {
            let cached = model.decode_greedy(&prompt, mask, 6, Capture::NONE).unwrap();
            let recomputed = model.decode_recompute(&prompt, mask, 6).unwrap();
            assert_eq!(cached.tokens, recomputed);
        }
    }
}

#[test]
fn forced_argmax_decode() {
    // Zeroing the unembedding except one row makes that token the argmax.
    let cfg = small_config();
    let mut ckpt = random_mllm(cfg, 5);
    let d = cfg.hidden_dim;
    let mut un = Tensor::zeros(&[cfg.vocab_size, d]);
    un.row_mut(7).copy_from_slice(&vec![1e-3; d]);
    *ckpt.tensor_mut("unembed").unwrap() = un;
    // Make the final hidden state's coordinate sum positive via a large position bias.
    let pos = ckpt.tensor_mut("embed.pos").unwrap();
    pos.data_mut().iter_mut().for_each(|v| *v = 50.0);
    let prompt = random_prompt(&cfg, &mut rng(2), 1, 2, 2);
    let out = Model::new(&ckpt).unwrap().decode_greedy(&prompt, None, 4, Capture::NONE).unwrap();
    assert_eq!(out.tokens, vec![7, 7, 7, 7]);
}

#[test]
fn decode_context_overflow_is_an_error() {
    let cfg = small_config();
    let model = Model::new(&random_mllm(cfg, 0)).unwrap();
    let prompt = random_prompt(&cfg, &mut rng(0), 2, 10, 10);
    let err = model.decode_greedy(&prompt, None, 3, Capture::NONE).unwrap_err();
    assert!(matches!(err, Error::ContextOverflow { len: 25, max: 24 }));
}

#[test]
fn identity_projector_embeds_features() {
    let cfg = ModelConfig { vision_feature_dim: 16, ..small_config() };
    let mut ckpt = random_mllm(cfg, 8);
    *ckpt.tensor_mut("projector").unwrap() = Tensor::identity(16);
    let mut f = Tensor::zeros(&[1, 16]);
    f.row_mut(0)[0] = 1.0;
    let prompt = Prompt { prefix: vec![3], vision: Some(f), instruction: vec![4] };
    let (x, layout) = embed_multimodal(&ckpt, &prompt).unwrap();
    assert_eq!(layout, SequenceLayout::new(1, 1, 1));
    let pos = ckpt.tensor("embed.pos").unwrap();
    for j in 0..16 {
        let want = pos.at(1, j) + if j == 0 { 1.0 } else { 0.0 };
        assert_eq!(x.at(1, j), want);
    }
    let tok = ckpt.tensor("embed.tok").unwrap();
    assert_eq!(x.at(0, 5), tok.at(3, 5) + pos.at(0, 5));
}

#[test]
fn base_lm_rejects_vision_input() {
    let ckpt = Checkpoint::init_random(small_config(), CheckpointKind::BaseLm, 0).unwrap();
    let prompt = random_prompt(&small_config(), &mut rng(0), 1, 2, 1);
    assert!(embed_multimodal(&ckpt, &prompt).is_err());
    let text = random_prompt(&small_config(), &mut rng(0), 1, 0, 2);
    assert!(embed_multimodal(&ckpt, &text).is_ok());
}

#[test]
fn cut_layer_out_of_range() {
    let cfg = small_config();
    let model = Model::new(&random_mllm(cfg, 0)).unwrap();
    let prompt = random_prompt(&cfg, &mut rng(0), 1, 2, 1);
    assert!(matches!(
        model.forward_prompt(&prompt, Some(MaskSpec::new(0)), Capture::NONE),
        Err(Error::CutLayer { .. })
    ));
    assert!(matches!(
        model.forward_prompt(&prompt, Some(MaskSpec::new(cfg.num_layers + 2)), Capture::NONE),
        Err(Error::CutLayer { .. })
    ));
}

#[test]
fn vision_only_prompt_fully_masked_row_errors() {
    // A prompt made entirely of vision tokens has no permitted key once masked.
    let cfg = small_config();
    let model = Model::new(&random_mllm(cfg, 0)).unwrap();
    let prompt = random_prompt(&cfg, &mut rng(0), 0, 3, 0);
    assert!(matches!(
        model.forward_prompt(&prompt, Some(MaskSpec::new(1)), Capture::NONE),
        Err(Error::FullyBannedRow { .. })
    ));
}

#[test]
fn pruned_forward_matches_masked_forward() {
    let cfg = small_config();
    for seed in 0..5 {
        let model = Model::new(&random_mllm(cfg, seed)).unwrap();
        let prompt = random_prompt(&cfg, &mut rng(seed + 7), 2, 6, 3);
        for k in 1..=cfg.num_layers {
            let d = verify_prune_equivalence(&model, &prompt, MaskSpec::new(k), 1e-5).unwrap();
            assert!(d < 1e-5);
        }
        assert!(prune_equivalent_forward(&model, &prompt, MaskSpec::none(cfg.num_layers)).is_err());
    }
}

#[test]
fn attention_capture_shapes() {
    let cfg = small_config();
    let model = Model::new(&random_mllm(cfg, 1)).unwrap();
    let prompt = random_prompt(&cfg, &mut rng(1), 1, 3, 2);
    let t = model.forward_prompt(&prompt, None, Capture::ALL).unwrap();
    let attn = t.attention.unwrap();
    assert_eq!(attn.len(), cfg.num_layers);
    assert_eq!(attn[0].shape(), &[cfg.num_heads, 6, 6]);
    assert_eq!(t.hidden_norms.unwrap()[0].len(), 6);
}
