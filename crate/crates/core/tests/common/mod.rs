#![allow(dead_code)]

use plateau_lab::checkpoint::layer_name;
use plateau_lab::interventions::MaskSpec;
use plateau_lab::{Checkpoint, CheckpointKind, ModelConfig, Prompt, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small config with room for multimodal prompts.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        hidden_dim: 16,
        num_heads: 4,
        vocab_size: 24,
        max_seq_len: 24,
        vision_feature_dim: 6,
        ffn_dim: 32,
    }
}

pub fn random_mllm(config: ModelConfig, seed: u64) -> Checkpoint {
    Checkpoint::init_random(config, CheckpointKind::Mllm, seed).unwrap()
}

/// Random prompt with `pre`, `vis`, `ins` span lengths.
pub fn random_prompt(config: &ModelConfig, rng: &mut ChaCha8Rng, pre: usize, vis: usize, ins: usize) -> Prompt {
    let v = config.vocab_size as u32;
    Prompt {
        prefix: (0..pre).map(|_| rng.gen_range(0..v)).collect(),
        vision: (vis > 0).then(|| Tensor::randn(&[vis, config.vision_feature_dim], 1.0, rng)),
        instruction: (0..ins).map(|_| rng.gen_range(0..v)).collect(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn get(ckpt: &Checkpoint, name: &str) -> Vec<Vec<f64>> {
    let t = ckpt.tensor(name).unwrap();
    let cols = if t.shape().len() == 1 { t.shape()[0] } else { t.cols() };
    t.data().chunks(cols).map(|r| r.iter().map(|v| *v as f64).collect()).collect()
}

fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, g)| v * inv * g).collect()
}

/// Straightforward f64 forward pass written independently of the library:
/// per-position loops, explicit causal and vision masks. Returns `[N][vocab]`.
pub fn naive_forward(ckpt: &Checkpoint, prompt: &Prompt, mask: Option<MaskSpec>) -> Vec<Vec<f64>> {
    let c = ckpt.config;
    let n = prompt.len();
    let pre = prompt.prefix.len();
    let nv = prompt.num_vision();
    let tok = get(ckpt, "embed.tok");
    let pos = get(ckpt, "embed.pos");
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for p in 0..n {
        let base: Vec<f64> = if p < pre {
            tok[prompt.prefix[p] as usize].clone()
        } else if p < pre + nv {
            let proj = get(ckpt, "projector");
            let f = prompt.vision.as_ref().unwrap().row(p - pre);
            let f: Vec<f64> = f.iter().map(|v| *v as f64).collect();
            matvec(&proj, &f)
        } else {
            tok[prompt.instruction[p - pre - nv] as usize].clone()
        };
        xs.push(base.iter().zip(&pos[p]).map(|(a, b)| a + b).collect());
    }
    let dh = c.head_dim();
    for l in 1..=c.num_layers {
        let w = |s: &str| get(ckpt, &layer_name(l, s));
        let (wq, wk, wv, wo, up, down) = (w("attn.q"), w("attn.k"), w("attn.v"), w("attn.o"), w("ffn.up"), w("ffn.down"));
        let g1 = w("norm.attn")[0].clone();
        let g2 = w("norm.ffn")[0].clone();
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, &g1)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&wq, x)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&wk, x)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&wv, x)).collect();
        let banned = |j: usize| mask.is_some_and(|m| l >= m.cut_layer) && j >= pre && j < pre + nv;
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut ctx = vec![0.0; c.hidden_dim];
            for h in 0..c.num_heads {
                let r = h * dh..(h + 1) * dh;
                let allowed: Vec<usize> = (0..=i).filter(|j| !banned(*j)).collect();
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (a, &j) in e.iter().zip(&allowed) {
                    for (d, vv) in r.clone().zip(&v[j][r.clone()]) {
                        ctx[d] += a / z * vv;
                    }
                }
            }
            let attn = matvec(&wo, &ctx);
            let h: Vec<f64> = xs[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let u = matvec(&up, &rms(&h, &g2));
            let act: Vec<f64> = u.iter().map(|x| x / (1.0 + (-x).exp())).collect();
            let f = matvec(&down, &act);
            next.push(h.iter().zip(&f).map(|(a, b)| a + b).collect());
        }
        xs = next;
    }
    let un = get(ckpt, "unembed");
    xs.iter().map(|x| matvec(&un, x)).collect()
}
