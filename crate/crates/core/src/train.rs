//! Reverse-mode gradients for the decoder and the training loops that
//! produce the base LM and the fine-tuned MLLM.
//!
//! The backward pass walks the activations recorded by the shared forward
//! code in reverse. It is generic over the scalar type so the same code can
//! be checked against finite differences in `f64`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, LayerParams, Params};
use crate::ckpt_io::digest;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::layout::Prompt;
use crate::model::{embed_generic, gemm_view, logits_of, run_layers, Capture, KvCache, LayerActs, Model};
use crate::taskgen::{Example, Task};
use crate::tensor::{matmul, matmul_at, silu_grad, Scalar, Tensor};
use crate::workers::par_map;

/// One supervised sequence: the prompt plus (position, token) targets whose
/// cross-entropy is summed into the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub prompt: Prompt,
    pub targets: Vec<(usize, u32)>,
}

impl From<&Example> for TrainItem {
    fn from(e: &Example) -> Self {
        TrainItem { prompt: e.prompt.clone(), targets: vec![(e.prompt.len() - 1, e.answer)] }
    }
}

/// Names of tensors that receive no gradient.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    pub names: BTreeSet<String>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn embeddings() -> Self {
        FreezeMask { names: ["embed.tok", "embed.pos"].iter().map(|s| s.to_string()).collect() }
    }

    /// Everything except the projector.
    pub fn all_but_projector(config: &ModelConfig) -> Self {
        let names = crate::checkpoint::expected_shapes(config, true)
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n != "projector")
            .collect();
        FreezeMask { names }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.names.contains(name)
    }
}

fn rms_backward<T: Scalar>(
    x: &Tensor<T>,
    inv: &[T],
    gain: &Tensor<T>,
    dy: &Tensor<T>,
    dgain: &mut Tensor<T>,
) -> Tensor<T> {
    let d = x.cols();
    let n = T::from_usize(d).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        let (xr, dyr) = (x.row(i), dy.row(i));
        let r = inv[i];
        let mut dot = T::zero();
        for j in 0..d {
            let xhat = xr[j] * r;
            dgain.data_mut()[j] += dyr[j] * xhat;
            dot += dyr[j] * gain.data()[j] * xhat;
        }
        let mean = dot / n;
        let out = dx.row_mut(i);
        for j in 0..d {
            let xhat = xr[j] * r;
            out[j] = r * (dyr[j] * gain.data()[j] - xhat * mean);
        }
    }
    dx
}

fn layer_backward<T: Scalar>(
    cfg: &ModelConfig,
    lp: &LayerParams<T>,
    acts: &LayerActs<T>,
    dout: Tensor<T>,
    g: &mut LayerParams<T>,
) -> Result<Tensor<T>> {
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim();
    let m = dout.rows();
    if acts.mask.keys() != m {
        return Err(Error::Shape("backward requires a single full-sequence chunk".into()));
    }

    // Feed-forward half: out = h + silu(n2·upᵀ)·downᵀ.
    g.down.add_assign(&matmul_at(&dout, &acts.a)?)?;
    let mut du = matmul(&dout, &lp.down)?;
    for (v, u) in du.data_mut().iter_mut().zip(acts.u.data()) {
        *v *= silu_grad(*u);
    }
    g.up.add_assign(&matmul_at(&du, &acts.n2)?)?;
    let dn2 = matmul(&du, &lp.up)?;
    let mut dh_state = dout;
    dh_state.add_assign(&rms_backward(&acts.h, &acts.inv2, &lp.norm_ffn, &dn2, &mut g.norm_ffn))?;

    // Attention half: h = x + ctx·oᵀ.
    g.o.add_assign(&matmul_at(&dh_state, &acts.ctx)?)?;
    let dctx = matmul(&dh_state, &lp.o)?;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut dq = Tensor::<T>::zeros(&[m, d]);
    let mut dk = Tensor::<T>::zeros(&[m, d]);
    let mut dv = Tensor::<T>::zeros(&[m, d]);
    for (h, p) in acts.probs.iter().enumerate() {
        let off = h * dh;
        // dP = dctx_h · v_hᵀ
        let mut dp = Tensor::<T>::zeros(&[m, m]);
        gemm_view(m, dh, m, T::one(), dctx.data(), off, (d, 1), acts.v.data(), off, (1, d), T::zero(), dp.data_mut(), 0, (m, 1));
        // dv_h = Pᵀ · dctx_h
        gemm_view(m, m, dh, T::one(), p.data(), 0, (1, m), dctx.data(), off, (d, 1), T::zero(), dv.data_mut(), off, (d, 1));
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for i in 0..m {
            let pr = p.row(i);
            let dpr = dp.row_mut(i);
            let dot: T = pr.iter().zip(dpr.iter()).map(|(a, b)| *a * *b).sum();
            for (dpv, pv) in dpr.iter_mut().zip(pr) {
                *dpv = *pv * (*dpv - dot);
            }
        }
        // dq_h = dS · k_h · scale ; dk_h = dSᵀ · q_h · scale
        gemm_view(m, m, dh, scale, dp.data(), 0, (m, 1), acts.k.data(), off, (d, 1), T::zero(), dq.data_mut(), off, (d, 1));
        gemm_view(m, m, dh, scale, dp.data(), 0, (1, m), acts.q.data(), off, (d, 1), T::zero(), dk.data_mut(), off, (d, 1));
    }
    g.q.add_assign(&matmul_at(&dq, &acts.n1)?)?;
    g.k.add_assign(&matmul_at(&dk, &acts.n1)?)?;
    g.v.add_assign(&matmul_at(&dv, &acts.n1)?)?;
    let mut dn1 = matmul(&dq, &lp.q)?;
    dn1.add_assign(&matmul(&dk, &lp.k)?)?;
    dn1.add_assign(&matmul(&dv, &lp.v)?)?;
    let mut dx = dh_state;
    dx.add_assign(&rms_backward(&acts.x_in, &acts.inv1, &lp.norm_attn, &dn1, &mut g.norm_attn))?;
    Ok(dx)
}

/// Summed cross-entropy over `item.targets`.
pub(crate) fn item_loss<T: Scalar>(cfg: &ModelConfig, params: &Params<T>, item: &TrainItem) -> Result<f64> {
    let (x0, layout) = embed_generic(cfg, params, &item.prompt, &[])?;
    let pos: Vec<usize> = (0..x0.rows()).collect();
    let mut cache = KvCache::new(cfg.num_layers);
    let out = run_layers(cfg, params, x0, &pos, &mut cache, &layout, None, 1..cfg.num_layers + 1, Capture::NONE, None)?;
    let logits = logits_of(params, &out.x)?;
    let mut loss = 0.0;
    for &(p, t) in &item.targets {
        loss += cross_entropy(logits.row(p), t as usize).0;
    }
    Ok(loss)
}

/// Loss and its gradient with respect to the logits row.
fn cross_entropy<T: Scalar>(row: &[T], target: usize) -> (f64, Vec<T>) {
    let max = row.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
    let exps: Vec<T> = row.iter().map(|v| (*v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let logp = row[target] - max - sum.ln();
    let mut grad: Vec<T> = exps.iter().map(|e| *e / sum).collect();
    grad[target] = grad[target] - T::one();
    (-logp.to_f64().unwrap(), grad)
}

/// Loss and full gradient for one item.
pub(crate) fn item_grad<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    item: &TrainItem,
) -> Result<(f64, Params<T>)> {
    let mut grads = params.zeros_like();
    if item.targets.is_empty() {
        return Ok((0.0, grads));
    }
    let (x0, layout) = embed_generic(cfg, params, &item.prompt, &[])?;
    let n = x0.rows();
    let pos: Vec<usize> = (0..n).collect();
    let mut cache = KvCache::new(cfg.num_layers);
    let mut acts = Vec::with_capacity(cfg.num_layers);
    let out = run_layers(
        cfg,
        params,
        x0,
        &pos,
        &mut cache,
        &layout,
        None,
        1..cfg.num_layers + 1,
        Capture::NONE,
        Some(&mut acts),
    )?;
    let logits = logits_of(params, &out.x)?;
    let mut dlogits = Tensor::<T>::zeros(logits.shape());
    let mut loss = 0.0;
    for &(p, t) in &item.targets {
        if p >= n || t as usize >= cfg.vocab_size {
            return Err(Error::Shape(format!("target ({p}, {t}) outside sequence/vocab")));
        }
        let (l, g) = cross_entropy(logits.row(p), t as usize);
        loss += l;
        for (a, b) in dlogits.row_mut(p).iter_mut().zip(g) {
            *a += b;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }

    grads.unembed.add_assign(&matmul_at(&dlogits, &out.x)?)?;
    let mut dx = matmul(&dlogits, &params.unembed)?;
    for l in (0..cfg.num_layers).rev() {
        dx = layer_backward(cfg, &params.layers[l], &acts[l], dx, &mut grads.layers[l])?;
    }

    // Embedding rows.
    let tokens = item.prompt.tokens_by_position();
    for p in 0..n {
        let row = dx.row(p);
        for (g, v) in grads.pos.row_mut(p).iter_mut().zip(row) {
            *g += *v;
        }
        if let Some(t) = tokens[p] {
            for (g, v) in grads.tok.row_mut(t as usize).iter_mut().zip(row) {
                *g += *v;
            }
        }
    }
    if let (Some(vis), Some(gp)) = (&item.prompt.vision, grads.projector.as_mut()) {
        if vis.rows() > 0 {
            let idx: Vec<usize> = layout.vis_span.clone().collect();
            let dvis = dx.select_rows(&idx);
            gp.add_assign(&matmul_at(&dvis, &vis.cast::<T>())?)?;
        }
    }
    Ok((loss, grads))
}

/// Summed loss and gradient over a batch; the reduction runs in item order.
pub(crate) fn batch_grad<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    batch: &[TrainItem],
    workers: usize,
) -> Result<(f64, Params<T>)> {
    let per_item = par_map(workers, batch, |item| item_grad(cfg, params, item));
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for r in per_item {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g)?;
    }
    Ok((loss, total))
}

/// Gradient of the summed cross-entropy over `batch`. Frozen tensors are
/// omitted from the returned map.
pub fn backward(
    ckpt: &Checkpoint,
    batch: &[TrainItem],
    freeze: &FreezeMask,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let params: Params<f32> = Params::from_checkpoint(ckpt)?;
    let (loss, grads) = batch_grad(&ckpt.config, &params, batch, 1)?;
    let map = grads
        .to_f32_map()
        .into_iter()
        .filter(|(n, _)| !freeze.is_frozen(n))
        .collect();
    Ok((loss, map))
}

/// Same as [`backward`] but computed entirely in `f64`.
pub fn backward_f64(
    ckpt: &Checkpoint,
    batch: &[TrainItem],
) -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
    let params: Params<f64> = Params::from_checkpoint(ckpt)?;
    let (loss, grads) = batch_grad(&ckpt.config, &params, batch, 1)?;
    Ok((loss, grads.named().into_iter().map(|(n, t)| (n, t.clone())).collect()))
}

/// Loss of `batch` under `params` evaluated in `f64`.
pub fn loss_f64(config: &ModelConfig, params: &Params<f64>, batch: &[TrainItem]) -> Result<f64> {
    batch.iter().map(|i| item_loss(config, params, i)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Fraction of `lr` reached at the end of the cosine schedule.
    pub final_lr_frac: f64,
    pub eval_every: usize,
    /// Validation examples scored at each log point.
    pub eval_examples: usize,
    pub seed: u64,
    pub workers: usize,
    /// Standard deviation of the freshly initialized projector (fine-tuning only).
    pub projector_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            final_lr_frac: 0.0,
            eval_every: 100,
            eval_examples: 128,
            seed: 0,
            workers: 1,
            projector_std: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

struct Adam {
    m: Params<f32>,
    v: Params<f32>,
    t: i32,
}

impl Adam {
    fn new(params: &Params<f32>) -> Self {
        Adam { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f64, cfg: &TrainConfig, freeze: &FreezeMask) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        let eps = cfg.adam_eps as f32;
        let triples = params
            .named_mut()
            .into_iter()
            .zip(grads.named())
            .zip(self.m.named_mut().into_iter().zip(self.v.named_mut()));
        for (((name, p), (_, g)), ((_, m), (_, v))) in triples {
            if freeze.is_frozen(&name) {
                continue;
            }
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,split,loss,accuracy\n");
    for r in rows {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.split, r.loss, acc));
    }
    out
}

/// Runs the optimizer over `task.train`, starting from `init`.
pub fn train_on_task(
    init: Checkpoint,
    task: &Task,
    cfg: &TrainConfig,
    freeze: &FreezeMask,
    log: &mut Vec<LogRow>,
) -> Result<Checkpoint> {
    task.check_compatible(&init.config)?;
    if task.train.is_empty() {
        return Err(Error::Task("empty training split".into()));
    }
    let config = init.config;
    let mut params: Params<f32> = Params::from_checkpoint(&init)?;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut running = 0.0;
    let mut running_n = 0usize;
    let to_ckpt = |params: &Params<f32>| Checkpoint {
        config,
        kind: init.kind,
        tensors: params.to_f32_map(),
        meta: init.meta.clone(),
    };
    let mut last_good = to_ckpt(&params);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(TrainItem::from(&task.train[order[cursor]]));
            cursor += 1;
        }
        let n_targets: usize = batch.iter().map(|b| b.targets.len()).sum();
        let result = batch_grad(&config, &params, &batch, cfg.workers);
        let (loss, mut grads) = match result {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged { step, last_good: Box::new(last_good) })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, last_good: Box::new(last_good) });
        }
        let inv = 1.0 / n_targets.max(1) as f32;
        let mut norm_sq = 0.0;
        for (name, g) in grads.named_mut() {
            if freeze.is_frozen(&name) {
                g.scale(0.0);
                continue;
            }
            g.scale(inv);
            norm_sq += g.sum_sq();
        }
        let norm = norm_sq.sqrt();
        if norm > cfg.clip_norm {
            let s = (cfg.clip_norm / norm) as f32;
            for (_, g) in grads.named_mut() {
                g.scale(s);
            }
        }
        adam.step(&mut params, &grads, cfg.lr_at(step), cfg, freeze);
        if params.named().iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged { step, last_good: Box::new(last_good) });
        }
        running += loss / n_targets.max(1) as f64;
        running_n += 1;

        let last = step + 1 == cfg.steps;
        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || last {
            last_good = to_ckpt(&params);
            log.push(LogRow { step: step + 1, split: "train".into(), loss: running / running_n as f64, accuracy: None });
            running = 0.0;
            running_n = 0;
            if !task.val.is_empty() && cfg.eval_examples > 0 {
                let model = Model::new(&last_good)?;
                let n = cfg.eval_examples.min(task.val.len());
                let val = &task.val[..n];
                let items: Vec<TrainItem> = val.iter().map(TrainItem::from).collect();
                let val_loss: f64 = par_map(cfg.workers, &items, |i| item_loss(&config, &params, i))
                    .into_iter()
                    .sum::<Result<f64>>()?
                    / n as f64;
                let acc = accuracy(&model, val, &task.answer_vocab, None, cfg.workers)?;
                log.push(LogRow { step: step + 1, split: "val".into(), loss: val_loss, accuracy: Some(acc) });
            }
        }
    }
    Ok(to_ckpt(&params))
}

pub fn train_base_lm(
    config: ModelConfig,
    text_task: &Task,
    cfg: &TrainConfig,
    log: &mut Vec<LogRow>,
) -> Result<Checkpoint> {
    let init = Checkpoint::init_random(config, CheckpointKind::BaseLm, cfg.seed)?;
    train_on_task(init, text_task, cfg, &FreezeMask::none(), log)
}

/// Adds a freshly initialized projector to `base` and fine-tunes on the
/// grounded task only.
pub fn finetune_mllm(
    base: &Checkpoint,
    grounded: &Task,
    cfg: &TrainConfig,
    freeze: &FreezeMask,
    log: &mut Vec<LogRow>,
) -> Result<Checkpoint> {
    if base.kind != CheckpointKind::BaseLm {
        return Err(Error::Checkpoint(format!("fine-tuning expects a base_lm checkpoint, got {}", base.kind)));
    }
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let c = base.config;
    let mut mllm = base.clone();
    mllm.kind = CheckpointKind::Mllm;
    mllm.tensors.insert(
        "projector".into(),
        Tensor::randn(&[c.hidden_dim, c.vision_feature_dim], cfg.projector_std, &mut rng),
    );
    mllm.meta.insert("base_digest".into(), digest(base)?);
    train_on_task(mllm, grounded, cfg, freeze, log)
}
