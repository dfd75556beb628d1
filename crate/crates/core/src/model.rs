//! Multimodal decoder-only transformer.
//!
//! Pre-norm residual blocks (RMS norm, multi-head causal self-attention,
//! SiLU feed-forward), learned absolute position embeddings, and a linear
//! projector that maps pre-extracted vision features into the embedding
//! space. Linear weights are stored `[out, in]` and applied as `x · Wᵀ`.
//!
//! Every entry point goes through [`layer_forward`], which processes a chunk
//! of new rows against a per-layer key/value cache. A full forward is one
//! chunk against an empty cache; decoding feeds one row at a time.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, LayerParams, Params};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::interventions::MaskSpec;
use crate::layout::{Prompt, SequenceLayout};
use crate::tensor::{
    argmax, matmul_bt, rms_norm_with_inv, silu, softmax_row_masked, AttnMask, Scalar, Tensor,
    DEFAULT_EPS,
};

/// What to record during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    pub attention: bool,
    pub hidden_norms: bool,
}

impl Capture {
    pub const NONE: Capture = Capture { attention: false, hidden_norms: false };
    pub const ATTENTION: Capture = Capture { attention: true, hidden_norms: false };
    pub const ALL: Capture = Capture { attention: true, hidden_norms: true };

    fn any(self) -> bool {
        self.attention || self.hidden_norms
    }
}

/// Output of one forward chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    /// Absolute positions of the query rows.
    pub positions: Vec<usize>,
    /// `[rows, vocab]`.
    pub logits: Tensor,
    /// Per layer, post-softmax weights shaped `[heads, rows, keys]`.
    pub attention: Option<Vec<Tensor>>,
    /// Per layer, absolute positions of the attended keys.
    pub key_positions: Option<Vec<Vec<usize>>>,
    /// Per layer, L2 norm of each row's output hidden state.
    pub hidden_norms: Option<Vec<Vec<f32>>>,
}

impl ForwardTrace {
    /// Logits of the row at absolute position `pos`.
    pub fn logits_at(&self, pos: usize) -> Option<&[f32]> {
        self.positions.iter().position(|p| *p == pos).map(|i| self.logits.row(i))
    }

    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerKv<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub pos: Vec<usize>,
}

impl<T> Default for LayerKv<T> {
    fn default() -> Self {
        LayerKv { k: Vec::new(), v: Vec::new(), pos: Vec::new() }
    }
}

/// Per-layer key/value cache for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache<T = f32> {
    pub(crate) layers: Vec<LayerKv<T>>,
}

impl<T> KvCache<T> {
    pub fn new(num_layers: usize) -> Self {
        KvCache { layers: (0..num_layers).map(|_| LayerKv::default()).collect() }
    }

    /// Number of cached positions at the first layer.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.pos.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Intermediate values of one layer, kept for backprop.
#[derive(Clone, Debug)]
pub(crate) struct LayerActs<T> {
    pub x_in: Tensor<T>,
    pub n1: Tensor<T>,
    pub inv1: Vec<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// One `[rows, keys]` matrix per head.
    pub probs: Vec<Tensor<T>>,
    pub ctx: Tensor<T>,
    pub h: Tensor<T>,
    pub n2: Tensor<T>,
    pub inv2: Vec<T>,
    pub u: Tensor<T>,
    pub a: Tensor<T>,
    pub mask: AttnMask,
}

/// `c[c_off..] (m×n) = alpha · a(m×k) · b(k×n) + beta · c` over strided
/// sub-views of flat buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_off: usize,
    (rsa, csa): (usize, usize),
    b: &[T],
    b_off: usize,
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    c_off: usize,
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |off: usize, r: usize, c: usize, rs: usize, cs: usize| off + (r - 1) * rs + (c - 1) * cs;
    if k > 0 {
        assert!(last(a_off, m, k, rsa, csa) < a.len(), "gemm_view: a out of bounds");
        assert!(last(b_off, k, n, rsb, csb) < b.len(), "gemm_view: b out of bounds");
    }
    assert!(last(c_off, m, n, rsc, csc) < c.len(), "gemm_view: c out of bounds");
    // SAFETY: bounds asserted above; `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

fn row_norms<T: Scalar>(x: &Tensor<T>) -> Vec<f32> {
    (0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt() as f32)
        .collect()
}

/// Runs one transformer block over the rows `x` (positions `q_pos`), appending
/// their keys/values to `kv` first. Keys whose position satisfies `ban_key`
/// are excluded from attention. Returns head-resolved weights when
/// `capture_attn` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_forward<T: Scalar>(
    cfg: &ModelConfig,
    lp: &LayerParams<T>,
    x: &mut Tensor<T>,
    q_pos: &[usize],
    kv: &mut LayerKv<T>,
    ban_key: &dyn Fn(usize) -> bool,
    capture_attn: bool,
    acts: Option<&mut Vec<LayerActs<T>>>,
) -> Result<Option<Tensor<T>>> {
    let d = cfg.hidden_dim;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let m = x.rows();

    let (n1, inv1) = rms_norm_with_inv(x, &lp.norm_attn, DEFAULT_EPS)?;
    let q = matmul_bt(&n1, &lp.q)?;
    let k_new = matmul_bt(&n1, &lp.k)?;
    let v_new = matmul_bt(&n1, &lp.v)?;
    kv.k.extend_from_slice(k_new.data());
    kv.v.extend_from_slice(v_new.data());
    kv.pos.extend_from_slice(q_pos);
    let nk = kv.pos.len();

    let mask = AttnMask::from_positions(q_pos, &kv.pos, ban_key);
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut ctx = Tensor::<T>::zeros(&[m, d]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut scores = Tensor::<T>::zeros(&[m, nk]);
        gemm_view(
            m,
            dh,
            nk,
            scale,
            q.data(),
            h * dh,
            (d, 1),
            &kv.k,
            h * dh,
            (1, d),
            T::zero(),
            scores.data_mut(),
            0,
            (nk, 1),
        );
        for i in 0..m {
            if !softmax_row_masked(scores.row_mut(i), mask.row(i)) {
                return Err(Error::FullyBannedRow { row: i });
            }
        }
        gemm_view(
            m,
            nk,
            dh,
            T::one(),
            scores.data(),
            0,
            (nk, 1),
            &kv.v,
            h * dh,
            (d, 1),
            T::zero(),
            ctx.data_mut(),
            h * dh,
            (d, 1),
        );
        probs.push(scores);
    }

    let attn_out = matmul_bt(&ctx, &lp.o)?;
    let x_in = if acts.is_some() { Some(x.clone()) } else { None };
    x.add_assign(&attn_out)?;
    let h_state = if acts.is_some() { Some(x.clone()) } else { None };

    let (n2, inv2) = rms_norm_with_inv(x, &lp.norm_ffn, DEFAULT_EPS)?;
    let u = matmul_bt(&n2, &lp.up)?;
    let mut a = u.clone();
    a.map_inplace(silu);
    let f = matmul_bt(&a, &lp.down)?;
    x.add_assign(&f)?;

    let captured = if capture_attn {
        let mut data = Vec::with_capacity(heads * m * nk);
        for p in &probs {
            data.extend_from_slice(p.data());
        }
        Some(Tensor::new(vec![heads, m, nk], data)?)
    } else {
        None
    };

    if let Some(acts) = acts {
        acts.push(LayerActs {
            x_in: x_in.unwrap(),
            n1,
            inv1,
            q,
            k: k_new,
            v: v_new,
            probs,
            ctx,
            h: h_state.unwrap(),
            n2,
            inv2,
            u,
            a,
            mask,
        });
    }
    Ok(captured)
}

/// Embeds a prompt (plus optional response tokens appended after it).
pub(crate) fn embed_generic<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    prompt: &Prompt,
    response: &[u32],
) -> Result<(Tensor<T>, SequenceLayout)> {
    let layout = prompt.layout();
    let n = prompt.len() + response.len();
    if n > cfg.max_seq_len {
        return Err(Error::ContextOverflow { len: n, max: cfg.max_seq_len });
    }
    if n == 0 {
        return Err(Error::Shape("empty prompt".into()));
    }
    let d = cfg.hidden_dim;
    let mut x = Tensor::<T>::zeros(&[n, d]);
    if let Some(vis) = &prompt.vision {
        if vis.rows() > 0 {
            let proj = params
                .projector
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("vision input requires a projector".into()))?;
            if vis.cols() != cfg.vision_feature_dim || vis.shape().len() != 2 {
                return Err(Error::Shape(format!(
                    "vision features {:?}, expected [n, {}]",
                    vis.shape(),
                    cfg.vision_feature_dim
                )));
            }
            let projected = matmul_bt(&vis.cast::<T>(), proj)?;
            for (i, p) in layout.vis_span.clone().enumerate() {
                x.row_mut(p).copy_from_slice(projected.row(i));
            }
        }
    }
    let tokens = prompt
        .tokens_by_position()
        .into_iter()
        .chain(response.iter().map(|t| Some(*t)));
    for (p, tok) in tokens.enumerate() {
        if let Some(t) = tok {
            let t = t as usize;
            if t >= cfg.vocab_size {
                return Err(Error::Shape(format!("token {t} >= vocab {}", cfg.vocab_size)));
            }
            x.row_mut(p).copy_from_slice(params.tok.row(t));
        }
    }
    for p in 0..n {
        let pos_row = params.pos.row(p);
        for (v, e) in x.row_mut(p).iter_mut().zip(pos_row) {
            *v += *e;
        }
    }
    Ok((x, layout))
}

/// Output of [`run_layers`].
pub(crate) struct LayersOut<T> {
    pub x: Tensor<T>,
    pub attention: Option<Vec<Tensor<T>>>,
    pub key_positions: Option<Vec<Vec<usize>>>,
    pub hidden_norms: Option<Vec<Vec<f32>>>,
}

/// Runs layers `layers` (1-based, half-open) over rows `x` at positions
/// `q_pos`, applying the vision mask of `mask`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_layers<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    mut x: Tensor<T>,
    q_pos: &[usize],
    cache: &mut KvCache<T>,
    layout: &SequenceLayout,
    mask: Option<MaskSpec>,
    layers: Range<usize>,
    capture: Capture,
    mut acts: Option<&mut Vec<LayerActs<T>>>,
) -> Result<LayersOut<T>> {
    let mut attention = capture.attention.then(Vec::new);
    let mut key_positions = capture.attention.then(Vec::new);
    let mut hidden_norms = capture.hidden_norms.then(Vec::new);
    for l in layers {
        let banned = |p: usize| mask.is_some_and(|m| m.bans(l)) && layout.is_vision(p);
        let kv = &mut cache.layers[l - 1];
        let w = layer_forward(
            cfg,
            &params.layers[l - 1],
            &mut x,
            q_pos,
            kv,
            &banned,
            capture.attention,
            acts.as_deref_mut(),
        )?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("hidden state after layer {l}")));
        }
        if let (Some(all), Some(w)) = (attention.as_mut(), w) {
            all.push(w);
        }
        if let Some(kp) = key_positions.as_mut() {
            kp.push(kv.pos.clone());
        }
        if let Some(hn) = hidden_norms.as_mut() {
            hn.push(row_norms(&x));
        }
    }
    Ok(LayersOut { x, attention, key_positions, hidden_norms })
}

pub(crate) fn logits_of<T: Scalar>(params: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let logits = matmul_bt(x, &params.unembed)?;
    logits.ensure_finite("logits")?;
    Ok(logits)
}

/// Validates a mask spec against the layer count.
pub(crate) fn check_mask(cfg: &ModelConfig, mask: Option<MaskSpec>) -> Result<()> {
    if let Some(m) = mask {
        m.validate(cfg.num_layers)?;
    }
    Ok(())
}

/// Greedy decoding result.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub prefill: ForwardTrace,
    /// When capturing: one trace per generated token, recorded while that
    /// token is fed back (the query is the generated token's position).
    pub steps: Vec<ForwardTrace>,
}

/// An f32 model prepared from a checkpoint.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    kind: CheckpointKind,
    params: Params<f32>,
}

impl Model {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Model { config: ckpt.config, kind: ckpt.kind, params: Params::from_checkpoint(ckpt)? })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> CheckpointKind {
        self.kind
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn embed(&self, prompt: &Prompt) -> Result<(Tensor, SequenceLayout)> {
        embed_generic(&self.config, &self.params, prompt, &[])
    }

    pub fn embed_with_response(
        &self,
        prompt: &Prompt,
        response: &[u32],
    ) -> Result<(Tensor, SequenceLayout)> {
        embed_generic(&self.config, &self.params, prompt, response)
    }

    /// Full causal forward over `x0` (rows at positions `0..N`).
    pub fn forward(
        &self,
        x0: &Tensor,
        layout: &SequenceLayout,
        mask: Option<MaskSpec>,
        capture: Capture,
    ) -> Result<ForwardTrace> {
        if x0.shape().len() != 2 || x0.cols() != self.config.hidden_dim {
            return Err(Error::Shape(format!(
                "x0 {:?}, expected [N, {}]",
                x0.shape(),
                self.config.hidden_dim
            )));
        }
        if x0.rows() > self.config.max_seq_len {
            return Err(Error::ContextOverflow { len: x0.rows(), max: self.config.max_seq_len });
        }
        layout.validate()?;
        let mut cache = KvCache::new(self.config.num_layers);
        let positions: Vec<usize> = (0..x0.rows()).collect();
        self.step(x0.clone(), &positions, &mut cache, layout, mask, capture)
    }

    pub fn forward_prompt(
        &self,
        prompt: &Prompt,
        mask: Option<MaskSpec>,
        capture: Capture,
    ) -> Result<ForwardTrace> {
        let (x0, layout) = self.embed(prompt)?;
        self.forward(&x0, &layout, mask, capture)
    }

    /// Processes rows `x` at `positions` against `cache`.
    pub fn step(
        &self,
        x: Tensor,
        positions: &[usize],
        cache: &mut KvCache,
        layout: &SequenceLayout,
        mask: Option<MaskSpec>,
        capture: Capture,
    ) -> Result<ForwardTrace> {
        check_mask(&self.config, mask)?;
        let out = run_layers(
            &self.config,
            &self.params,
            x,
            positions,
            cache,
            layout,
            mask,
            1..self.config.num_layers + 1,
            capture,
            None,
        )?;
        Ok(ForwardTrace {
            positions: positions.to_vec(),
            logits: logits_of(&self.params, &out.x)?,
            attention: out.attention,
            key_positions: out.key_positions,
            hidden_norms: out.hidden_norms,
        })
    }

    /// Greedy decoding with a key/value cache. The vision mask applies to
    /// every step, prompt and generated tokens alike.
    pub fn decode_greedy(
        &self,
        prompt: &Prompt,
        mask: Option<MaskSpec>,
        max_new: usize,
        capture: Capture,
    ) -> Result<Decoded> {
        if max_new == 0 {
            return Err(Error::Config("max_new must be at least 1".into()));
        }
        let total = prompt.len() + max_new;
        if total > self.config.max_seq_len {
            return Err(Error::ContextOverflow { len: total, max: self.config.max_seq_len });
        }
        let (x0, layout) = self.embed(prompt)?;
        let mut cache = KvCache::new(self.config.num_layers);
        let n = x0.rows();
        let positions: Vec<usize> = (0..n).collect();
        let prefill = self.step(x0, &positions, &mut cache, &layout, mask, capture)?;
        let mut tokens = vec![argmax(prefill.last_logits()) as u32];
        let mut steps = Vec::new();
        loop {
            let done = tokens.len() == max_new;
            if done && !capture.any() {
                break;
            }
            let pos = n + tokens.len() - 1;
            let tok = *tokens.last().unwrap() as usize;
            let mut row = Tensor::zeros(&[1, self.config.hidden_dim]);
            for ((v, e), p) in row
                .row_mut(0)
                .iter_mut()
                .zip(self.params.tok.row(tok))
                .zip(self.params.pos.row(pos))
            {
                *v = e + p;
            }
            let trace = self.step(row, &[pos], &mut cache, &layout, mask, capture)?;
            if !done {
                tokens.push(argmax(trace.last_logits()) as u32);
            }
            if capture.any() {
                steps.push(trace);
            }
            if done {
                break;
            }
        }
        Ok(Decoded { tokens, prefill, steps })
    }

    /// Greedy decoding by re-running the full forward at every step.
    pub fn decode_recompute(
        &self,
        prompt: &Prompt,
        mask: Option<MaskSpec>,
        max_new: usize,
    ) -> Result<Vec<u32>> {
        let mut tokens: Vec<u32> = Vec::new();
        while tokens.len() < max_new {
            let (x, layout) = self.embed_with_response(prompt, &tokens)?;
            let trace = self.forward(&x, &layout, mask, Capture::NONE)?;
            tokens.push(argmax(trace.last_logits()) as u32);
        }
        Ok(tokens)
    }
}

/// Embeds a prompt for `ckpt`; errors when vision input is given to a model
/// without a projector.
pub fn embed_multimodal(ckpt: &Checkpoint, prompt: &Prompt) -> Result<(Tensor, SequenceLayout)> {
    if prompt.num_vision() > 0 && ckpt.kind == CheckpointKind::BaseLm {
        return Err(Error::Checkpoint("base_lm checkpoint has no projector".into()));
    }
    Model::new(ckpt)?.embed(prompt)
}

pub fn forward(
    ckpt: &Checkpoint,
    x0: &Tensor,
    layout: &SequenceLayout,
    mask: Option<MaskSpec>,
    capture: Capture,
) -> Result<ForwardTrace> {
    Model::new(ckpt)?.forward(x0, layout, mask, capture)
}

pub fn decode_greedy(
    ckpt: &Checkpoint,
    prompt: &Prompt,
    mask: Option<MaskSpec>,
    max_new: usize,
    capture: Capture,
) -> Result<Decoded> {
    Model::new(ckpt)?.decode_greedy(prompt, mask, max_new, capture)
}
