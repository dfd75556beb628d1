//! In-memory checkpoints: a named tensor map plus a typed view of the same
//! parameters used by the forward and backward passes.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    BaseLm,
    Mllm,
    Merged,
}

impl CheckpointKind {
    pub fn code(self) -> u8 {
        match self {
            CheckpointKind::BaseLm => 0,
            CheckpointKind::Mllm => 1,
            CheckpointKind::Merged => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CheckpointKind::BaseLm),
            1 => Some(CheckpointKind::Mllm),
            2 => Some(CheckpointKind::Merged),
            _ => None,
        }
    }

    pub fn has_projector(self) -> bool {
        self != CheckpointKind::BaseLm
    }
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointKind::BaseLm => "base_lm",
            CheckpointKind::Mllm => "mllm",
            CheckpointKind::Merged => "merged",
        })
    }
}

impl FromStr for CheckpointKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base_lm" => Ok(CheckpointKind::BaseLm),
            "mllm" => Ok(CheckpointKind::Mllm),
            "merged" => Ok(CheckpointKind::Merged),
            other => Err(Error::Checkpoint(format!("unknown kind `{other}`"))),
        }
    }
}

/// Per-layer parameter slots, in canonical order.
pub const LAYER_SLOTS: [&str; 8] = [
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.o",
    "ffn.up",
    "ffn.down",
    "norm.attn",
    "norm.ffn",
];

/// The attention projection slots.
pub const ATTN_SLOTS: [&str; 4] = ["attn.q", "attn.k", "attn.v", "attn.o"];

pub fn layer_name(layer: usize, slot: &str) -> String {
    format!("layers.{layer}.{slot}")
}

/// Splits `layers.<l>.<slot>` into its 1-based layer index and slot.
pub fn parse_layer_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layers.")?;
    let (idx, slot) = rest.split_once('.')?;
    Some((idx.parse().ok()?, slot))
}

fn sort_key(name: &str) -> (u8, usize, usize, &str) {
    match name {
        "embed.tok" => (0, 0, 0, name),
        "embed.pos" => (0, 1, 0, name),
        "projector" => (1, 0, 0, name),
        "unembed" => (3, 0, 0, name),
        _ => match parse_layer_name(name) {
            Some((l, slot)) => {
                let s = LAYER_SLOTS.iter().position(|x| *x == slot).unwrap_or(LAYER_SLOTS.len());
                (2, l, s, name)
            }
            None => (4, 0, 0, name),
        },
    }
}

/// Canonical ordering of tensor names: embeddings, projector, layers in
/// numeric order (slots in [`LAYER_SLOTS`] order), unembedding.
pub fn canonical_cmp(a: &str, b: &str) -> Ordering {
    sort_key(a).cmp(&sort_key(b))
}

/// Expected tensor names and shapes for a configuration, canonically ordered.
pub fn expected_shapes(config: &ModelConfig, with_projector: bool) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden_dim;
    let mut out = vec![
        ("embed.tok".to_string(), vec![config.vocab_size, d]),
        ("embed.pos".to_string(), vec![config.max_seq_len, d]),
    ];
    if with_projector {
        out.push(("projector".to_string(), vec![d, config.vision_feature_dim]));
    }
    for l in 1..=config.num_layers {
        for slot in LAYER_SLOTS {
            let shape = match slot {
                "ffn.up" => vec![config.ffn_dim, d],
                "ffn.down" => vec![d, config.ffn_dim],
                "norm.attn" | "norm.ffn" => vec![d],
                _ => vec![d, d],
            };
            out.push((layer_name(l, slot), shape));
        }
    }
    out.push(("unembed".to_string(), vec![config.vocab_size, d]));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub kind: CheckpointKind,
    pub tensors: BTreeMap<String, Tensor>,
    /// Free-form provenance (e.g. digests of parent checkpoints).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Randomly initialized checkpoint; deterministic in `seed`.
    pub fn init_random(config: ModelConfig, kind: CheckpointKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim as f64;
        let depth_scale = (2.0 * config.num_layers as f64).sqrt();
        let mut tensors = BTreeMap::new();
        for (name, shape) in expected_shapes(&config, kind.has_projector()) {
            let slot = parse_layer_name(&name).map(|(_, s)| s).unwrap_or(name.as_str());
            let t = match slot {
                "norm.attn" | "norm.ffn" => Tensor::full(&shape, 1.0),
                "embed.tok" | "embed.pos" => Tensor::randn(&shape, 0.3, &mut rng),
                "projector" => Tensor::randn(&shape, 0.02, &mut rng),
                "attn.o" | "ffn.down" => {
                    let fan_in = shape[1] as f64;
                    Tensor::randn(&shape, 1.0 / fan_in.sqrt() / depth_scale, &mut rng)
                }
                _ => Tensor::randn(&shape, 1.0 / d.sqrt(), &mut rng),
            };
            tensors.insert(name, t);
        }
        Ok(Checkpoint { config, kind, tensors, meta: BTreeMap::new() })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn has_projector(&self) -> bool {
        self.tensors.contains_key("projector")
    }

    /// Tensor names in canonical order.
    pub fn canonical_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.tensors.keys().map(String::as_str).collect();
        names.sort_by(|a, b| canonical_cmp(a, b));
        names
    }

    /// Checks the name set and every shape against the config and kind.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = expected_shapes(&self.config, self.kind.has_projector());
        if expected.len() != self.tensors.len() {
            let want: Vec<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&String> =
                self.tensors.keys().filter(|k| !want.contains(&k.as_str())).collect();
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for kind {}, found {} (unexpected: {:?})",
                expected.len(),
                self.kind,
                self.tensors.len(),
                extra
            )));
        }
        for (name, shape) in expected {
            let t = self.tensor(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub o: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
    pub norm_attn: Tensor<T>,
    pub norm_ffn: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn slots(&self) -> [(&'static str, &Tensor<T>); 8] {
        [
            ("attn.q", &self.q),
            ("attn.k", &self.k),
            ("attn.v", &self.v),
            ("attn.o", &self.o),
            ("ffn.up", &self.up),
            ("ffn.down", &self.down),
            ("norm.attn", &self.norm_attn),
            ("norm.ffn", &self.norm_ffn),
        ]
    }

    fn slots_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 8] {
        [
            ("attn.q", &mut self.q),
            ("attn.k", &mut self.k),
            ("attn.v", &mut self.v),
            ("attn.o", &mut self.o),
            ("ffn.up", &mut self.up),
            ("ffn.down", &mut self.down),
            ("norm.attn", &mut self.norm_attn),
            ("norm.ffn", &mut self.norm_ffn),
        ]
    }
}

/// Typed parameter view used by the forward/backward passes. Also serves as
/// the gradient and optimizer-state container.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub tok: Tensor<T>,
    pub pos: Tensor<T>,
    pub projector: Option<Tensor<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub unembed: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.validate()?;
        let get = |n: &str| -> Result<Tensor<T>> { Ok(ckpt.tensor(n)?.cast()) };
        let layers = (1..=ckpt.config.num_layers)
            .map(|l| {
                Ok(LayerParams {
                    q: get(&layer_name(l, "attn.q"))?,
                    k: get(&layer_name(l, "attn.k"))?,
                    v: get(&layer_name(l, "attn.v"))?,
                    o: get(&layer_name(l, "attn.o"))?,
                    up: get(&layer_name(l, "ffn.up"))?,
                    down: get(&layer_name(l, "ffn.down"))?,
                    norm_attn: get(&layer_name(l, "norm.attn"))?,
                    norm_ffn: get(&layer_name(l, "norm.ffn"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Params {
            tok: get("embed.tok")?,
            pos: get("embed.pos")?,
            projector: if ckpt.has_projector() { Some(get("projector")?) } else { None },
            layers,
            unembed: get("unembed")?,
        })
    }

    /// All tensors with their canonical names, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed.tok".to_string(), &self.tok), ("embed.pos".to_string(), &self.pos)];
        if let Some(p) = &self.projector {
            out.push(("projector".to_string(), p));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (slot, t) in layer.slots() {
                out.push((layer_name(i + 1, slot), t));
            }
        }
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("embed.tok".to_string(), &mut self.tok),
            ("embed.pos".to_string(), &mut self.pos),
        ];
        if let Some(p) = &mut self.projector {
            out.push(("projector".to_string(), p));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (slot, t) in layer.slots_mut() {
                out.push((layer_name(i + 1, slot), t));
            }
        }
        out.push(("unembed".to_string(), &mut self.unembed));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        Params {
            tok: z(&self.tok),
            pos: z(&self.pos),
            projector: self.projector.as_ref().map(z),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    q: z(&l.q),
                    k: z(&l.k),
                    v: z(&l.v),
                    o: z(&l.o),
                    up: z(&l.up),
                    down: z(&l.down),
                    norm_attn: z(&l.norm_attn),
                    norm_ffn: z(&l.norm_ffn),
                })
                .collect(),
            unembed: z(&self.unembed),
        }
    }

    /// Elementwise `self += other`; both must come from the same config.
    pub fn accumulate(&mut self, other: &Params<T>) -> Result<()> {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn to_f32_map(&self) -> BTreeMap<String, Tensor> {
        self.named().into_iter().map(|(n, t)| (n, t.cast())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_checkpoint_is_valid_and_deterministic() {
        let c = ModelConfig::tiny();
        let a = Checkpoint::init_random(c, CheckpointKind::Mllm, 5).unwrap();
        a.validate().unwrap();
        assert!(a.has_projector());
        assert_eq!(a, Checkpoint::init_random(c, CheckpointKind::Mllm, 5).unwrap());
        let b = Checkpoint::init_random(c, CheckpointKind::BaseLm, 5).unwrap();
        b.validate().unwrap();
        assert!(!b.has_projector());
    }

    #[test]
    fn canonical_order_is_numeric_over_layers() {
        let mut cfg = ModelConfig::tiny();
        cfg.num_layers = 11;
        let c = Checkpoint::init_random(cfg, CheckpointKind::Mllm, 0).unwrap();
        let names = c.canonical_names();
        assert_eq!(names[0], "embed.tok");
        assert_eq!(names[2], "projector");
        assert_eq!(names[3], "layers.1.attn.q");
        assert_eq!(names[3 + 8], "layers.2.attn.q");
        assert_eq!(*names.last().unwrap(), "unembed");
        let expected: Vec<String> =
            expected_shapes(&cfg, true).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, expected.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn params_round_trip_names() {
        let c = Checkpoint::init_random(ModelConfig::tiny(), CheckpointKind::Mllm, 1).unwrap();
        let p: Params<f32> = Params::from_checkpoint(&c).unwrap();
        assert_eq!(p.to_f32_map(), c.tensors);
    }

    #[test]
    fn validate_rejects_wrong_shape_and_extra_names() {
        let mut c = Checkpoint::init_random(ModelConfig::tiny(), CheckpointKind::Mllm, 1).unwrap();
        c.tensors.insert("layers.1.attn.q".into(), Tensor::zeros(&[3, 3]));
        assert!(c.validate().is_err());
        let mut c = Checkpoint::init_random(ModelConfig::tiny(), CheckpointKind::BaseLm, 1).unwrap();
        c.tensors.insert("projector".into(), Tensor::zeros(&[8, 4]));
        assert!(c.validate().is_err());
    }

    #[test]
    fn layer_name_parsing() {
        assert_eq!(parse_layer_name("layers.12.attn.o"), Some((12, "attn.o")));
        assert_eq!(parse_layer_name("embed.tok"), None);
    }
}
