//! Synthetic tasks.
//!
//! Text tasks exercise a symbolic skill without any vision input. The
//! grounded task asks for the attribute of one cell of a grid that is only
//! visible through the vision features, so the answer cannot be read off the
//! question tokens.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layout::Prompt;
use crate::tensor::Tensor;

/// Token ids shared by every task.
pub mod vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const SYS: u32 = 2;
    pub const SUM: u32 = 3;
    pub const CPY: u32 = 4;
    pub const ASK: u32 = 5;
    pub const EQ: u32 = 6;
    pub const DIGIT0: u32 = 10;
    pub const PTR0: u32 = 20;
    pub const ROW0: u32 = 24;
    pub const COL0: u32 = 32;
    /// Smallest vocabulary that covers every task token.
    pub const MIN_VOCAB: usize = 40;

    pub fn digit(d: u32) -> u32 {
        DIGIT0 + d
    }
}

use vocab::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 80/10/10 split of `n`, remainder to train.
    pub fn from_total(n: usize) -> Self {
        let val = n / 10;
        let test = n / 10;
        SplitSizes { train: n - val - test, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSkill {
    /// `SUM a b EQ -> (a + b) mod 10`.
    ModularSum,
    /// `CPY p x0 x1 x2 x3 EQ -> (x_p + 1) mod 10`.
    CopyTransform,
}

impl FromStr for TextSkill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modular_sum" | "modular-sum" => Ok(TextSkill::ModularSum),
            "copy_transform" | "copy-with-transform" | "copy_with_transform" => {
                Ok(TextSkill::CopyTransform)
            }
            other => Err(Error::Config(format!("unknown text skill `{other}`"))),
        }
    }
}

pub const MODULUS: u32 = 10;

pub fn modular_sum(a: u32, b: u32) -> u32 {
    (a + b) % MODULUS
}

pub fn copy_transform(pointer: usize, xs: &[u32; 4]) -> u32 {
    (xs[pointer] + 1) % MODULUS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridParams {
    pub grid_size: usize,
    pub num_attributes: usize,
}

impl GridParams {
    pub fn desk() -> Self {
        GridParams { grid_size: 4, num_attributes: 8 }
    }

    /// One-hot attribute, one-hot row, one-hot column.
    pub fn feature_dim(&self) -> usize {
        self.num_attributes + 2 * self.grid_size
    }

    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    fn validate(&self) -> Result<()> {
        if self.num_attributes < 2 || self.cells() < 2 {
            return Err(Error::Task(
                "need at least 2 attributes and 2 cells for the answer to depend on the image"
                    .into(),
            ));
        }
        if self.num_attributes > MODULUS as usize || self.grid_size > 8 {
            return Err(Error::Task("at most 10 attributes and an 8x8 grid".into()));
        }
        Ok(())
    }
}

impl Default for GridParams {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskKind {
    Text { skill: TextSkill },
    Grounded { grid: GridParams },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub prompt: Prompt,
    pub answer: u32,
    /// Queried `(row, col)` for grounded examples.
    pub query_cell: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub seed: u64,
    pub kind: TaskKind,
    /// Tokens an answer may take; predictions are restricted to these.
    pub answer_vocab: Vec<u32>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Task {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Checks that every example fits `config`.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if config.vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} is below the task vocabulary ({MIN_VOCAB})",
                config.vocab_size
            )));
        }
        if let TaskKind::Grounded { grid } = self.kind {
            if grid.feature_dim() != config.vision_feature_dim {
                return Err(Error::Config(format!(
                    "task vision features have {} dims, model expects {}",
                    grid.feature_dim(),
                    config.vision_feature_dim
                )));
            }
        }
        let longest = [&self.train, &self.val, &self.test]
            .iter()
            .flat_map(|s| s.iter())
            .map(|e| e.prompt.len())
            .max()
            .unwrap_or(0);
        if longest > config.max_seq_len {
            return Err(Error::ContextOverflow { len: longest, max: config.max_seq_len });
        }
        Ok(())
    }

    /// Content hash of one split.
    pub fn split_digest(&self, split: Split) -> String {
        let bytes = serde_json::to_vec(self.split(split)).expect("examples serialize");
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        h.update(bytes);
        hex::encode(h.finalize())
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        crate::ckpt_io::write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn text_prompt(instruction: Vec<u32>) -> Prompt {
    Prompt::text(vec![BOS, SYS], instruction)
}

pub fn gen_text_task(seed: u64, skill: TextSkill, sizes: SplitSizes) -> Result<Task> {
    if sizes.total() == 0 {
        return Err(Error::Task("need at least one example".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<(Vec<u32>, u32)> = match skill {
        TextSkill::ModularSum => {
            let mut pairs: Vec<(u32, u32)> =
                (0..MODULUS).flat_map(|a| (0..MODULUS).map(move |b| (a, b))).collect();
            if sizes.total() > pairs.len() {
                return Err(Error::Task(format!(
                    "modular sum has only {} distinct problems, {} requested",
                    pairs.len(),
                    sizes.total()
                )));
            }
            pairs.shuffle(&mut rng);
            pairs
                .into_iter()
                .take(sizes.total())
                .map(|(a, b)| (vec![SUM, digit(a), digit(b), EQ], digit(modular_sum(a, b))))
                .collect()
        }
        TextSkill::CopyTransform => {
            let space = 4 * (MODULUS as usize).pow(4);
            if sizes.total() > space / 2 {
                return Err(Error::Task("too many copy-transform examples requested".into()));
            }
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(sizes.total());
            while out.len() < sizes.total() {
                let p = rng.gen_range(0..4usize);
                let xs: [u32; 4] = std::array::from_fn(|_| rng.gen_range(0..MODULUS));
                if !seen.insert((p, xs)) {
                    continue;
                }
                let mut ins = vec![CPY, PTR0 + p as u32];
                ins.extend(xs.iter().map(|x| digit(*x)));
                ins.push(EQ);
                out.push((ins, digit(copy_transform(p, &xs))));
            }
            out
        }
    };
    let mut id = 0u64;
    let mut take = |n: usize| -> Vec<Example> {
        all.drain(..n)
            .map(|(ins, answer)| {
                id += 1;
                Example { id, prompt: text_prompt(ins), answer, query_cell: None }
            })
            .collect()
    };
    let train = take(sizes.train);
    let val = take(sizes.val);
    let test = take(sizes.test);
    let name = match skill {
        TextSkill::ModularSum => "modular_sum",
        TextSkill::CopyTransform => "copy_transform",
    };
    Ok(Task {
        id: format!("text-{name}-s{seed}"),
        seed,
        kind: TaskKind::Text { skill },
        answer_vocab: (0..MODULUS).map(digit).collect(),
        train,
        val,
        test,
    })
}

/// Vision features of a grid: one row per cell in row-major order.
pub fn grid_features(grid: &GridParams, attrs: &[u32]) -> Tensor {
    let f = grid.feature_dim();
    let mut data = vec![0.0f32; grid.cells() * f];
    for (cell, &a) in attrs.iter().enumerate() {
        let (r, c) = (cell / grid.grid_size, cell % grid.grid_size);
        let row = &mut data[cell * f..(cell + 1) * f];
        row[a as usize] = 1.0;
        row[grid.num_attributes + r] = 1.0;
        row[grid.num_attributes + grid.grid_size + c] = 1.0;
    }
    Tensor::new(vec![grid.cells(), f], data).expect("grid feature shape")
}

pub fn grounded_prompt(grid: &GridParams, attrs: &[u32], row: usize, col: usize) -> Prompt {
    Prompt {
        prefix: vec![BOS, SYS],
        vision: Some(grid_features(grid, attrs)),
        instruction: vec![ASK, ROW0 + row as u32, COL0 + col as u32, EQ],
    }
}

pub fn gen_grounded_task(seed: u64, grid: GridParams, sizes: SplitSizes) -> Result<Task> {
    grid.validate()?;
    if sizes.total() == 0 {
        return Err(Error::Task("need at least one example".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<(Vec<u32>, usize)> = HashSet::new();
    let mut id = 0u64;
    let mut make_split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Example> {
        // Balanced gold answers so that no question-only predictor beats chance.
        let mut golds: Vec<u32> = (0..n).map(|i| (i % grid.num_attributes) as u32).collect();
        golds.shuffle(rng);
        golds
            .into_iter()
            .map(|gold| loop {
                let mut attrs: Vec<u32> = (0..grid.cells())
                    .map(|_| rng.gen_range(0..grid.num_attributes as u32))
                    .collect();
                let cell = rng.gen_range(0..grid.cells());
                attrs[cell] = gold;
                if !seen.insert((attrs.clone(), cell)) {
                    continue;
                }
                let (r, c) = (cell / grid.grid_size, cell % grid.grid_size);
                id += 1;
                break Example {
                    id,
                    prompt: grounded_prompt(&grid, &attrs, r, c),
                    answer: digit(gold),
                    query_cell: Some((r, c)),
                };
            })
            .collect()
    };
    let train = make_split(sizes.train, &mut rng);
    let val = make_split(sizes.val, &mut rng);
    let test = make_split(sizes.test, &mut rng);
    Ok(Task {
        id: format!("grounded-g{}a{}-s{seed}", grid.grid_size, grid.num_attributes),
        seed,
        kind: TaskKind::Grounded { grid },
        answer_vocab: (0..grid.num_attributes as u32).map(digit).collect(),
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn modular_sum_rule() {
        assert_eq!(modular_sum(3, 4), 7);
        assert_eq!(modular_sum(7, 8), 5);
        let t = gen_text_task(1, TextSkill::ModularSum, SplitSizes { train: 5, val: 2, test: 2 })
            .unwrap();
        for e in &t.train {
            let ins = &e.prompt.instruction;
            let (a, b) = (ins[1] - DIGIT0, ins[2] - DIGIT0);
            assert_eq!(e.answer, digit(modular_sum(a, b)));
        }
    }

    #[test]
    fn copy_transform_rule() {
        assert_eq!(copy_transform(2, &[1, 2, 9, 4]), 0);
        let t = gen_text_task(4, TextSkill::CopyTransform, SplitSizes::from_total(50)).unwrap();
        for e in t.train.iter().chain(&t.test) {
            let ins = &e.prompt.instruction;
            let p = (ins[1] - PTR0) as usize;
            let xs = [ins[2] - DIGIT0, ins[3] - DIGIT0, ins[4] - DIGIT0, ins[5] - DIGIT0];
            assert_eq!(e.answer, digit(copy_transform(p, &xs)));
        }
    }

    #[test]
    fn grounded_is_deterministic() {
        let a = gen_grounded_task(7, GridParams::desk(), SplitSizes::from_total(100)).unwrap();
        let b = gen_grounded_task(7, GridParams::desk(), SplitSizes::from_total(100)).unwrap();
        assert_eq!(a, b);
        let c = gen_grounded_task(8, GridParams::desk(), SplitSizes::from_total(100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_are_disjoint() {
        let t = gen_grounded_task(3, GridParams::desk(), SplitSizes::from_total(300)).unwrap();
        let key = |e: &Example| serde_json::to_string(&e.prompt).unwrap();
        let train: HashSet<_> = t.train.iter().map(key).collect();
        assert!(t.val.iter().chain(&t.test).all(|e| !train.contains(&key(e))));
        let t = gen_text_task(3, TextSkill::ModularSum, SplitSizes { train: 60, val: 20, test: 20 })
            .unwrap();
        let train: HashSet<_> = t.train.iter().map(key).collect();
        assert!(t.val.iter().chain(&t.test).all(|e| !train.contains(&key(e))));
    }

    #[test]
    fn answer_matches_grid_cell() {
        let g = GridParams::desk();
        let t = gen_grounded_task(5, g, SplitSizes::from_total(50)).unwrap();
        for e in &t.train {
            let (r, c) = e.query_cell.unwrap();
            let feats = e.prompt.vision.as_ref().unwrap();
            let row = feats.row(r * g.grid_size + c);
            let attr = row[..g.num_attributes].iter().position(|v| *v == 1.0).unwrap();
            assert_eq!(e.answer, digit(attr as u32));
            assert_eq!(row[g.num_attributes + r], 1.0);
            assert_eq!(row[g.num_attributes + g.grid_size + c], 1.0);
        }
    }

    #[test]
    fn text_only_majority_predictor_is_at_chance() {
        let g = GridParams::desk();
        let t = gen_grounded_task(11, g, SplitSizes { train: 2000, val: 100, test: 800 }).unwrap();
        // Per-question majority vote learned on train, the strongest text-only rule.
        let mut votes: HashMap<Vec<u32>, HashMap<u32, usize>> = HashMap::new();
        for e in &t.train {
            *votes.entry(e.prompt.instruction.clone()).or_default().entry(e.answer).or_default() +=
                1;
        }
        let mut global: HashMap<u32, usize> = HashMap::new();
        for e in &t.train {
            *global.entry(e.answer).or_default() += 1;
        }
        let global_major = *global.iter().max_by_key(|(a, n)| (**n, u32::MAX - **a)).unwrap().0;
        let predict = |ins: &Vec<u32>| -> u32 {
            votes
                .get(ins)
                .and_then(|v| v.iter().max_by_key(|(a, n)| (**n, u32::MAX - **a)).map(|(a, _)| *a))
                .unwrap_or(global_major)
        };
        let acc = |f: &dyn Fn(&Example) -> u32| {
            t.test.iter().filter(|e| f(e) == e.answer).count() as f64 / t.test.len() as f64
        };
        let chance = 1.0 / g.num_attributes as f64;
        assert!(acc(&|_| global_major) <= chance + 0.05);
        assert!(acc(&|e| predict(&e.prompt.instruction)) <= chance + 0.05);
    }

    #[test]
    fn too_small_vocab_or_space_errors() {
        let tiny = GridParams { grid_size: 1, num_attributes: 8 };
        assert!(gen_grounded_task(0, tiny, SplitSizes::from_total(10)).is_err());
        let mono = GridParams { grid_size: 4, num_attributes: 1 };
        assert!(gen_grounded_task(0, mono, SplitSizes::from_total(10)).is_err());
        assert!(gen_text_task(0, TextSkill::ModularSum, SplitSizes::from_total(101)).is_err());
    }

    #[test]
    fn fits_desk_config() {
        let t = gen_grounded_task(1, GridParams::desk(), SplitSizes::from_total(20)).unwrap();
        t.check_compatible(&ModelConfig::desk()).unwrap();
        let mut small = ModelConfig::desk();
        small.vision_feature_dim = 8;
        assert!(t.check_compatible(&small).is_err());
    }
}
