//! Everything needed to reproduce a base/mllm pair and a merge run from one
//! seed: model shape, task sizes, optimizer settings and pipeline settings.
//! A recipe reads its overrides from a [`RunConfig`] and writes the
//! effective values back so a run directory records what was used.

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::merging::{LambdaGrid, MergeSubset, PipelineConfig, LAMBDA_MAX};
use crate::plateau::PlateauConfig;
use crate::runconfig::RunConfig;
use crate::taskgen::{gen_grounded_task, gen_text_task, GridParams, SplitSizes, Task, TextSkill};
use crate::train::{finetune_mllm, train_base_lm, FreezeMask, LogRow, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub seed: u64,
    pub model: ModelConfig,
    pub grid: GridParams,
    pub text_skill: TextSkill,
    pub text_sizes: SplitSizes,
    pub grounded_sizes: SplitSizes,
    pub base: TrainConfig,
    pub finetune: TrainConfig,
    pub freeze_embeddings: bool,
    pub pipeline: PipelineConfig,
}

fn skill_name(s: TextSkill) -> &'static str {
    match s {
        TextSkill::ModularSum => "modular_sum",
        TextSkill::CopyTransform => "copy_transform",
    }
}

impl Recipe {
    /// Desk defaults: the 12-layer model, a 4x4 grid with 8 attributes and a
    /// schedule that finishes a seed in a few CPU minutes.
    pub fn desk(seed: u64) -> Self {
        let grid = GridParams::desk();
        Recipe {
            seed,
            model: ModelConfig { vision_feature_dim: grid.feature_dim(), ..ModelConfig::desk() },
            grid,
            text_skill: TextSkill::CopyTransform,
            text_sizes: SplitSizes { train: 8000, val: 256, test: 256 },
            grounded_sizes: SplitSizes { train: 8000, val: 512, test: 512 },
            base: TrainConfig { steps: 200, lr: 1e-3, seed, ..TrainConfig::default() },
            finetune: TrainConfig {
                steps: 1500,
                lr: 1e-3,
                projector_std: 0.1,
                seed: seed.wrapping_add(1),
                ..TrainConfig::default()
            },
            freeze_embeddings: false,
            pipeline: PipelineConfig {
                grid: LambdaGrid::full().with_sum_range(0.8, 1.2),
                val_subsample: 512,
                ..PipelineConfig::default()
            },
        }
    }

    /// Desk defaults overridden by whatever keys `c` sets.
    pub fn from_run_config(c: &RunConfig, seed: u64) -> Result<Self> {
        let seed = c.get_or("seed", seed)?;
        let d = Recipe::desk(seed);
        let grid = GridParams {
            grid_size: c.get_or("task.grid_size", d.grid.grid_size)?,
            num_attributes: c.get_or("task.num_attributes", d.grid.num_attributes)?,
        };
        let model = ModelConfig {
            num_layers: c.get_or("model.num_layers", d.model.num_layers)?,
            hidden_dim: c.get_or("model.hidden_dim", d.model.hidden_dim)?,
            num_heads: c.get_or("model.num_heads", d.model.num_heads)?,
            vocab_size: c.get_or("model.vocab_size", d.model.vocab_size)?,
            max_seq_len: c.get_or("model.max_seq_len", d.model.max_seq_len)?,
            vision_feature_dim: grid.feature_dim(),
            ffn_dim: c.get_or("model.ffn_dim", d.model.ffn_dim)?,
        };
        model.validate()?;
        let sizes = |prefix: &str, def: SplitSizes| -> Result<SplitSizes> {
            Ok(SplitSizes {
                train: c.get_or(&format!("{prefix}.train"), def.train)?,
                val: c.get_or(&format!("{prefix}.val"), def.val)?,
                test: c.get_or(&format!("{prefix}.test"), def.test)?,
            })
        };
        let train = |prefix: &str, def: &TrainConfig, seed: u64| -> Result<TrainConfig> {
            let k = |s: &str| format!("{prefix}.{s}");
            Ok(TrainConfig {
                steps: c.get_or(&k("steps"), def.steps)?,
                batch_size: c.get_or(&k("batch_size"), def.batch_size)?,
                lr: c.get_or(&k("lr"), def.lr)?,
                beta1: c.get_or(&k("beta1"), def.beta1)?,
                beta2: c.get_or(&k("beta2"), def.beta2)?,
                adam_eps: c.get_or(&k("adam_eps"), def.adam_eps)?,
                clip_norm: c.get_or(&k("clip_norm"), def.clip_norm)?,
                final_lr_frac: c.get_or(&k("final_lr_frac"), def.final_lr_frac)?,
                eval_every: c.get_or(&k("eval_every"), def.eval_every)?,
                eval_examples: c.get_or(&k("eval_examples"), def.eval_examples)?,
                projector_std: c.get_or(&k("projector_std"), def.projector_std)?,
                seed,
                workers: def.workers,
            })
        };
        let guard_alpha = match c.get("plam.guard_alpha") {
            None => d.pipeline.guard_alpha,
            Some("none") => None,
            Some(v) => match v.parse::<f64>() {
                Ok(a) if a > 0.0 && a <= 1.0 => Some(a),
                _ => return Err(Error::Config(format!("`plam.guard_alpha = {v}` must be in (0, 1] or none"))),
            },
        };
        let sum_range = match (c.get("plam.sum_min"), c.get("plam.sum_max")) {
            (Some("none"), _) | (_, Some("none")) => None,
            _ => {
                let (lo, hi) = d.pipeline.grid.sum_range.unwrap_or((0.0, 2.0 * LAMBDA_MAX));
                Some((c.get_or("plam.sum_min", lo)?, c.get_or("plam.sum_max", hi)?))
            }
        };
        let tenths: u32 = c.get_or("plam.lambda_max_tenths", (LAMBDA_MAX * 10.0).round() as u32)?;
        if tenths as f64 / 10.0 > LAMBDA_MAX {
            return Err(Error::Config(format!("plam.lambda_max_tenths above {}", LAMBDA_MAX * 10.0)));
        }
        let pipeline = PipelineConfig {
            plateau: PlateauConfig {
                window: c.get_or("plateau.window", d.pipeline.plateau.window)?,
                min_plateau_len: c.get_or("plateau.min_plateau_len", d.pipeline.plateau.min_plateau_len)?,
                slope_tol_frac: c.get_or("plateau.slope_tol_frac", d.pipeline.plateau.slope_tol_frac)?,
            },
            radius: c.get_or("plam.radius", d.pipeline.radius)?,
            grid: LambdaGrid { lambda1: LambdaGrid::lattice(tenths), lambda2: LambdaGrid::lattice(tenths), sum_range },
            subset: c.get_or::<MergeSubset>("plam.subset", d.pipeline.subset)?,
            guard_alpha,
            val_subsample: c.get_or("plam.val_subsample", d.pipeline.val_subsample)?,
            workers: d.pipeline.workers,
            analysis: c.get_or("plam.analysis", d.pipeline.analysis)?,
            analysis_examples: c.get_or("plam.analysis_examples", d.pipeline.analysis_examples)?,
        };
        pipeline.plateau.validate()?;
        let freeze = c.get("finetune.freeze").unwrap_or("none");
        let freeze_embeddings = match freeze {
            "none" => false,
            "embeddings" => true,
            other => return Err(Error::Config(format!("unknown finetune.freeze `{other}`"))),
        };
        Ok(Recipe {
            seed,
            model,
            grid,
            text_skill: c.get_or("task.text_skill", d.text_skill)?,
            text_sizes: sizes("task.text", d.text_sizes)?,
            grounded_sizes: sizes("task.grounded", d.grounded_sizes)?,
            base: train("base", &d.base, seed)?,
            finetune: train("finetune", &d.finetune, seed.wrapping_add(1))?,
            freeze_embeddings,
            pipeline,
        })
    }

    /// Effective settings in run-config form.
    pub fn to_run_config(&self) -> RunConfig {
        let mut c = RunConfig::new();
        c.set("seed", self.seed);
        let m = &self.model;
        c.set("model.num_layers", m.num_layers);
        c.set("model.hidden_dim", m.hidden_dim);
        c.set("model.num_heads", m.num_heads);
        c.set("model.vocab_size", m.vocab_size);
        c.set("model.max_seq_len", m.max_seq_len);
        c.set("model.ffn_dim", m.ffn_dim);
        c.set("task.grid_size", self.grid.grid_size);
        c.set("task.num_attributes", self.grid.num_attributes);
        c.set("task.text_skill", skill_name(self.text_skill));
        for (prefix, s) in [("task.text", self.text_sizes), ("task.grounded", self.grounded_sizes)] {
            c.set(&format!("{prefix}.train"), s.train);
            c.set(&format!("{prefix}.val"), s.val);
            c.set(&format!("{prefix}.test"), s.test);
        }
        for (prefix, t) in [("base", &self.base), ("finetune", &self.finetune)] {
            let k = |s: &str| format!("{prefix}.{s}");
            c.set(&k("steps"), t.steps);
            c.set(&k("batch_size"), t.batch_size);
            c.set(&k("lr"), t.lr);
            c.set(&k("beta1"), t.beta1);
            c.set(&k("beta2"), t.beta2);
            c.set(&k("adam_eps"), t.adam_eps);
            c.set(&k("clip_norm"), t.clip_norm);
            c.set(&k("final_lr_frac"), t.final_lr_frac);
            c.set(&k("eval_every"), t.eval_every);
            c.set(&k("eval_examples"), t.eval_examples);
        }
        c.set("finetune.projector_std", self.finetune.projector_std);
        c.set("finetune.freeze", if self.freeze_embeddings { "embeddings" } else { "none" });
        let p = &self.pipeline;
        c.set("plateau.window", p.plateau.window);
        c.set("plateau.min_plateau_len", p.plateau.min_plateau_len);
        c.set("plateau.slope_tol_frac", p.plateau.slope_tol_frac);
        c.set("plam.radius", p.radius);
        c.set("plam.subset", p.subset);
        c.set("plam.guard_alpha", p.guard_alpha.map_or("none".to_string(), |a| a.to_string()));
        c.set("plam.val_subsample", p.val_subsample);
        c.set("plam.analysis", p.analysis);
        c.set("plam.analysis_examples", p.analysis_examples);
        let tenths = p.grid.lambda1.last().map_or(0, |v| (v * 10.0).round() as u32);
        c.set("plam.lambda_max_tenths", tenths);
        match p.grid.sum_range {
            Some((lo, hi)) => {
                c.set("plam.sum_min", lo);
                c.set("plam.sum_max", hi);
            }
            None => {
                c.set("plam.sum_min", "none");
                c.set("plam.sum_max", "none");
            }
        }
        c
    }

    pub fn text_task(&self) -> Result<Task> {
        gen_text_task(self.seed, self.text_skill, self.text_sizes)
    }

    pub fn grounded_task(&self) -> Result<Task> {
        gen_grounded_task(self.seed, self.grid, self.grounded_sizes)
    }

    pub fn train_base(&self, text: &Task, log: &mut Vec<LogRow>) -> Result<Checkpoint> {
        train_base_lm(self.model, text, &self.base, log)
    }

    pub fn finetune(&self, base: &Checkpoint, grounded: &Task, log: &mut Vec<LogRow>) -> Result<Checkpoint> {
        let freeze = if self.freeze_embeddings { FreezeMask::embeddings() } else { FreezeMask::none() };
        finetune_mllm(base, grounded, &self.finetune, &freeze, log)
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.base.workers = workers;
        self.finetune.workers = workers;
        self.pipeline.workers = workers;
        self
    }
}
