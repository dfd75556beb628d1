mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use plateau_lab::analysis::{grounded_heatmap, mass_profile, MassMode, Source};
use plateau_lab::ckpt_io::{self, digest};
use plateau_lab::eval::{compare, evaluate, EvalOptions, EvalReport};
use plateau_lab::interventions::{mask_sweep, sweep_k_values, MaskSpec, SweepProfile, SweepRequest};
use plateau_lab::merging::{
    grid_search, merge, plam_pipeline, LambdaGrid, MergeSpec, MergeSubset, PrefixCachedEvaluator,
};
use plateau_lab::plateau::{detect_from_profile, k0_candidates};
use plateau_lab::recipe::Recipe;
use plateau_lab::runconfig::RunConfig;
use plateau_lab::taskgen::{Split, Task, TaskKind};
use plateau_lab::train::log_to_csv;
use plateau_lab::workers::default_workers;
use plateau_lab::{Checkpoint, Model};
use rundir::RunDir;
use serde_json::json;

#[derive(Parser)]
#[command(name = "plateau-lab", version, about = "Vision-token masking, plateau-guided merging and attention profiling on a small multimodal decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Key-value run config; overlays the one already in the run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "PLATEAU_LAB_WORKERS")]
    workers: Option<usize>,
    /// Leave timestamps out of every artifact.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Clone, Debug)]
struct Out {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataKind {
    Text,
    Grounded,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Prefill,
    Decode,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the text and grounded tasks into data/.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        #[arg(long, value_enum, default_value = "both")]
        kind: DataKind,
    },
    /// Train the text-only base model.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        /// Text task JSON; generated from the config when absent.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Attach a projector to a base model and fine-tune on the grounded task.
    FinetuneMllm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        base: PathBuf,
        /// Grounded task JSON; generated from the config when absent.
        #[arg(long)]
        task: Option<PathBuf>,
        /// Text task JSON used to report the text-skill change.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Exact-match evaluation of one checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Ban vision tokens from layer k on.
        #[arg(long)]
        k: Option<usize>,
        /// Name used in the report; defaults to the file stem.
        #[arg(long)]
        id: Option<String>,
    },
    /// Score every vision-masking cut layer.
    SweepMask {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Find the plateau onset of a sweep profile.
    DetectPlateau {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        /// Sweep CSV; its `.json` sidecar is read when present.
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        radius: Option<usize>,
    },
    /// Interpolate base and vlm weights on layers k0..L.
    Merge {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        vlm: PathBuf,
        /// Falls back to `merge.start` in the config.
        #[arg(long)]
        k0: Option<usize>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        subset: Option<MergeSubset>,
    },
    /// Score merge cells on the validation split.
    GridSearch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        vlm: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// Explicit candidates, comma separated.
        #[arg(long, value_delimiter = ',')]
        k0: Vec<usize>,
        /// Centre of the candidate range when --k0 is absent.
        #[arg(long)]
        k_star: Option<usize>,
        #[arg(long)]
        radius: Option<usize>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        subset: Option<MergeSubset>,
    },
    /// Sweep, plateau detection, grid search and merge in one run.
    Plam {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        vlm: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        radius: Option<usize>,
        #[arg(long)]
        subset: Option<MergeSubset>,
    },
    /// Layer-wise attention mass from each source for one example.
    ProfileAttention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value = "prefill")]
        mode: ModeArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 1)]
        max_new: usize,
    },
    /// Instruction-to-vision attention over the grid for one example.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// First layer averaged (through the last).
        #[arg(long)]
        from_layer: Option<usize>,
        #[arg(long, default_value_t = 16)]
        scale: usize,
    },
    /// Score deltas of several eval reports against a baseline.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: Out,
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        baseline: String,
    },
    /// Per-tensor maximum absolute difference of two checkpoints.
    CkptDiff {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", &e.render().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<plateau_lab::Error>().map_or("cli", |c| c.kind());
            emit_error(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message.trim_end() } }));
}

struct Ctx {
    run: RunDir,
    config: RunConfig,
    recipe: Recipe,
    workers: usize,
    deterministic: bool,
}

impl Ctx {
    fn open(common: &Common, out: &Path) -> Result<Self> {
        let run = RunDir::create(out)?;
        let mut config = if run.config_path().exists() {
            RunConfig::load(&run.config_path())?
        } else {
            RunConfig::new()
        };
        if let Some(p) = &common.config {
            let extra = RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?;
            config = config.merged_with(&extra);
        }
        if let Some(s) = common.seed {
            config.set("seed", s);
        }
        let workers = common.workers.unwrap_or_else(default_workers).max(1);
        let recipe = Recipe::from_run_config(&config, 0)?.with_workers(workers);
        let effective = config.merged_with(&recipe.to_run_config());
        run.record_config(&effective)?;
        Ok(Ctx { run, config: effective, recipe, workers, deterministic: common.deterministic })
    }

    fn stamp(&self, mut v: serde_json::Value) -> serde_json::Value {
        if !self.deterministic {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            v["timestamp"] = json!(secs.to_string());
        }
        v
    }

    fn eval_opts(&self) -> EvalOptions {
        EvalOptions { workers: self.workers, seed: self.recipe.seed, record_examples: true, deterministic: self.deterministic }
    }
}

fn load_ckpt(p: &Path) -> Result<Checkpoint> {
    ckpt_io::load(p).with_context(|| format!("loading {}", p.display()))
}

fn load_task(p: &Path) -> Result<Task> {
    Task::load_json(p).with_context(|| format!("loading {}", p.display()))
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, out, kind } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let mut written = serde_json::Map::new();
            let mut tasks = Vec::new();
            if matches!(kind, DataKind::Text | DataKind::Both) {
                tasks.push(("text", ctx.recipe.text_task()?));
            }
            if matches!(kind, DataKind::Grounded | DataKind::Both) {
                tasks.push(("grounded", ctx.recipe.grounded_task()?));
            }
            for (name, task) in tasks {
                let p = ctx.run.path("data", &format!("{name}.json"));
                task.save_json(&p)?;
                written.insert(
                    name.into(),
                    json!({
                        "path": format!("data/{name}.json"),
                        "task_id": task.id,
                        "sizes": [task.train.len(), task.val.len(), task.test.len()],
                        "val_digest": task.split_digest(Split::Val),
                        "test_digest": task.split_digest(Split::Test),
                    }),
                );
            }
            let report = ctx.stamp(json!({ "seed": ctx.recipe.seed, "tasks": written }));
            ctx.run.write_json("reports", "gen-data.json", &report)?;
            print_json(&report);
        }
        Command::TrainBase { common, out, text } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let task = match text {
                Some(p) => load_task(&p)?,
                None => ctx.recipe.text_task()?,
            };
            let mut log = Vec::new();
            let result = ctx.recipe.train_base(&task, &mut log);
            ctx.run.write_text("logs", "train-base.csv", &log_to_csv(&log))?;
            let base = save_or_last_good(&ctx, result, "base.plck")?;
            let model = Model::new(&base)?;
            let val = plateau_lab::eval::accuracy(&model, &task.val, &task.answer_vocab, None, ctx.workers)?;
            let report = ctx.stamp(json!({
                "checkpoint": "checkpoints/base.plck",
                "digest": digest(&base)?,
                "task_id": task.id,
                "val_accuracy": val,
                "steps": ctx.recipe.base.steps,
            }));
            ctx.run.write_json("reports", "train-base.json", &report)?;
            print_json(&report);
        }
        Command::FinetuneMllm { common, out, base, task, text } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let base = load_ckpt(&base)?;
            let task = match task {
                Some(p) => load_task(&p)?,
                None => ctx.recipe.grounded_task()?,
            };
            let mut log = Vec::new();
            let result = ctx.recipe.finetune(&base, &task, &mut log);
            ctx.run.write_text("logs", "finetune.csv", &log_to_csv(&log))?;
            let vlm = save_or_last_good(&ctx, result, "mllm.plck")?;
            let model = Model::new(&vlm)?;
            let acc = |m: &Model, t: &Task| plateau_lab::eval::accuracy(m, &t.val, &t.answer_vocab, None, ctx.workers);
            let text_change = match text {
                Some(p) => {
                    let t = load_task(&p)?;
                    let before = acc(&Model::new(&base)?, &t)?;
                    let after = acc(&model, &t)?;
                    json!({ "task_id": t.id, "base": before, "mllm": after, "change": after - before })
                }
                None => serde_json::Value::Null,
            };
            let report = ctx.stamp(json!({
                "checkpoint": "checkpoints/mllm.plck",
                "digest": digest(&vlm)?,
                "base_digest": digest(&base)?,
                "task_id": task.id,
                "val_accuracy": acc(&model, &task)?,
                "chance": 1.0 / task.answer_vocab.len() as f64,
                "text_val_accuracy": text_change,
                "steps": ctx.recipe.finetune.steps,
            }));
            ctx.run.write_json("reports", "finetune.json", &report)?;
            print_json(&report);
        }
        Command::Eval { common, out, ckpt, task, split, k, id } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let id = id.unwrap_or_else(|| stem(&ckpt));
            let c = load_ckpt(&ckpt)?;
            let t = load_task(&task)?;
            let r = evaluate(&Model::new(&c)?, &id, &digest(&c)?, &t, split, k.map(MaskSpec::new), &ctx.eval_opts())?;
            let suffix = k.map_or(String::new(), |k| format!("-k{k}"));
            let name = format!("eval-{id}-{split}{suffix}");
            ctx.run.write_json("reports", &format!("{name}.json"), &r)?;
            ctx.run.write_text("reports", &format!("{name}.csv"), &per_example_csv(&r))?;
            print_json(&json!({ "model_id": r.model_id, "split": r.split, "score": r.score, "n_examples": r.n_examples, "mask_k": r.mask_k }));
        }
        Command::SweepMask { common, out, ckpt, task, split, stride } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let c = load_ckpt(&ckpt)?;
            let t = load_task(&task)?;
            let model = Model::new(&c)?;
            let d = digest(&c)?;
            let profile = mask_sweep(
                &model,
                &SweepRequest {
                    model_id: &d,
                    task_id: &t.id,
                    examples: t.split(split),
                    answer_vocab: &t.answer_vocab,
                    k_values: sweep_k_values(c.config.num_layers, stride.max(1)),
                    seeds: vec![ctx.recipe.seed],
                    workers: ctx.workers,
                },
            )?;
            ctx.run.write_text("profiles", "sweep.csv", &profile.to_csv())?;
            let mut side = profile.sidecar();
            side["split"] = json!(split);
            side["split_digest"] = json!(t.split_digest(split));
            ctx.run.write_json("profiles", "sweep.json", &ctx.stamp(side))?;
            print_json(&json!({ "scores": profile.points, "complete": profile.complete }));
            if !profile.complete {
                bail!("sweep incomplete: {}", profile.failure.unwrap_or_default());
            }
        }
        Command::DetectPlateau { common, out, profile, radius } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let csv = std::fs::read_to_string(&profile).with_context(|| format!("reading {}", profile.display()))?;
            let side_path = profile.with_extension("json");
            let side = if side_path.exists() {
                serde_json::from_slice(&std::fs::read(&side_path)?)?
            } else {
                json!({})
            };
            let p = SweepProfile::from_csv(&csv, &side)?;
            let cfg = &ctx.recipe.pipeline.plateau;
            let outcome = detect_from_profile(&p, cfg)?;
            let report = outcome.report(p.num_layers, cfg);
            let r = radius.unwrap_or(ctx.recipe.pipeline.radius);
            let mut v = serde_json::to_value(&report)?;
            v["k0_candidates"] = json!(k0_candidates(report.k_star, r, p.num_layers));
            v["radius"] = json!(r);
            v["profile_model_id"] = json!(p.model_id);
            ctx.run.write_json("reports", "plateau.json", &ctx.stamp(v.clone()))?;
            print_json(&v);
        }
        Command::Merge { common, out, base, vlm, k0, lambda1, lambda2, subset } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let b = load_ckpt(&base)?;
            let v = load_ckpt(&vlm)?;
            let l = v.config.num_layers;
            let stored = MergeSpec::from_run_config(&ctx.config).ok();
            let pick = |flag: Option<f64>, stored: Option<f64>, name: &str| {
                flag.or(stored).ok_or_else(|| anyhow!("--{name} is required (or merge.{name} in the config)"))
            };
            let start = k0.or(stored.map(|s| s.start)).ok_or_else(|| anyhow!("--k0 is required (or merge.start in the config)"))?;
            let spec = MergeSpec {
                start,
                end: if k0.is_some() { l } else { stored.map_or(l, |s| s.end) },
                lambda1: pick(lambda1, stored.map(|s| s.lambda1), "lambda1")?,
                lambda2: pick(lambda2, stored.map(|s| s.lambda2), "lambda2")?,
                subset: subset.or(stored.map(|s| s.subset)).unwrap_or(ctx.recipe.pipeline.subset),
            };
            let m = merge(&b, &v, &spec)?;
            ctx.run.save_checkpoint("merged.plck", &m)?;
            ctx.run.record_config(&spec.to_run_config())?;
            let report = ctx.stamp(json!({
                "spec": spec,
                "spec_text": spec.to_string(),
                "base_digest": digest(&b)?,
                "vlm_digest": digest(&v)?,
                "merged_digest": digest(&m)?,
                "checkpoint": "checkpoints/merged.plck",
            }));
            ctx.run.write_json("reports", "merge.json", &report)?;
            print_json(&report);
        }
        Command::GridSearch { common, out, base, vlm, task, k0, k_star, radius, lambda1, lambda2, subset } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let b = load_ckpt(&base)?;
            let v = load_ckpt(&vlm)?;
            let t = load_task(&task)?;
            t.check_compatible(&v.config)?;
            let l = v.config.num_layers;
            let candidates = if !k0.is_empty() {
                k0
            } else {
                let ks = k_star.ok_or_else(|| anyhow!("give --k0 or --k-star"))?;
                k0_candidates(ks, radius.unwrap_or(ctx.recipe.pipeline.radius), l)
            };
            let grid = match (lambda1, lambda2) {
                (Some(a), Some(b)) => LambdaGrid::single(a, b),
                (None, None) => ctx.recipe.pipeline.grid.clone(),
                _ => bail!("give both --lambda1 and --lambda2, or neither"),
            };
            let subset = subset.unwrap_or(ctx.recipe.pipeline.subset);
            let n = ctx.recipe.pipeline.val_subsample.clamp(1, t.val.len().max(1));
            let val = &t.val[..n.min(t.val.len())];
            let eval = PrefixCachedEvaluator::new(&b, &v, val, &t.answer_vocab, ctx.workers)?;
            let r = grid_search(l, &candidates, &grid, subset, &eval, ctx.recipe.pipeline.guard_alpha, ctx.workers)?;
            ctx.run.write_text("reports", "grid.csv", &r.to_csv())?;
            let summary = json!({
                "best": r.best,
                "best_score": r.best_score,
                "reference_score": r.reference_score,
                "guard_alpha": r.guard_alpha,
                "comparisons": r.comparisons,
                "k0_candidates": candidates,
                "cells": r.table.len(),
                "val_examples": val.len(),
                "val_digest": t.split_digest(Split::Val),
                "base_digest": digest(&b)?,
                "vlm_digest": digest(&v)?,
            });
            ctx.run.write_json("reports", "grid.json", &ctx.stamp(summary.clone()))?;
            ctx.run.record_config(&r.best.to_run_config())?;
            print_json(&summary);
        }
        Command::Plam { common, out, base, vlm, task, text, radius, subset } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let b = load_ckpt(&base)?;
            let v = load_ckpt(&vlm)?;
            let t = load_task(&task)?;
            let text = text.map(|p| load_task(&p)).transpose()?;
            let mut cfg = ctx.recipe.pipeline.clone();
            if let Some(r) = radius {
                cfg.radius = r;
            }
            if let Some(s) = subset {
                cfg.subset = s;
            }
            let o = plam_pipeline(&b, &v, &t, text.as_ref(), &cfg)?;
            ctx.run.save_checkpoint("merged.plck", &o.merged)?;
            ctx.run.write_text("profiles", "sweep.csv", &o.report.sweep.to_csv())?;
            ctx.run.write_json("profiles", "sweep.json", &o.report.sweep.sidecar())?;
            ctx.run.write_text("reports", "grid.csv", &o.grid.to_csv())?;
            ctx.run.write_json("reports", "plam.json", &ctx.stamp(serde_json::to_value(&o.report)?))?;
            ctx.run.record_config(&o.report.best.to_run_config())?;
            print_json(&json!({
                "k_star": o.report.plateau.k_star,
                "fallback": o.report.plateau.fallback,
                "best": o.report.best.to_string(),
                "vlm": o.report.vlm,
                "merged": o.report.merged,
                "base": o.report.base,
            }));
        }
        Command::ProfileAttention { common, out, ckpt, task, split, index, mode, k, max_new } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let c = load_ckpt(&ckpt)?;
            let t = load_task(&task)?;
            let ex = t.split(split).get(index).ok_or_else(|| anyhow!("{split} has no example {index}"))?;
            let mode = match mode {
                ModeArg::Prefill => MassMode::PrefillIns,
                ModeArg::Decode => MassMode::DecodeRes,
            };
            let p = mass_profile(&Model::new(&c)?, &ex.prompt, mode, &Source::ALL, k.map(MaskSpec::new), max_new)?;
            let name = format!("mass-{}-{split}-{index}", stem(&ckpt));
            ctx.run.write_text("profiles", &format!("{name}.csv"), &p.to_csv())?;
            let mut side = p.sidecar();
            side["model_digest"] = json!(digest(&c)?);
            side["example_id"] = json!(ex.id);
            side["mask_k"] = json!(k);
            ctx.run.write_json("profiles", &format!("{name}.json"), &ctx.stamp(side.clone()))?;
            print_json(&json!({ "csv": format!("profiles/{name}.csv"), "per_layer": p.sources.iter().map(|s| (s.source.to_string(), s.per_layer.clone())).collect::<Vec<_>>() }));
        }
        Command::Heatmap { common, out, ckpt, task, split, index, from_layer, scale } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let c = load_ckpt(&ckpt)?;
            let t = load_task(&task)?;
            let TaskKind::Grounded { grid } = t.kind else {
                bail!("heatmaps need a grounded task");
            };
            let ex = t.split(split).get(index).ok_or_else(|| anyhow!("{split} has no example {index}"))?;
            let l = c.config.num_layers;
            let from = from_layer.unwrap_or(l - l / 3 + 1).clamp(1, l);
            let h = grounded_heatmap(&Model::new(&c)?, ex, &grid, from..l + 1)?;
            let name = format!("heatmap-{}-{split}-{index}", stem(&ckpt));
            ctx.run.write_text("profiles", &format!("{name}.csv"), &h.to_csv())?;
            ctx.run.write_text("profiles", &format!("{name}.pgm"), &h.to_pgm(scale.max(1)))?;
            let (r, col) = h.argmax_cell();
            let v = json!({
                "model_digest": digest(&c)?,
                "example_id": ex.id,
                "layers": [from, l],
                "argmax_cell": [r, col],
                "query_cell": ex.query_cell,
                "hit": ex.query_cell == Some((r, col)),
                "values": h.values,
            });
            ctx.run.write_json("profiles", &format!("{name}.json"), &ctx.stamp(v.clone()))?;
            print_json(&v);
        }
        Command::Compare { common, out, reports, baseline } => {
            let ctx = Ctx::open(&common, &out.out)?;
            let rs = reports
                .iter()
                .map(|p| -> Result<EvalReport> {
                    Ok(serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare(&rs, &baseline)?;
            ctx.run.write_text("reports", "compare.csv", &cmp.to_csv())?;
            ctx.run.write_json("reports", "compare.json", &cmp)?;
            print_json(&serde_json::to_value(&cmp)?);
        }
        Command::CkptDiff { a, b, out } => {
            let d = ckpt_io::diff(&load_ckpt(&a)?, &load_ckpt(&b)?)?;
            let v = json!({
                "a_digest": digest(&load_ckpt(&a)?)?,
                "b_digest": digest(&load_ckpt(&b)?)?,
                "equal_bitwise": d.equal_bitwise,
                "entries": d.entries,
            });
            if let Some(out) = out {
                RunDir::create(&out)?.write_json("reports", "ckpt-diff.json", &v)?;
            }
            print_json(&v);
        }
    }
    Ok(())
}

/// Saves the trained checkpoint, or the last good one before failing.
fn save_or_last_good(ctx: &Ctx, result: plateau_lab::Result<Checkpoint>, file: &str) -> Result<Checkpoint> {
    match result {
        Ok(c) => {
            ctx.run.save_checkpoint(file, &c)?;
            Ok(c)
        }
        Err(plateau_lab::Error::Diverged { step, last_good }) => {
            let p = ctx.run.save_checkpoint(&format!("last-good-{file}"), &last_good)?;
            Err(anyhow!(plateau_lab::Error::Diverged { step, last_good }))
                .with_context(|| format!("last good checkpoint saved to {}", p.display()))
        }
        Err(e) => Err(e.into()),
    }
}

fn per_example_csv(r: &EvalReport) -> String {
    let mut out = String::from("id,predicted,gold,correct\n");
    for e in r.per_example.iter().flatten() {
        out.push_str(&format!("{},{},{},{}\n", e.id, e.predicted, e.gold, e.correct));
    }
    out
}
