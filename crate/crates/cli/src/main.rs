//! `g3d`: gradient checks, caption masking, evaluation, the toy decoupling
//! run, the IoU oracle and wireframe overlays.
//!
//! Exit status: 0 on success, 1 when a check or input validation fails,
//! 2 on a usage error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use g3d_core::checks::{gradcheck_suite, iou_oracle, GradScope, GRAD_TOLERANCE};
use g3d_core::eval::{evaluate, render_json, render_text, score_samples, ImageIndex};
use g3d_core::io::{
    caption_records, eval_samples, load_annotations, load_calib_dir, load_config, load_embeddings,
    load_predictions, save_checkpoint, to_jsonl, write_atomic, Checkpoint, RunConfig, CONFIG_ENV,
};
use g3d_core::lexical::{lca_pipeline, MaskPolicy};
use g3d_core::render::{overlay, render_svg};
use g3d_core::toy::{run_toy, DECOUPLING_MIN_GAP};
use serde_json::json;

#[derive(Parser)]
#[command(name = "g3d", version, about = "Monocular 3D grounding toolkit")]
struct Cli {
    /// Run configuration (TOML); flags given explicitly take precedence.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Directory for machine-readable reports.
    #[arg(long, global = true, default_value = ".")]
    report_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks per op.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = clap::builder::PossibleValuesParser::new(GradScope::VARIANTS))]
        scope: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Masks high-certainty caption words.
    Mask {
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Probability of masking a record; defaults to the config policy.
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        /// Expected embedding width.
        #[arg(long)]
        dim: Option<usize>,
        /// Masked captions (JSON lines); the audit log goes beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores predictions against annotations.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        calib_dir: Option<PathBuf>,
    },
    /// Trains the toy model and probes its decoupled streams.
    Toy {
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compares exact 3D IoU with Monte Carlo estimates on random pairs.
    IouOracle {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Writes an SVG wireframe of a sample's ground-truth and predicted boxes.
    Render {
        #[arg(long)]
        sample: String,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        calib_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1242)]
        width: u32,
        #[arg(long, default_value_t = 375)]
        height: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flag value, else the config entry, else an error naming the flag.
fn pick(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .with_context(|| format!("--{name} is required (or set it in the config)"))
}

fn write_report(dir: &Path, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

fn gradcheck(cfg: &RunConfig, report_dir: &Path, scope: &str, seed: Option<u64>) -> Result<bool> {
    let scope: GradScope = scope.parse()?;
    let seed = seed.unwrap_or(cfg.seed);
    let report = gradcheck_suite(scope, seed)?;
    let mut ok = true;
    for c in &report {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        ok &= c.passed();
        println!(
            "{:<9} {:<44} {:>10.3e} {:>5}  {verdict}",
            c.scope.to_string(),
            c.op,
            c.max_rel_error,
            c.checked
        );
    }
    let failed = report.iter().filter(|c| !c.passed()).count();
    println!("{} ops, {failed} above {GRAD_TOLERANCE:e}", report.len());
    let path = write_report(
        report_dir,
        "gradcheck.json",
        &json!({ "scope": scope, "seed": seed, "tolerance": GRAD_TOLERANCE, "ops": report }),
    )?;
    println!("report: {}", path.display());
    Ok(ok)
}

#[allow(clippy::too_many_arguments)]
fn mask(
    cfg: &RunConfig,
    embeddings: Option<PathBuf>,
    annotations: Option<PathBuf>,
    p: Option<f64>,
    seed: Option<u64>,
    epoch: u64,
    dim: Option<usize>,
    out: &Path,
) -> Result<bool> {
    let emb_path = pick(embeddings, &cfg.paths.embeddings, "embeddings")?;
    let ann_path = pick(annotations, &cfg.paths.annotations, "annotations")?;
    let emb = load_embeddings(&emb_path)?;
    if let Some(d) = dim {
        emb.expect_dim(d, &emb_path)?;
    }
    let anns = load_annotations(&ann_path)?;
    let records = caption_records(&anns, &emb)?;
    let policy = MaskPolicy {
        probability: p.unwrap_or(cfg.lca.probability),
        ..cfg.lca
    };
    let (masked, audit) = lca_pipeline(&records, &policy, seed.unwrap_or(cfg.seed), epoch)?;
    let captions: Vec<serde_json::Value> = masked
        .iter()
        .map(|m| json!({ "sample_id": m.sample_id, "caption": m.tokens.join(" "), "masked": m.masked }))
        .collect();
    write_atomic(out, to_jsonl(&captions)?.as_bytes())?;
    let audit_path = out.with_extension("audit.jsonl");
    write_atomic(&audit_path, to_jsonl(&audit)?.as_bytes())?;
    let n = masked.iter().filter(|m| m.masked).count();
    println!(
        "{n} of {} captions masked (p = {})",
        masked.len(),
        policy.probability
    );
    println!(
        "captions: {}\naudit: {}",
        out.display(),
        audit_path.display()
    );
    Ok(true)
}

fn eval(
    cfg: &RunConfig,
    report_dir: &Path,
    predictions: Option<PathBuf>,
    annotations: Option<PathBuf>,
    calib_dir: Option<PathBuf>,
) -> Result<bool> {
    let preds = load_predictions(&pick(predictions, &cfg.paths.predictions, "predictions")?)?;
    let anns = load_annotations(&pick(annotations, &cfg.paths.annotations, "annotations")?)?;
    let calib_dir = calib_dir.or_else(|| cfg.paths.calib_dir.clone());
    let samples = eval_samples(&anns, &preds, calib_dir.as_deref())?;
    let table = evaluate(&samples)?;
    let scored = score_samples(&samples, &ImageIndex::from_samples(&samples))?;
    print!("{}", render_text(&table));
    let path = write_report(
        report_dir,
        "eval.json",
        &json!({ "buckets": render_json(&table), "samples": scored }),
    )?;
    println!("report: {}", path.display());
    Ok(true)
}

fn toy(cfg: &RunConfig, report_dir: &Path, seeds: Vec<u64>, steps: Option<usize>) -> Result<bool> {
    let mut toy_cfg = cfg.toy.clone();
    if let Some(s) = steps {
        toy_cfg.steps = s;
    }
    toy_cfg.validate()?;
    let seeds = if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds
    };
    let mut runs = Vec::new();
    for &seed in &seeds {
        let (run, out) = run_toy(&toy_cfg, seed)?;
        println!(
            "seed {seed}: loss {:.3} -> {:.3}, probe R² matched {:.3} crossed {:.3} (gap {:.3}), untrained gap {:.3}",
            run.initial_loss,
            run.final_loss,
            run.trained.matched(),
            run.trained.crossed(),
            run.trained.gap(),
            run.untrained.gap()
        );
        std::fs::create_dir_all(report_dir)?;
        save_checkpoint(
            &report_dir.join(format!("toy_seed{seed}.ckpt.json")),
            &Checkpoint::from_tree(&out.trained, "toy"),
        )?;
        runs.push(run);
    }
    let mean = |f: &dyn Fn(&g3d_core::toy::ToyRun) -> f64| {
        runs.iter().map(f).sum::<f64>() / runs.len() as f64
    };
    let gap = mean(&|r| r.trained.gap());
    let ok = gap >= DECOUPLING_MIN_GAP;
    println!(
        "mean gap {gap:.3} ({} {DECOUPLING_MIN_GAP}), mean untrained gap {:.3}",
        if ok { ">=" } else { "<" },
        mean(&|r| r.untrained.gap())
    );
    let path = write_report(
        report_dir,
        "toy.json",
        &json!({ "config": toy_cfg, "mean_gap": gap, "passed": ok, "runs": runs }),
    )?;
    println!("report: {}", path.display());
    Ok(ok)
}

fn oracle(
    cfg: &RunConfig,
    report_dir: &Path,
    n: usize,
    samples: usize,
    seed: Option<u64>,
) -> Result<bool> {
    let seed = seed.unwrap_or(cfg.seed);
    let report = iou_oracle(n, samples, seed)?;
    let failures = report.failures();
    println!(
        "{n} pairs, {samples} samples each: max deviation {:.5}, {failures} outside tolerance",
        report.max_deviation()
    );
    let path = write_report(
        report_dir,
        "iou_oracle.json",
        &json!({ "seed": seed, "failures": failures, "max_deviation": report.max_deviation(), "report": report }),
    )?;
    println!("report: {}", path.display());
    Ok(failures == 0)
}

#[allow(clippy::too_many_arguments)]
fn render(
    cfg: &RunConfig,
    sample: &str,
    annotations: Option<PathBuf>,
    predictions: Option<PathBuf>,
    calib_dir: Option<PathBuf>,
    width: u32,
    height: u32,
    out: &Path,
) -> Result<bool> {
    let anns = load_annotations(&pick(annotations, &cfg.paths.annotations, "annotations")?)?;
    let ann = anns
        .iter()
        .find(|a| a.sample_id == sample)
        .with_context(|| format!("sample {sample} is not in the annotations"))?;
    let dir = pick(calib_dir, &cfg.paths.calib_dir, "calib-dir")?;
    let calib = load_calib_dir(&dir, &ann.calib_ref)?;
    let mut overlays = vec![overlay(
        &ann.gt_box3d,
        &calib,
        &format!("{sample} gt"),
        "#2ca02c",
    )?];
    if let Some(p) = predictions.or_else(|| cfg.paths.predictions.clone()) {
        let preds: HashMap<String, _> = load_predictions(&p)?
            .into_iter()
            .map(|r| (r.sample_id.clone(), r))
            .collect();
        let Some(pred) = preds.get(sample) else {
            bail!("sample {sample} has no prediction in {}", p.display());
        };
        let b = pred.to_box3d(Some(&calib))?;
        overlays.push(overlay(&b, &calib, &format!("{sample} pred"), "#d62728")?);
    }
    write_atomic(out, render_svg(&overlays, width, height).as_bytes())?;
    println!("{} boxes drawn: {}", overlays.len(), out.display());
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let dir = &cli.report_dir;
    match cli.command {
        Command::Gradcheck { scope, seed } => gradcheck(&cfg, dir, &scope, seed),
        Command::Mask {
            embeddings,
            annotations,
            p,
            seed,
            epoch,
            dim,
            out,
        } => mask(&cfg, embeddings, annotations, p, seed, epoch, dim, &out),
        Command::Eval {
            predictions,
            annotations,
            calib_dir,
        } => eval(&cfg, dir, predictions, annotations, calib_dir),
        Command::Toy { seeds, steps } => toy(&cfg, dir, seeds, steps),
        Command::IouOracle { n, samples, seed } => oracle(&cfg, dir, n, samples, seed),
        Command::Render {
            sample,
            annotations,
            predictions,
            calib_dir,
            width,
            height,
            out,
        } => render(
            &cfg,
            &sample,
            annotations,
            predictions,
            calib_dir,
            width,
            height,
            &out,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
