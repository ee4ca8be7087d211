//! Command-line front end for the cross-modal pre-training pipeline.
//!
//! One binary, six subcommands: `gen` writes synthetic scene bundles,
//! `pretrain` fits the point encoder and writes a checkpoint plus a
//! training log, `eval-zero` scores a checkpoint against the text bank
//! without any 3D labels, `eval-probe` fine-tunes a linear probe at a
//! label fraction, and `gradcheck` / `losscheck` verify analytic gradients
//! and stabilized loss values against independent references.
//!
//! Every command is deterministic given its config file and seed, and all
//! file outputs land under `--out`. The `CLIP2SCENE_THREADS` environment
//! variable caps worker threads for scene generation (0 or unset means one
//! worker per available core).

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use clip2scene::config::{
    self, data_dir, eval_include_absent, probe_config_from, probe_holdout, scene_config_from,
    scene_count, train_config_from, FlatConfig,
};
use clip2scene::eval::{
    export_error_map, finetune_probe, miou_with, predict_zero_shot, write_report_json,
};
use clip2scene::gradcheck::{
    check_kl, check_model_backward, check_semantic_infonce, check_stcr, fusion_convexity,
    oracle_gap_infonce, oracle_gap_kl, oracle_gap_stcr,
};
use clip2scene::model::{load_checkpoint, save_checkpoint};
use clip2scene::synth::{generate_scene, stitched_with_labels, SceneBundle};
use clip2scene::trainer::pretrain;
use clip2scene::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const GRADCHECK_TOLERANCE: f64 = 1e-6;
const GRADCHECK_STEP: f64 = 1e-6;
const GRADCHECK_TRIALS: u64 = 25;
const LOSSCHECK_TOLERANCE: f64 = 1e-10;
const CONVEXITY_TOLERANCE: f64 = 1e-12;
const LOSSCHECK_TRIALS: u64 = 250;

#[derive(Parser, Debug)]
#[command(
    name = "clip2scene",
    version,
    about = "Cross-modal pre-training pipeline: synthetic scenes, contrastive training, evaluation, numeric self-checks",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scene bundles under the output directory.
    Gen(IoArgs),
    /// Pre-train the point encoder; writes ckpt.f32 and train_log.csv.
    Pretrain(IoArgs),
    /// Score a checkpoint against the text bank with no 3D labels.
    EvalZero(CkptArgs),
    /// Fine-tune a linear probe from a checkpoint at a label fraction.
    EvalProbe(ProbeArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(CheckArgs),
    /// Compare stabilized losses with brute-force reference evaluations.
    Losscheck(CheckArgs),
}

#[derive(Args, Debug)]
struct IoArgs {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Suppress informational output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct CkptArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    ckpt: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    with_ckpt: CkptArgs,
    /// Overrides the labeled fraction from the config file.
    #[arg(long, value_name = "F")]
    fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Base seed for the random instances.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Suppress informational output.
    #[arg(long)]
    quiet: bool,
}

/// Parses `args` (including the program name) and runs one command,
/// returning the process exit code: 0 on success, 1 on a validation or
/// runtime failure, 2 on bad usage.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::EvalZero(a) => cmd_eval_zero(a),
        Command::EvalProbe(a) => cmd_eval_probe(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Losscheck(a) => cmd_losscheck(a),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            EXIT_FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<FlatConfig> {
    let cfg = FlatConfig::load(path)?;
    cfg.check_known(config::ALL_KEYS)?;
    Ok(cfg)
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn scene_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("scene_{index:03}"))
}

/// Number of worker threads for `jobs` independent tasks, honoring
/// `CLIP2SCENE_THREADS` (0 or unset = one per available core).
fn thread_budget(jobs: usize) -> Result<usize> {
    let auto = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = match std::env::var("CLIP2SCENE_THREADS") {
        Ok(raw) => {
            let n: usize = raw.trim().parse().map_err(|_| {
                Error::validation(format!(
                    "CLIP2SCENE_THREADS must be a non-negative integer, got {raw:?}"
                ))
            })?;
            if n == 0 {
                auto
            } else {
                n
            }
        }
        Err(std::env::VarError::NotPresent) => auto,
        Err(e) => {
            return Err(Error::validation(format!("CLIP2SCENE_THREADS: {e}")));
        }
    };
    Ok(cap.min(jobs).max(1))
}

/// Loads every `scene_*` bundle directory under `dir`, sorted by name.
fn load_bundles(dir: &Path) -> Result<Vec<SceneBundle>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .map(|n| n.to_string_lossy().starts_with("scene_"))
                    .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::validation(format!(
            "no scene_* bundle directories under {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| SceneBundle::load(p)).collect()
}

fn bundles_from_config(cfg: &FlatConfig) -> Result<Vec<SceneBundle>> {
    let dir = data_dir(cfg).ok_or_else(|| {
        Error::config("data.dir must name a directory of scene bundles for this command")
    })?;
    load_bundles(&dir)
}

fn cmd_gen(args: &IoArgs) -> Result<i32> {
    let cfg = load_config(&args.config)?;
    let base = scene_config_from(&cfg, args.seed)?;
    let count = scene_count(&cfg)?;
    ensure_out_dir(&args.out)?;
    let threads = thread_budget(count)?;

    // Each scene draws from its own derived seed, so the split across
    // workers cannot change the bytes written.
    let jobs: Vec<(usize, clip2scene::synth::SceneConfig)> = (0..count)
        .map(|i| {
            let mut sc = base.clone();
            sc.seed = base.seed.wrapping_add(i as u64);
            (i, sc)
        })
        .collect();
    let chunk_len = count.div_ceil(threads);
    let out = args.out.as_path();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for chunk in jobs.chunks(chunk_len) {
            handles.push(scope.spawn(move || -> Result<()> {
                for (i, sc) in chunk {
                    let bundle = generate_scene(sc)?;
                    bundle.save(&scene_dir(out, *i))?;
                }
                Ok(())
            }));
        }
        for handle in handles {
            handle.join().expect("scene worker does not panic")?;
        }
        Ok(())
    })?;
    if !args.quiet {
        println!(
            "wrote {count} scene bundles to {} using {threads} thread(s)",
            args.out.display()
        );
    }
    Ok(EXIT_OK)
}

fn cmd_pretrain(args: &IoArgs) -> Result<i32> {
    let cfg = load_config(&args.config)?;
    let scenes = bundles_from_config(&cfg)?;
    let train_cfg = train_config_from(&cfg, args.seed)?;
    let (params, mut log) = pretrain(&train_cfg, &scenes)?;
    ensure_out_dir(&args.out)?;
    let ckpt_path = args.out.join("ckpt.f32");
    save_checkpoint(&ckpt_path, &params, train_cfg.seed, train_cfg.epochs)?;
    log.checkpoint = Some("ckpt.f32".to_string());
    log.write_csv(&args.out.join("train_log.csv"))?;
    if !args.quiet {
        if let Some(last) = log.epochs.last() {
            println!(
                "epoch {}: loss {:.6} (contrastive {:.6}, consistency {:.6}, self fraction {:.3})",
                last.epoch, last.loss, last.loss_s, last.loss_t, last.self_frac
            );
        }
        println!("wrote {} and train_log.csv", ckpt_path.display());
    }
    Ok(EXIT_OK)
}

fn cmd_eval_zero(args: &CkptArgs) -> Result<i32> {
    let cfg = load_config(&args.io.config)?;
    let scenes = bundles_from_config(&cfg)?;
    let include_absent = eval_include_absent(&cfg)?;
    let (params, _meta) = load_checkpoint(&args.ckpt)?;
    ensure_out_dir(&args.io.out)?;

    let num_classes = scenes[0].num_classes();
    let names = scenes[0].text_bank.class_names.clone();
    let mut all_preds = Vec::new();
    let mut all_gts = Vec::new();
    for (i, bundle) in scenes.iter().enumerate() {
        let (cloud, labels) = stitched_with_labels(bundle)?;
        let preds = predict_zero_shot(&params, &cloud.points.view(), &bundle.text_bank);
        let gts: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let map_path = args.io.out.join(format!("error_map_{i:03}.txt"));
        let file = fs::File::create(&map_path).map_err(|e| Error::io(&map_path, e))?;
        export_error_map(&mut BufWriter::new(file), &preds, &gts, &cloud.points.view())?;
        all_preds.extend(preds);
        all_gts.extend(gts);
    }
    let report = miou_with(&all_preds, &all_gts, num_classes, include_absent)?;
    write_report_json(&args.io.out.join("eval_report.json"), &report, &names)?;
    if !args.io.quiet {
        println!(
            "annotation-free mIoU {:.6} over {} points in {} scene(s)",
            report.miou,
            report.point_count,
            scenes.len()
        );
    }
    Ok(EXIT_OK)
}

fn cmd_eval_probe(args: &ProbeArgs) -> Result<i32> {
    let io = &args.with_ckpt.io;
    let cfg = load_config(&io.config)?;
    let scenes = bundles_from_config(&cfg)?;
    let (params, _meta) = load_checkpoint(&args.with_ckpt.ckpt)?;
    let holdout = match probe_holdout(&cfg)? {
        Some(h) => h,
        None => scenes.len().div_ceil(2),
    };
    if holdout == 0 || holdout >= scenes.len() {
        return Err(Error::validation(format!(
            "probe holdout must leave at least one scene on each side; got {holdout} of {}",
            scenes.len()
        )));
    }
    let (train_scenes, held_scenes) = scenes.split_at(scenes.len() - holdout);
    let probe_cfg = probe_config_from(&cfg, args.fraction, io.seed)?;
    let result = finetune_probe(&params, train_scenes, held_scenes, &probe_cfg)?;
    ensure_out_dir(&io.out)?;
    let names = scenes[0].text_bank.class_names.clone();
    write_report_json(&io.out.join("probe_train_report.json"), &result.train, &names)?;
    write_report_json(&io.out.join("probe_eval_report.json"), &result.eval, &names)?;
    if !io.quiet {
        println!(
            "probe mIoU {:.6} on {} held-out scene(s), {:.6} on train, {} labeled points",
            result.eval.miou,
            held_scenes.len(),
            result.train.miou,
            result.labeled_points
        );
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: &CheckArgs) -> Result<i32> {
    let targets: [(&str, fn(u64) -> f64); 5] = [
        ("semantic_infonce", |s| {
            check_semantic_infonce(s, GRADCHECK_STEP)
        }),
        ("stcr_loss[stop_gradient]", |s| {
            check_stcr(s, GRADCHECK_STEP, true)
        }),
        ("stcr_loss[full]", |s| check_stcr(s, GRADCHECK_STEP, false)),
        ("kl_distill_loss", |s| check_kl(s, GRADCHECK_STEP)),
        ("model_backward", |s| {
            check_model_backward(s, GRADCHECK_STEP)
        }),
    ];
    let mut worst_overall = 0.0f64;
    for (name, check) in targets {
        let mut worst = 0.0f64;
        for t in 0..GRADCHECK_TRIALS {
            worst = worst.max(check(args.seed.wrapping_add(t)));
        }
        println!("gradcheck {name}: max rel error {worst:.3e} over {GRADCHECK_TRIALS} instances");
        worst_overall = worst_overall.max(worst);
    }
    if worst_overall > GRADCHECK_TOLERANCE {
        eprintln!("error: gradient check exceeded tolerance {GRADCHECK_TOLERANCE:e}");
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}

fn cmd_losscheck(args: &CheckArgs) -> Result<i32> {
    let targets: [(&str, fn(u64) -> f64); 3] = [
        ("semantic_infonce", oracle_gap_infonce),
        ("stcr_loss", oracle_gap_stcr),
        ("kl_distill_loss", oracle_gap_kl),
    ];
    let mut failed = false;
    for (name, gap) in targets {
        let mut worst = 0.0f64;
        for t in 0..LOSSCHECK_TRIALS {
            worst = worst.max(gap(args.seed.wrapping_add(t)));
        }
        println!("losscheck {name}: max oracle gap {worst:.3e} over {LOSSCHECK_TRIALS} instances");
        failed |= worst > LOSSCHECK_TOLERANCE;
    }
    let mut worst_sum = 0.0f64;
    let mut min_weight = f64::INFINITY;
    for t in 0..LOSSCHECK_TRIALS {
        let (gap, min_w) = fusion_convexity(args.seed.wrapping_add(t));
        worst_sum = worst_sum.max(gap);
        min_weight = min_weight.min(min_w);
    }
    println!(
        "losscheck fusion_convexity: max |sum - 1| {worst_sum:.3e}, min weight {min_weight:.3e} over {LOSSCHECK_TRIALS} instances"
    );
    failed |= worst_sum > CONVEXITY_TOLERANCE || min_weight <= 0.0;
    if failed {
        eprintln!("error: loss check exceeded tolerance");
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}
