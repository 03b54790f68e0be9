//! `erasure`: command-line entry point for data generation, training, removal and evaluation.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use erasure_core::denoiser::{load_checkpoint, DiffusionRemover};
use erasure_core::evalbench::run_benchmark;
use erasure_core::kgp::{plan, remove_long};
use erasure_core::maskops::{diff_mask, side_effect_mask};
use erasure_core::relation::FrozenPatchEncoder;
use erasure_core::synthdata::{make_dataset, SpecDistribution};
use erasure_core::trainer::{load_training_set, train, GradCheckConfig, TeacherSource, ToyProblem};
use erasure_core::video::{load_clip, load_mask, save_clip, save_mask, ClipManifest, ManifestEntry};
use serde_json::json;

use config::{RunConfig, TeacherKind};

#[derive(Parser, Debug)]
#[command(name = "erasure", version, about = "Video object and side-effect removal toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// TOML run configuration with `[dit]`, `[train]`, `[kgp]`, `[teacher]` and `[eval]` sections.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set train.lambda=0.0`. Repeatable; wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Seed for every random choice of the subcommand (overrides `train.seed` and `kgp.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic paired dataset and its manifest.
    GenData(GenDataArgs),
    /// Write the difference and side-effect masks of one paired clip.
    DeriveMasks(DeriveMasksArgs),
    /// Train a denoiser on a paired manifest.
    Train(TrainArgs),
    /// Remove the masked object (and its effects) from clips with a trained checkpoint.
    Remove(RemoveArgs),
    /// Print the keyframe schedule and window plan for a clip length.
    PlanWindows(PlanArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a small 64-bit model.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Effects {
    /// Shadows only.
    Shadows,
    /// Shadows, reflections and effect-free clips.
    Mixed,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory; `manifest.json` is written inside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    clips: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Frame size as `HxW`.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, value_enum, default_value_t = Effects::Shadows)]
    effects: Effects,
}

#[derive(Args, Debug)]
struct DeriveMasksArgs {
    /// Input frame directory.
    #[arg(long)]
    ori: PathBuf,
    /// Ground-truth frame directory.
    #[arg(long)]
    gt: PathBuf,
    /// Object mask directory.
    #[arg(long)]
    obj_mask: PathBuf,
    /// Masks go to `<out>/diff` and `<out>/side_effect`.
    #[arg(long)]
    out: PathBuf,
    /// Difference threshold (defaults to `eval.delta`).
    #[arg(long)]
    delta: Option<f32>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest of paired clips.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written at the end (and periodically if `train.checkpoint_every` > 0).
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss log, one JSON object per line [default: `<out>.metrics.jsonl`].
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RemoveArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Process every entry of this manifest instead of a single clip.
    #[arg(long, conflicts_with_all = ["input", "mask"])]
    manifest: Option<PathBuf>,
    /// Input frame directory of a single clip.
    #[arg(long = "in", requires = "mask")]
    input: Option<PathBuf>,
    /// Object mask directory of a single clip.
    #[arg(long, requires = "input")]
    mask: Option<PathBuf>,
    /// Output directory. With `--manifest`, clips go to `<out>/<clip_id>/frames` and a
    /// `manifest.json` indexing them is written.
    #[arg(long)]
    out: PathBuf,
    /// Window length (defaults to `kgp.window`).
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    frames: usize,
    /// Window length (defaults to `kgp.window`).
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Manifest of predictions; frames are read from each entry's `input`.
    #[arg(long)]
    pred: PathBuf,
    /// Manifest of ground truth; frames are read from `gt`, or `input` when absent.
    #[arg(long)]
    gt: PathBuf,
    /// Also write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 50)]
    probes: usize,
    /// Relation loss weight (defaults to `train.lambda`).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<erasure_core::Error>()
                .map(error_kind)
                .unwrap_or("error");
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let body = json!({ "error": { "kind": kind, "message": e.to_string(), "causes": chain } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &erasure_core::Error) -> &'static str {
    use erasure_core::Error as E;
    match e {
        E::Io { .. } => "io",
        E::Image { .. } => "image",
        E::Validation(_) => "validation",
        E::ZeroNormToken { .. } => "zero_norm_token",
        E::Divergence { .. } => "divergence",
        E::GradientCheck { .. } => "gradient_check",
        E::Checkpoint(_) => "checkpoint",
        E::Json(_) => "json",
        E::Tensor(_) => "tensor",
    }
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((dim(h)?, dim(w)?))
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
        overrides.push(format!("kgp.seed={seed}"));
    }
    overrides.extend(cli.set.iter().cloned());
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    log::info!("resolved configuration:\n{}", cfg.to_toml()?);
    Ok(cfg)
}

fn emit(cli: &Cli, value: serde_json::Value, human: impl FnOnce() -> String) -> Result<()> {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        println!("{}", human());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::DeriveMasks(a) => derive_masks(cli, &cfg, a),
        Command::Train(a) => train_cmd(cli, &cfg, a),
        Command::Remove(a) => remove_cmd(cli, &cfg, a),
        Command::PlanWindows(a) => plan_cmd(cli, &cfg, a),
        Command::Eval(a) => eval_cmd(cli, &cfg, a),
        Command::GradCheck(a) => grad_check(cli, &cfg, a),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let res = a.size;
    let dist = match a.effects {
        Effects::Shadows => SpecDistribution::shadows(a.frames, res),
        Effects::Mixed => SpecDistribution::new(a.frames, res),
    };
    let seed = cli.seed.unwrap_or(0);
    let manifest = make_dataset(a.clips, &dist, seed, &a.out)?;
    let path = a.out.join("manifest.json");
    emit(
        cli,
        json!({ "manifest": path, "clips": manifest.entries.len(), "seed": seed }),
        || format!("wrote {} clips, manifest {}", manifest.entries.len(), path.display()),
    )
}

fn derive_masks(cli: &Cli, cfg: &RunConfig, a: &DeriveMasksArgs) -> Result<()> {
    let delta = a.delta.unwrap_or(cfg.eval.delta);
    let (v_ori, _) = load_clip(&a.ori)?;
    let (v_gt, _) = load_clip(&a.gt)?;
    let m_obj = load_mask(&a.obj_mask)?;
    let m_diff = diff_mask(&v_ori, &v_gt, delta)?;
    let m_se = side_effect_mask(&m_diff, &m_obj)?;
    save_mask(&m_diff, a.out.join("diff"))?;
    save_mask(&m_se, a.out.join("side_effect"))?;
    let (diff, se) = (m_diff.count(), m_se.count());
    emit(
        cli,
        json!({ "delta": delta, "out": a.out, "diff_pixels": diff, "side_effect_pixels": se }),
        || format!("{diff} difference and {se} side-effect pixels, masks under {}", a.out.display()),
    )
}

fn train_cmd(cli: &Cli, cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let manifest = ClipManifest::load(&a.data)?;
    manifest.validate()?;
    let t = &cfg.teacher;
    let encoder;
    let source = match t.kind {
        TeacherKind::FrozenRandom => {
            encoder = FrozenPatchEncoder::new(t.patch, t.dim, t.seed)?;
            TeacherSource::Encoder(&encoder)
        }
        TeacherKind::External => TeacherSource::External(
            t.dir
                .clone()
                .context("teacher.kind = \"external\" needs teacher.dir")?,
        ),
    };
    let data = load_training_set(&manifest, &source)?;
    log::info!("training on {} clips", data.len());
    let metrics = a.metrics.clone().unwrap_or_else(|| {
        let mut name = a.out.clone().into_os_string();
        name.push(".metrics.jsonl");
        PathBuf::from(name)
    });
    let outcome = train(&data, &cfg.dit, &cfg.train, &a.out, Some(&metrics))?;
    let last = outcome.metrics.last().copied();
    emit(
        cli,
        json!({ "checkpoint": outcome.checkpoint, "steps": outcome.metrics.len(), "final": last }),
        || match last {
            Some(m) => format!(
                "trained {} steps (flow {:.5}, relation {:.5}), checkpoint {}",
                m.step,
                m.flow,
                m.oird,
                outcome.checkpoint.display()
            ),
            None => format!("no steps run, checkpoint {}", outcome.checkpoint.display()),
        },
    )
}

fn remove_one(
    remover: &DiffusionRemover,
    window: usize,
    seed: u64,
    input: &Path,
    mask: &Path,
    out: &Path,
) -> Result<usize> {
    let (v_ori, _) = load_clip(input)?;
    let m_obj = load_mask(mask)?;
    let v = remove_long(remover, &v_ori, &m_obj, window, seed)?;
    save_clip(&v, out)?;
    Ok(v.frames())
}

fn remove_cmd(cli: &Cli, cfg: &RunConfig, a: &RemoveArgs) -> Result<()> {
    let (model, _vs) = load_checkpoint(&a.ckpt, DType::F32, &Device::Cpu)?.into_model()?;
    let remover = DiffusionRemover::new(model, cfg.kgp.sample_steps);
    let window = a.window.unwrap_or(cfg.kgp.window);
    let seed = cfg.kgp.seed;
    match (&a.manifest, &a.input, &a.mask) {
        (Some(m), None, None) => {
            let manifest = ClipManifest::load(m)?;
            let mut entries = Vec::new();
            for e in &manifest.entries {
                let id = e.clip_id();
                let out = a.out.join(&id).join("frames");
                let frames = remove_one(&remover, window, seed, &e.input, &e.mask, &out)?;
                log::info!("removed {id} ({frames} frames)");
                entries.push(ManifestEntry {
                    id: Some(id),
                    input: out,
                    gt: None,
                    mask: e.mask.clone(),
                    frames,
                });
            }
            let n = entries.len();
            let path = a.out.join("manifest.json");
            ClipManifest::new(entries).save(&path)?;
            emit(cli, json!({ "manifest": path, "clips": n }), || {
                format!("removed {n} clips, manifest {}", path.display())
            })
        }
        (None, Some(input), Some(mask)) => {
            let frames = remove_one(&remover, window, seed, input, mask, &a.out)?;
            emit(cli, json!({ "out": a.out, "frames": frames }), || {
                format!("wrote {frames} frames to {}", a.out.display())
            })
        }
        _ => bail!("pass either --manifest or both --input and --mask"),
    }
}

fn plan_cmd(cli: &Cli, cfg: &RunConfig, a: &PlanArgs) -> Result<()> {
    let window = a.window.unwrap_or(cfg.kgp.window);
    let (schedule, windows) = plan(a.frames, window)?;
    let value = json!({
        "frames": a.frames,
        "window": window,
        "k": schedule.stride,
        "keyframes": schedule.keyframes,
        "windows": windows.windows,
        "overlaps": windows.overlaps,
    });
    emit(cli, value, || {
        let spans: Vec<String> = windows
            .windows
            .iter()
            .map(|w| format!("[{}, {})", w.start, w.end))
            .collect();
        format!(
            "k = {}, {} keyframes, {} windows: {}",
            schedule.stride,
            schedule.keyframes.len(),
            spans.len(),
            spans.join(" ")
        )
    })
}

fn eval_cmd(cli: &Cli, cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let pred = ClipManifest::load(&a.pred)?;
    let gt = ClipManifest::load(&a.gt)?;
    let report = run_benchmark(&pred, &gt, &cfg.eval)?;
    let text = report.to_json()?;
    if let Some(path) = &a.out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    let agg = &report.aggregate;
    emit(cli, serde_json::from_str(&text)?, || {
        let region = agg
            .psnr_diff_region
            .map(|p| format!(", diff-region PSNR {p:.3} dB"))
            .unwrap_or_default();
        format!(
            "{} clips: PSNR {:.3} dB, SSIM {:.4}{region}",
            agg.clips, agg.psnr, agg.ssim
        )
    })
}

fn grad_check(cli: &Cli, cfg: &RunConfig, a: &GradCheckArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let lambda = a.lambda.unwrap_or(cfg.train.lambda);
    let toy = ToyProblem::new(seed)?;
    let gc = GradCheckConfig {
        probes: a.probes,
        tolerance: a.tolerance,
        seed,
        ..GradCheckConfig::default()
    };
    let report = toy.check(lambda, &gc)?;
    emit(cli, serde_json::to_value(&report)?, || {
        format!(
            "{} probes over {} parameters, worst relative error {:.3e} at {}",
            report.probes.len(),
            report.trainable_params,
            report.max_rel_error,
            report.worst_parameter
        )
    })
}
