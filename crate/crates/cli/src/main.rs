//! `talkhead` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use talkhead::gradcheck::{run_suite, SuiteOptions};
use talkhead::io::{output_dir, read_ply, read_png, synth_scene, write_ply, Preset, SceneBundle, SynthOptions};
use talkhead::motion::AudioFeatureTrack;
use talkhead::objectives::{psnr, ssim, write_metrics_csv, MetricsRow};
use talkhead::raster::{bench_cloud, render_benchmark, write_feature_dump, write_png};
use talkhead::trainer::{
    animate_frames, evaluate_views, lip_anchors, lip_sync_report, render_rgb, source_cloud, train_stage1,
    train_stage2, write_log_csv, Checkpoint, Dataset, Model, PipelineConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "talkhead", version, about = "One-shot animatable Gaussian heads")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene bundle.
    SynthScene(SynthArgs),
    /// Reconstruct the head of a bundle's source frame and write it as PLY.
    Reconstruct(ReconstructArgs),
    /// Fit reconstruction and decoder (motion fields untouched).
    TrainStage1(Stage1Args),
    /// Fit the motion fields on top of a Stage-1 checkpoint.
    TrainStage2(Stage2Args),
    /// Drive a reconstructed head with an audio track and write PNG frames.
    Animate(AnimateArgs),
    /// Render the static head at one of the bundle's cameras.
    Render(RenderArgs),
    /// Compare rendered PNGs with ground truth and write a metrics CSV.
    Metrics(MetricsArgs),
    /// Time the forward rasterizer on synthetic clouds.
    Bench(BenchArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Base configuration: desk or full (default: the checkpoint's, else desk).
    #[arg(long)]
    preset: Option<String>,
    /// TOML file merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rasterizer threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Reconstruct from the visible branch only.
    #[arg(long)]
    no_completion_branch: bool,
    /// Drive motion with the coarse field only.
    #[arg(long)]
    no_fine_field: bool,
}

impl PipelineArgs {
    fn resolve(&self, ckpt: Option<&Checkpoint>, extra: &[String]) -> Result<PipelineConfig> {
        let mut ov = self.overrides.clone();
        ov.extend_from_slice(extra);
        if let Some(s) = self.seed {
            ov.push(format!("seed={s}"));
        }
        if let Some(t) = self.threads {
            ov.push(format!("threads={t}"));
        }
        if self.no_completion_branch {
            ov.push("train.completion_branch=false".into());
        }
        if self.no_fine_field {
            ov.push("train.fine_field=false".into());
        }
        let base = match (&self.preset, ckpt) {
            (Some(p), _) => PipelineConfig::preset(p)?,
            (None, Some(c)) => c.pipeline_config()?,
            (None, None) => PipelineConfig::desk(),
        };
        Ok(PipelineConfig::load_onto(base, self.config.as_deref(), &ov)?)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// static-head or talking-head.
    #[arg(long, default_value = "static-head")]
    scene: String,
    /// Output directory (default: $TALKHEAD_OUT_DIR/scene).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with scene options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Trained weights; without it the freshly initialised model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Frame to reconstruct from (default: the bundle's source frame).
    #[arg(long)]
    frame: Option<usize>,
    /// Output PLY (default: $TALKHEAD_OUT_DIR/head.ply).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct Stage1Args {
    #[arg(long)]
    bundle: PathBuf,
    /// Continue from a Stage-1 checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory (default: $TALKHEAD_OUT_DIR/stage1).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct Stage2Args {
    #[arg(long)]
    bundle: PathBuf,
    /// Stage-1 checkpoint, or a Stage-2 checkpoint to resume.
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory (default: $TALKHEAD_OUT_DIR/stage2).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct AnimateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bundle providing the source frame, prior and camera.
    #[arg(long)]
    bundle: PathBuf,
    /// Audio feature track (default: the bundle's).
    #[arg(long)]
    audio: Option<PathBuf>,
    /// Output directory (default: $TALKHEAD_OUT_DIR/frames).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Render this PLY instead of reconstructing from the bundle.
    #[arg(long)]
    cloud: Option<PathBuf>,
    /// Camera of this frame (default: the source frame).
    #[arg(long)]
    frame: Option<usize>,
    /// Output PNG (default: $TALKHEAD_OUT_DIR/render.png).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the raw feature image.
    #[arg(long)]
    features: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct MetricsArgs {
    /// Directory of rendered PNGs.
    #[arg(long)]
    rendered: PathBuf,
    /// Directory of ground-truth PNGs with the same file names.
    #[arg(long)]
    truth: PathBuf,
    /// Output CSV (default: $TALKHEAD_OUT_DIR/metrics.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted like everywhere else; metrics involve no randomness.
    #[arg(long, default_value_t = 0)]
    #[allow(dead_code)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Primitive counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1000, 2500, 5000, 10000])]
    primitives: Vec<usize>,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    feat_dim: usize,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fail (exit 3) if the largest cloud renders slower than this.
    #[arg(long)]
    min_fps: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A run that completed but whose check did not hold.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK;
    }
    match e.downcast_ref::<talkhead::Error>() {
        Some(talkhead::Error::Config(_)) => EXIT_USAGE,
        Some(_) => EXIT_INPUT,
        None => EXIT_USAGE,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthScene(a) => synth(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::TrainStage1(a) => stage1(a),
        Command::TrainStage2(a) => stage2(a),
        Command::Animate(a) => animate(a),
        Command::Render(a) => render(a),
        Command::Metrics(a) => metrics(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn ensure_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => ensure_dir(d),
        _ => Ok(()),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn load_bundle(path: &Path, source: Option<usize>) -> Result<SceneBundle> {
    let mut b = SceneBundle::load(path)?;
    if let Some(f) = source {
        if f >= b.len() {
            return Err(talkhead::Error::Contract(format!("frame {f} out of range (bundle has {})", b.len())).into());
        }
        b.manifest.source = f;
    }
    Ok(b)
}

/// Model for `ds`: trained weights from `ckpt`, else a fresh initialisation.
fn model_for(cfg: &PipelineConfig, ds: &Dataset, ckpt: Option<&Checkpoint>) -> Result<Model> {
    Ok(match ckpt {
        Some(c) => {
            c.check_model_config(cfg)?;
            Model::from_checkpoint(cfg, c)?
        }
        None => Model::new(cfg, ds.n_selected(), ds.background)?,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let preset = Preset::parse(&a.scene)?;
    let opts: SynthOptions = talkhead::io::load_config(a.config.as_deref(), &a.overrides)?;
    let out = output_dir(a.out.as_deref(), "scene");
    let b = synth_scene(preset, a.seed, &opts, &out)?;
    println!(
        "wrote {} scene with {} frames to {}",
        preset.as_str(),
        b.len(),
        out.display()
    );
    Ok(())
}

fn reconstruct_cmd(a: ReconstructArgs) -> Result<()> {
    let ckpt = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let cfg = a.pipeline.resolve(ckpt.as_ref(), &[])?;
    let bundle = load_bundle(&a.bundle, a.frame)?;
    let src = bundle.manifest.source;
    let ds = Dataset::from_bundle(&bundle, &cfg, Some(&[src]))?;
    let model = model_for(&cfg, &ds, ckpt.as_ref())?;
    let cloud = source_cloud(&model, &ds, cfg.train.completion_branch)?;
    let out = a.out.unwrap_or_else(|| output_dir(None, "head.ply"));
    ensure_parent(&out)?;
    write_ply(&out, &cloud)?;
    println!("wrote {} primitives from frame {src} to {}", cloud.len(), out.display());
    Ok(())
}

fn stage1(a: Stage1Args) -> Result<()> {
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let extra: Vec<String> = a.iterations.map(|n| format!("train.iterations={n}")).into_iter().collect();
    let cfg = a.pipeline.resolve(resume.as_ref(), &extra)?;
    let bundle = load_bundle(&a.bundle, None)?;
    let ds = Dataset::from_bundle(&bundle, &cfg, None)?;
    let out = output_dir(a.out.as_deref(), "stage1");
    ensure_dir(&out)?;
    let t0 = Instant::now();
    let run = train_stage1(&cfg, &ds, resume.as_ref())?;
    run.checkpoint.save(&out.join("stage1.ckpt"))?;
    write_log_csv(&out.join("stage1_log.csv"), &run.log)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
    println!(
        "stage 1: {} iterations in {:.1} s, checkpoint {}",
        run.log.len(),
        t0.elapsed().as_secs_f64(),
        out.join("stage1.ckpt").display()
    );
    let heldout = &bundle.manifest.heldout;
    if !heldout.is_empty() {
        let eval = Dataset::from_bundle(&bundle, &cfg, Some(heldout))?;
        let rast = cfg.rasterizer();
        let cloud = source_cloud(&run.model, &eval, cfg.train.completion_branch)?;
        let anchors = lip_anchors(&cloud, &eval.source.prior, &eval.source.camera, &rast)?;
        let rows = evaluate_views(&run.model, &cloud, &eval.samples, &anchors, &rast)?;
        write_metrics_csv(&out.join("heldout_metrics.csv"), &rows)?;
        println!(
            "held-out views: PSNR {:.2} dB, SSIM {:.4}, LMD {:.3} px",
            mean(rows.iter().map(|r| r.psnr_db)),
            mean(rows.iter().map(|r| r.ssim)),
            mean(rows.iter().filter_map(|r| r.lmd_px))
        );
    }
    Ok(())
}

fn stage2(a: Stage2Args) -> Result<()> {
    let from = load_checkpoint(&a.from)?;
    let extra: Vec<String> = a.iterations.map(|n| format!("train.iterations={n}")).into_iter().collect();
    let cfg = a.pipeline.resolve(Some(&from), &extra)?;
    let bundle = load_bundle(&a.bundle, None)?;
    let ds = Dataset::from_bundle(&bundle, &cfg, None)?;
    let out = output_dir(a.out.as_deref(), "stage2");
    ensure_dir(&out)?;
    let t0 = Instant::now();
    let run = train_stage2(&cfg, &ds, &from)?;
    run.checkpoint.save(&out.join("stage2.ckpt"))?;
    write_log_csv(&out.join("stage2_log.csv"), &run.log)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
    println!(
        "stage 2: {} iterations in {:.1} s, checkpoint {}",
        run.log.len(),
        t0.elapsed().as_secs_f64(),
        out.join("stage2.ckpt").display()
    );
    if let Some(curve) = &bundle.manifest.curve {
        let rast = cfg.rasterizer();
        let cloud = source_cloud(&run.model, &ds, cfg.train.completion_branch)?;
        let rep = lip_sync_report(&run.model, &ds, &cloud, curve, cfg.train.fine_field, cfg.train.lip_margin, &rast)?;
        write_metrics_csv(&out.join("metrics.csv"), &rep.rows)?;
        let mut csv = String::from("frame,aperture_px,curve\n");
        for ((r, ap), c) in rep.rows.iter().zip(&rep.aperture).zip(&rep.curve) {
            csv.push_str(&format!("{},{ap:.6},{c:.6}\n", r.frame));
        }
        std::fs::write(out.join("lipsync.csv"), csv).context("writing lipsync.csv")?;
        println!(
            "lip sync: pearson {:.4}, LMD {:.3} px, mouth L1 {:.5}",
            rep.pearson, rep.lmd_px, rep.mouth_l1
        );
    }
    Ok(())
}

fn animate(a: AnimateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = a.pipeline.resolve(Some(&ckpt), &[])?;
    let bundle = load_bundle(&a.bundle, None)?;
    let track = match &a.audio {
        Some(p) => AudioFeatureTrack::read(p)?,
        None => bundle
            .audio()?
            .ok_or_else(|| talkhead::Error::Contract("bundle has no audio track; pass --audio".into()))?,
    };
    let src = bundle.manifest.source;
    let ds = Dataset::from_bundle(&bundle, &cfg, Some(&[src]))?;
    let model = model_for(&cfg, &ds, Some(&ckpt))?;
    let rast = cfg.rasterizer();
    let t0 = Instant::now();
    let cloud = source_cloud(&model, &ds, cfg.train.completion_branch)?;
    let t1 = Instant::now();
    let frames = animate_frames(&model, &cloud, &track, cfg.train.fine_field, &ds.source.camera, &rast)?;
    let t2 = Instant::now();
    let out = output_dir(a.out.as_deref(), "frames");
    ensure_dir(&out)?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&out.join(format!("{i:04}.png")), f)?;
    }
    println!(
        "wrote {} frames to {} (reconstruction {:.1} ms, animation {:.1} FPS)",
        frames.len(),
        out.display(),
        (t1 - t0).as_secs_f64() * 1e3,
        frames.len() as f64 / (t2 - t1).as_secs_f64()
    );
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = a.pipeline.resolve(Some(&ckpt), &[])?;
    let bundle = load_bundle(&a.bundle, None)?;
    let src = bundle.manifest.source;
    let ds = Dataset::from_bundle(&bundle, &cfg, Some(&[src]))?;
    let model = model_for(&cfg, &ds, Some(&ckpt))?;
    let cloud = match &a.cloud {
        Some(p) => read_ply(p)?,
        None => source_cloud(&model, &ds, cfg.train.completion_branch)?,
    };
    let frame = a.frame.unwrap_or(src);
    if frame >= bundle.len() {
        return Err(talkhead::Error::Contract(format!("frame {frame} out of range (bundle has {})", bundle.len())).into());
    }
    let cam = bundle.camera(frame)?;
    let rast = cfg.rasterizer();
    let img = render_rgb(&model, &cloud, &cam, &rast)?;
    let out = a.out.unwrap_or_else(|| output_dir(None, "render.png"));
    ensure_parent(&out)?;
    write_png(&out, &img)?;
    if let Some(fp) = &a.features {
        ensure_parent(fp)?;
        write_feature_dump(fp, &rast.render(&cloud, &cam)?)?;
    }
    let truth = bundle.image(frame)?;
    println!(
        "wrote {} (PSNR {:.2} dB against frame {frame})",
        out.display(),
        psnr(&img.data, &truth.data)?
    );
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| talkhead::Error::Io {
        path: dir.into(),
        source: e,
    })? {
        let e = e.with_context(|| format!("listing {}", dir.display()))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let names = png_names(&a.rendered)?;
    if names.is_empty() {
        return Err(talkhead::Error::Empty("rendered frames").into());
    }
    let mut rows = Vec::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        let r = read_png(&a.rendered.join(n))?;
        let t = read_png(&a.truth.join(n))?;
        if (r.width, r.height) != (t.width, t.height) {
            return Err(talkhead::Error::Shape(format!(
                "{n}: rendered {}x{} but ground truth {}x{}",
                r.width, r.height, t.width, t.height
            ))
            .into());
        }
        rows.push(MetricsRow {
            frame: i,
            psnr_db: psnr(&r.data, &t.data)?,
            ssim: ssim(&r.data, &t.data, r.width, r.height)?,
            lmd_px: None,
        });
    }
    let out = a.out.unwrap_or_else(|| output_dir(None, "metrics.csv"));
    ensure_parent(&out)?;
    write_metrics_csv(&out, &rows)?;
    println!(
        "{} frames: PSNR {:.2} dB, SSIM {:.4}; wrote {}",
        rows.len(),
        mean(rows.iter().map(|r| r.psnr_db)),
        mean(rows.iter().map(|r| r.ssim)),
        out.display()
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.primitives.is_empty() {
        bail!("no primitive counts given");
    }
    let rast = PipelineConfig {
        threads: a.threads,
        ..PipelineConfig::desk()
    }
    .rasterizer();
    let mut last = None;
    for &n in &a.primitives {
        let (cloud, cam) = bench_cloud(n, a.feat_dim, a.seed, a.size);
        let rep = render_benchmark(&rast, &cloud, &cam, a.frames)?;
        println!("{}", rep.summary());
        if !rep.deterministic {
            return Err(CheckFailed(format!("{n} primitives: frames differ between runs")).into());
        }
        last = Some(rep);
    }
    if let (Some(min), Some(rep)) = (a.min_fps, last) {
        if rep.fps < min {
            return Err(CheckFailed(format!(
                "{} primitives rendered at {:.1} FPS, below {min}",
                rep.primitives, rep.fps
            ))
            .into());
        }
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.instances == 0 {
        return Err(anyhow!("--instances must be positive"));
    }
    let results = run_suite(&SuiteOptions {
        instances: a.instances,
        seed: a.seed,
    })?;
    for r in &results {
        println!("{}", r.summary());
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CheckFailed(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}
