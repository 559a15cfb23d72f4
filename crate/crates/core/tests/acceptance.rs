//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints one PASS/FAIL line. Pass substrings as arguments to run a subset:
//! `cargo test --release -p talkhead --test acceptance -- fps gradcheck`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use talkhead::gradcheck::{run_suite, SuiteOptions};
use talkhead::io::{read_ply, synth_scene, write_ply, Preset, SceneBundle, SynthOptions};
use talkhead::motion::{apply_deformation, AudioFeatureTrack, DeformationDelta};
use talkhead::nn::DEFAULT_LR;
use talkhead::objectives::lifting_distance;
use talkhead::raster::{bench_cloud, render_benchmark, RasterConfig, Rasterizer, REFERENCE_GPU_FPS};
use talkhead::trainer::{
    animate_frames, evaluate_views, lip_anchors, lip_sync_report, render_rgb, source_cloud, train_stage1,
    train_stage2, Checkpoint, Dataset, LipSyncReport, Model, PipelineConfig,
};
use talkhead::{Branch, GaussianCloud, GaussianPrimitive};

type Outcome = talkhead::Result<(bool, String)>;

struct Ctx {
    dir: tempfile::TempDir,
    static_scene: OnceLock<SceneBundle>,
    talking_scene: OnceLock<SceneBundle>,
    lip_sync: OnceLock<(LipSyncReport, f64)>,
}

impl Ctx {
    fn scene(&self, preset: Preset) -> &SceneBundle {
        let (cell, name) = match preset {
            Preset::StaticHead => (&self.static_scene, "static"),
            Preset::TalkingHead => (&self.talking_scene, "talking"),
        };
        cell.get_or_init(|| {
            synth_scene(preset, 0, &SynthOptions::default(), &self.dir.path().join(name)).expect("synthetic scene")
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Desk Stage 1 then Stage 2 on the talking scene: the lip-sync report and
    /// the wall time of both stages.
    fn full_lip_sync(&self) -> talkhead::Result<&(LipSyncReport, f64)> {
        if let Some(r) = self.lip_sync.get() {
            return Ok(r);
        }
        let r = two_stage_lip_sync(self.scene(Preset::TalkingHead), true)?;
        Ok(self.lip_sync.get_or_init(|| r))
    }
}

fn desk(overrides: &[String]) -> PipelineConfig {
    PipelineConfig::load("desk", None, overrides).expect("desk config")
}

fn two_stage_lip_sync(bundle: &SceneBundle, completion: bool) -> talkhead::Result<(LipSyncReport, f64)> {
    let cfg = desk(&[format!("train.completion_branch={completion}")]);
    let t = Instant::now();
    let ds = Dataset::from_bundle(bundle, &cfg, None)?;
    let s1 = train_stage1(&cfg, &ds, None)?;
    let s2 = train_stage2(&cfg, &ds, &s1.checkpoint)?;
    let rast = cfg.rasterizer();
    let cloud = source_cloud(&s2.model, &ds, completion)?;
    let curve = bundle.manifest.curve.as_ref().expect("talking scene has a curve");
    let rep = lip_sync_report(&s2.model, &ds, &cloud, curve, cfg.train.fine_field, cfg.train.lip_margin, &rast)?;
    Ok((rep, t.elapsed().as_secs_f64()))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn cloud_bits(c: &GaussianCloud) -> Vec<u64> {
    [c.mu_flat(), c.scale_log_flat(), c.rot_flat(), c.opacity_logit_flat(), c.feat_flat()]
        .iter()
        .flat_map(|a| a.iter().map(|x| x.to_bits()))
        .collect()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let fa = files_under(a);
    fa == files_under(b) && fa.iter().all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
}

// ---------------------------------------------------------------- criteria

fn gradcheck(_: &Ctx) -> Outcome {
    let t = Instant::now();
    let results = run_suite(&SuiteOptions { instances: 20, seed: 0 })?;
    let secs = t.elapsed().as_secs_f64();
    for r in &results {
        println!("      {}", r.summary());
    }
    let all = results.iter().all(|r| r.passed() && r.instances >= 20);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    Ok((
        all && secs < 120.0,
        format!("{} families x 20 instances in {secs:.1} s (limit 120 s); failing: {failed:?}", results.len()),
    ))
}

fn identity_at_init(ctx: &Ctx) -> Outcome {
    let bundle = ctx.scene(Preset::TalkingHead);
    let cfg = desk(&[]);
    let ds = Dataset::from_bundle(bundle, &cfg, Some(&[bundle.manifest.source]))?;
    let model = Model::new(&cfg, ds.n_selected(), ds.background)?;
    let rast = cfg.rasterizer();
    let cloud = source_cloud(&model, &ds, true)?;
    let cam = &ds.source.camera;
    let still = render_rgb(&model, &cloud, cam, &rast)?;
    let dim = cfg.motion.audio_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tracks = vec![bundle.audio()?.expect("talking scene has audio")];
    tracks.push(AudioFeatureTrack::new(dim, 25, 1, vec![0.0; dim * 4])?);
    tracks.push(AudioFeatureTrack::new(dim, 25, 1, (0..dim * 16).map(|_| rng.gen_range(-50.0..50.0)).collect())?);
    let mut frames = 0;
    let mut equal = true;
    for track in &tracks {
        for fine in [true, false] {
            for f in animate_frames(&model, &cloud, track, fine, cam, &rast)? {
                frames += 1;
                equal &= f.data.iter().zip(&still.data).all(|(a, b)| a.to_bits() == b.to_bits());
            }
        }
    }
    Ok((equal, format!("{frames} animated frames compared bitwise with the static render")))
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, z: usize) -> GaussianCloud {
    let mut c = GaussianCloud::new(z);
    let val = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.05) { -0.0 } else { rng.gen_range(-2.0..2.0) };
    for i in 0..n {
        let p = GaussianPrimitive {
            mu: [val(rng), val(rng), val(rng)],
            scale_log: [val(rng), val(rng), val(rng)],
            rot: [1.0 + rng.gen_range(0.0..1.0), val(rng), val(rng), val(rng)],
            opacity_logit: val(rng),
            feat: (0..z).map(|_| val(rng)).collect(),
        };
        let tag = if i % 3 == 0 { Branch::Occluded } else { Branch::Visible };
        c.push(&p, tag).unwrap();
    }
    c
}

fn zero_delta_and_lifting(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut identity, mut zero_at_means, mut worst_rel) = (true, true, 0.0f64);
    for _ in 0..100 {
        let n = rng.gen_range(1..200);
        let z = rng.gen_range(1..6);
        let cloud = random_cloud(&mut rng, n, z);
        let moved = apply_deformation(&cloud, &DeformationDelta::zeros(n))?;
        identity &= cloud_bits(&moved) == cloud_bits(&cloud) && moved.tags() == cloud.tags();

        let mu = cloud.mu_flat();
        let on_means: Vec<[f64; 3]> = (0..rng.gen_range(1..=n))
            .map(|_| {
                let j = rng.gen_range(0..n);
                [mu[3 * j], mu[3 * j + 1], mu[3 * j + 2]]
            })
            .collect();
        zero_at_means &= lifting_distance(&on_means, mu)? == 0.0;

        let verts: Vec<[f64; 3]> = (0..rng.gen_range(1..60))
            .map(|_| [0; 3].map(|_| rng.gen_range(-3.0..3.0)))
            .collect();
        let brute = verts
            .iter()
            .map(|v| {
                mu.chunks_exact(3)
                    .map(|m| ((v[0] - m[0]).powi(2) + (v[1] - m[1]).powi(2) + (v[2] - m[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / verts.len() as f64;
        let got = lifting_distance(&verts, mu)?;
        worst_rel = worst_rel.max((got - brute).abs() / brute.abs().max(f64::MIN_POSITIVE));
    }
    Ok((
        identity && zero_at_means && worst_rel < 1e-12,
        format!(
            "100 scenes: zero delta bitwise identity {identity}, zero at coinciding means {zero_at_means}, \
             max rel error against brute force {worst_rel:.1e} (limit 1e-12)"
        ),
    ))
}

fn stage1_desk(ctx: &Ctx) -> Outcome {
    let bundle = ctx.scene(Preset::StaticHead);
    let cfg = desk(&[]);
    let setup_ok = bundle.manifest.frames.len() == 8
        && (bundle.manifest.width, bundle.manifest.height) == (64, 64)
        && cfg.recon.plane_res == 64
        && cfg.train.iterations == 2_000
        && cfg.train.lr == 1e-4;
    let t = Instant::now();
    let ds = Dataset::from_bundle(bundle, &cfg, None)?;
    let run = train_stage1(&cfg, &ds, None)?;
    let secs = t.elapsed().as_secs_f64();
    let held = Dataset::from_bundle(bundle, &cfg, Some(&bundle.manifest.heldout))?;
    let rast = cfg.rasterizer();
    let cloud = source_cloud(&run.model, &ds, true)?;
    let anchors = lip_anchors(&cloud, &ds.source.prior, &ds.source.camera, &rast)?;
    let rows = evaluate_views(&run.model, &cloud, &held.samples, &anchors, &rast)?;
    let p = mean(rows.iter().map(|r| r.psnr_db));
    let s = mean(rows.iter().map(|r| r.ssim));
    Ok((
        setup_ok && p >= 25.0 && s >= 0.85,
        format!(
            "held-out PSNR {p:.2} dB (>= 25), SSIM {s:.4} (>= 0.85); 8 views 64x64, P 64, 2000 iterations, \
             lr {:.0e}; {secs:.0} s",
            cfg.train.lr
        ),
    ))
}

fn stage2_lip_sync(ctx: &Ctx) -> Outcome {
    let (rep, secs) = ctx.full_lip_sync()?;
    Ok((
        rep.pearson >= 0.9 && rep.lmd_px <= 2.0,
        format!(
            "aperture-curve Pearson {:.4} (>= 0.9), anchor LMD {:.3} px (<= 2.0); stage 1 + stage 2 in {secs:.0} s",
            rep.pearson, rep.lmd_px
        ),
    ))
}

fn ablation(ctx: &Ctx) -> Outcome {
    let (full, _) = ctx.full_lip_sync()?;
    let (ablated, _) = two_stage_lip_sync(ctx.scene(Preset::TalkingHead), false)?;
    let ratio = ablated.mouth_l1 / full.mouth_l1;
    Ok((
        ratio >= 1.05,
        format!(
            "mouth L1 without completion branch {:.5} vs full {:.5}: ratio {ratio:.3} (>= 1.05)",
            ablated.mouth_l1, full.mouth_l1
        ),
    ))
}

fn throughput(_: &Ctx) -> Outcome {
    let rast = Rasterizer::new(RasterConfig::default());
    let mut fps = Vec::new();
    for n in [1_000, 2_500, 5_000, 10_000] {
        let (cloud, cam) = bench_cloud(n, 8, 0, 128);
        let rep = render_benchmark(&rast, &cloud, &cam, 30)?;
        println!("      {}", rep.summary());
        fps.push(rep.fps);
    }
    let monotone = fps.windows(2).all(|w| w[1] < w[0]);
    let top = *fps.last().unwrap();
    Ok((
        top >= 24.0 && monotone,
        format!(
            "10,000 primitives at 128x128: {top:.1} FPS (>= 24); cost monotone in primitive count: {monotone}; \
             reference GPU figure {REFERENCE_GPU_FPS:.0} FPS (context only)"
        ),
    ))
}

fn round_trips(ctx: &Ctx) -> Outcome {
    // PLY and checkpoint bytes, from a briefly trained static model
    let bundle = ctx.scene(Preset::StaticHead);
    let cfg10 = desk(&["train.iterations=10".into()]);
    let ds = Dataset::from_bundle(bundle, &cfg10, None)?;
    let full = train_stage1(&cfg10, &ds, None)?;
    let cloud = source_cloud(&full.model, &ds, true)?;
    let (pa, pb) = (ctx.path("a.ply"), ctx.path("b.ply"));
    write_ply(&pa, &cloud)?;
    let back = read_ply(&pa)?;
    write_ply(&pb, &back)?;
    let ply = std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap() && cloud_bits(&back) == cloud_bits(&cloud);

    let ck = ctx.path("a.ckpt");
    full.checkpoint.save(&ck)?;
    let loaded = Checkpoint::load(&ck)?;
    let ckpt = loaded.to_bytes() == std::fs::read(&ck).unwrap();

    // resume after 5 of 10 steps, both stages
    let cfg5 = desk(&["train.iterations=5".into()]);
    let half = train_stage1(&cfg5, &ds, None)?;
    let resumed = train_stage1(&cfg10, &ds, Some(&half.checkpoint))?;
    let resume1 = resumed.checkpoint.to_bytes() == full.checkpoint.to_bytes();

    let talking = ctx.scene(Preset::TalkingHead);
    let tds = Dataset::from_bundle(talking, &cfg10, None)?;
    let s1 = train_stage1(&cfg5, &tds, None)?;
    let s2_full = train_stage2(&cfg10, &tds, &s1.checkpoint)?;
    let s2_half = train_stage2(&cfg5, &tds, &s1.checkpoint)?;
    let s2_resumed = train_stage2(&cfg10, &tds, &s2_half.checkpoint)?;
    let resume2 = s2_resumed.checkpoint.to_bytes() == s2_full.checkpoint.to_bytes();
    Ok((
        ply && ckpt && resume1 && resume2,
        format!(
            "PLY save-load-save identical {ply}; checkpoint identical {ckpt}; \
             resumed 5+5 equals 10 steps: stage 1 {resume1}, stage 2 {resume2}"
        ),
    ))
}

fn determinism(ctx: &Ctx) -> Outcome {
    let small = SynthOptions {
        width: 40,
        height: 40,
        views: 4,
        frames: 6,
        supersample: 2,
        ..SynthOptions::default()
    };
    let mut scenes = true;
    for preset in [Preset::StaticHead, Preset::TalkingHead] {
        let a = ctx.path(&format!("det_{}_a", preset.as_str()));
        let b = ctx.path(&format!("det_{}_b", preset.as_str()));
        synth_scene(preset, 5, &small, &a)?;
        synth_scene(preset, 5, &small, &b)?;
        scenes &= same_tree(&a, &b);
    }

    let talking = ctx.scene(Preset::TalkingHead);
    let mut outputs: Vec<(usize, Vec<u8>, Vec<u8>, Vec<u64>)> = Vec::new();
    for threads in [1, 1, 2, 4] {
        let cfg = desk(&["train.iterations=12".into(), "seed=9".into(), format!("threads={threads}")]);
        let ds = Dataset::from_bundle(talking, &cfg, None)?;
        let s1 = train_stage1(&cfg, &ds, None)?;
        let s2 = train_stage2(&cfg, &ds, &s1.checkpoint)?;
        let rast = cfg.rasterizer();
        let cloud = source_cloud(&s2.model, &ds, true)?;
        let track = talking.audio()?.unwrap();
        let frames = animate_frames(&s2.model, &cloud, &track, true, &ds.source.camera, &rast)?;
        let bits = frames.iter().flat_map(|f| f.data.iter().map(|x| x.to_bits())).collect();
        outputs.push((threads, s1.checkpoint.to_bytes(), s2.checkpoint.to_bytes(), bits));
    }
    let (_, c1, c2, fr) = &outputs[0];
    let training = outputs.iter().all(|(_, a, b, f)| a == c1 && b == c2 && f == fr);

    let (cloud, cam) = bench_cloud(5_000, 8, 3, 128);
    let renders: Vec<_> = [1, 3, 8]
        .iter()
        .map(|&t| {
            Rasterizer::new(RasterConfig {
                threads: Some(t),
                ..RasterConfig::default()
            })
            .render(&cloud, &cam)
        })
        .collect::<talkhead::Result<_>>()?;
    let render = renders.windows(2).all(|w| w[0] == w[1]);
    Ok((
        scenes && training && render,
        format!(
            "scene bundles identical across runs {scenes}; stage 1, stage 2 and animation identical across \
             repeated runs and 1/2/4 threads {training}; 5k-primitive render identical across 1/3/8 threads {render}"
        ),
    ))
}

fn learning_rate_default(_: &Ctx) -> Outcome {
    let ok = DEFAULT_LR == 1e-4 && PipelineConfig::desk().train.lr == 1e-4 && PipelineConfig::full().train.lr == 1e-4;
    let full = PipelineConfig::full();
    let long = full.train.iterations == 200_000;
    Ok((ok && long, format!("Adam lr {DEFAULT_LR:.0e} in both presets; full preset runs {} iterations per stage", full.train.iterations)))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn(&Ctx) -> Outcome); 10] = [
        ("gradcheck suite", gradcheck),
        ("identity at init", identity_at_init),
        ("zero delta and lifting properties", zero_delta_and_lifting),
        ("optimizer defaults", learning_rate_default),
        ("format round trips and resume", round_trips),
        ("determinism", determinism),
        ("fps", throughput),
        ("stage 1 desk overfit", stage1_desk),
        ("stage 2 desk lip sync", stage2_lip_sync),
        ("ablation without completion branch", ablation),
    ];
    let ctx = Ctx {
        dir: tempfile::tempdir().expect("temp dir"),
        static_scene: OnceLock::new(),
        talking_scene: OnceLock::new(),
        lip_sync: OnceLock::new(),
    };
    let mut failed = Vec::new();
    let mut ran = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|s| name.contains(s.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(|| f(&ctx))) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        println!(
            "{} {name}: {detail} [{:.1} s]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        if !ok {
            failed.push(name);
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
