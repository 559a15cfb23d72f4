use std::path::Path;
use std::process::{Command, Output};

use talkhead::io::read_ply;

const SMALL_SCENE: &[&str] = &[
    "--set", "width=32", "--set", "height=32", "--set", "supersample=2", "--set", "feature_size=16",
    "--set", "local_channels=8", "--set", "global_channels=4", "--set", "budget=120", "--set", "audio_dim=6",
];

const SMALL_MODEL: &str = "
[recon]
plane_res = 16
local_channels = 8
global_channels = 4
conv_hidden = 6
mlp_hidden = 8
feat_dim = 4

[motion]
audio_dim = 6
hidden = 8

[motion.hash]
table_size = 256
levels = 2

[train]
lr = 1e-3
";

fn talkhead(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_talkhead"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("TALKHEAD_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, scene: &str, extra: &[&str]) {
    let mut args = vec!["synth-scene", "--scene", scene, "--out", "scene"];
    args.extend_from_slice(SMALL_SCENE);
    args.extend_from_slice(extra);
    let o = talkhead(dir, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(dir.join("small.toml"), SMALL_MODEL).unwrap();
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&talkhead(dir.path(), &["--help"])), 0);
    assert_eq!(code(&talkhead(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&talkhead(dir.path(), &["bench", "--frames", "many"])), 1);
    assert_eq!(code(&talkhead(dir.path(), &["synth-scene", "--scene", "sideways"])), 1);
    assert_eq!(code(&talkhead(dir.path(), &["synth-scene", "--set", "no_such_option=3"])), 1);
}

#[test]
fn unreadable_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "static-head", &["--set", "views=3"]);
    std::fs::write(dir.path().join("junk.ckpt"), b"THCK\x01\x00").unwrap();
    for ckpt in ["missing.ckpt", "junk.ckpt"] {
        let o = talkhead(dir.path(), &["render", "--checkpoint", ckpt, "--bundle", "scene"]);
        assert_eq!(code(&o), 2, "{ckpt}");
    }
    let o = talkhead(dir.path(), &["train-stage1", "--bundle", "nowhere", "--iterations", "1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_config_values_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "static-head", &["--set", "views=3"]);
    let o = talkhead(
        dir.path(),
        &["train-stage1", "--bundle", "scene", "--config", "small.toml", "--set", "train.lr=-1"],
    );
    assert_eq!(code(&o), 1);
    let o = talkhead(dir.path(), &["train-stage1", "--bundle", "scene", "--preset", "huge"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn metrics_of_identical_frames_are_capped() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "static-head", &["--set", "views=3"]);
    let o = talkhead(
        dir.path(),
        &["metrics", "--rendered", "scene/frames", "--truth", "scene/frames", "--out", "m.csv"],
    );
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[1], "100.000000");
        assert_eq!(f[2], "1.000000");
    }
}

#[test]
fn metrics_reject_mismatched_sizes() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "static-head", &["--set", "views=3"]);
    let o = talkhead(dir.path(), &["synth-scene", "--out", "big", "--set", "views=3", "--set", "width=40"]);
    assert_eq!(code(&o), 0);
    let o = talkhead(dir.path(), &["metrics", "--rendered", "big/frames", "--truth", "scene/frames"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn full_pipeline_on_a_tiny_scene() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "talking-head", &["--set", "frames=5"]);
    let cfg = ["--config", "small.toml", "--seed", "3"];
    let run = |args: &[&str]| {
        let o = talkhead(d, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };

    run(&[&["train-stage1", "--bundle", "scene", "--out", "s1", "--iterations", "4"][..], &cfg].concat());
    for f in ["stage1.ckpt", "stage1_log.csv", "config.toml"] {
        assert!(d.join("s1").join(f).is_file(), "{f}");
    }
    // the checkpoint carries the model config, so later steps need no --config
    run(&["train-stage2", "--bundle", "scene", "--from", "s1/stage1.ckpt", "--out", "s2", "--iterations", "3"]);
    let lipsync = std::fs::read_to_string(d.join("s2/lipsync.csv")).unwrap();
    assert_eq!(lipsync.lines().count(), 6);

    run(&["animate", "--checkpoint", "s2/stage2.ckpt", "--bundle", "scene", "--out", "frames"]);
    let n = std::fs::read_dir(d.join("frames")).unwrap().count();
    assert_eq!(n, 5);

    run(&["reconstruct", "--bundle", "scene", "--checkpoint", "s1/stage1.ckpt", "--out", "head.ply"]);
    let cloud = read_ply(&d.join("head.ply")).unwrap();
    assert!(!cloud.is_empty());
    run(&[
        "reconstruct", "--bundle", "scene", "--checkpoint", "s1/stage1.ckpt", "--out", "visible.ply",
        "--no-completion-branch",
    ]);
    assert!(read_ply(&d.join("visible.ply")).unwrap().len() < cloud.len());

    run(&["render", "--checkpoint", "s2/stage2.ckpt", "--bundle", "scene", "--out", "a.png"]);
    run(&["render", "--checkpoint", "s2/stage2.ckpt", "--bundle", "scene", "--cloud", "head.ply", "--out", "b.png"]);
    assert_eq!(std::fs::read(d.join("a.png")).unwrap(), std::fs::read(d.join("b.png")).unwrap());

    // resuming stage 1 to more iterations
    run(&["train-stage1", "--bundle", "scene", "--resume", "s1/stage1.ckpt", "--out", "s1b", "--iterations", "6"]);
}

#[test]
fn reruns_with_the_same_seed_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "static-head", &["--set", "views=4"]);
    for (out, threads) in [("a", "1"), ("b", "3")] {
        let o = talkhead(
            d,
            &[
                "train-stage1", "--bundle", "scene", "--config", "small.toml", "--iterations", "3", "--out", out,
                "--threads", threads,
            ],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["stage1_log.csv", "heldout_metrics.csv"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn default_outputs_follow_the_env_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_talkhead"))
        .args(["synth-scene", "--set", "views=3", "--set", "width=24", "--set", "height=24"])
        .current_dir(dir.path())
        .env("TALKHEAD_OUT_DIR", dir.path().join("outputs"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("outputs/scene/manifest.toml").is_file());
}

#[test]
fn bench_threshold_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let ok = talkhead(dir.path(), &["bench", "--primitives", "200", "--size", "32", "--frames", "10"]);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("200 primitives at 32x32"));
    let slow = talkhead(
        dir.path(),
        &["bench", "--primitives", "200", "--size", "32", "--frames", "10", "--min-fps", "1e12"],
    );
    assert_eq!(code(&slow), 3);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = talkhead(dir.path(), &["gradcheck", "--instances", "1", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.ends_with("PASS")));
}
