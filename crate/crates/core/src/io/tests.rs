use super::*;
use crate::gaussian::GaussianPrimitive;
use crate::objectives::project_vertices;
use crate::raster::write_png;
use crate::recon::Region;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

fn random_cloud(seed: u64, n: usize, z: usize) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = GaussianCloud::new(z);
    for i in 0..n {
        let p = GaussianPrimitive {
            mu: [(); 3].map(|_| rng.gen_range(-1.0..1.0)),
            scale_log: [(); 3].map(|_| rng.gen_range(-4.0..0.0)),
            rot: [(); 4].map(|_| rng.gen_range(-1.0..1.0)),
            opacity_logit: rng.gen_range(-3.0..3.0),
            feat: (0..z).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        let tag = if i % 3 == 0 { Branch::Occluded } else { Branch::Visible };
        c.push(&p, tag).unwrap();
    }
    c
}

#[test]
fn ply_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
    let cloud = random_cloud(1, 37, 8);
    write_ply(&a, &cloud).unwrap();
    let back = read_ply(&a).unwrap();
    assert_eq!(back, cloud);
    write_ply(&b, &back).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn ply_header_declares_one_property_per_feature() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ply");
    write_ply(&p, &random_cloud(2, 3, 8)).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    let header = &text[..text.find("end_header").unwrap()];
    let feats: Vec<&str> = header
        .lines()
        .filter(|l| l.starts_with("property double f_"))
        .collect();
    assert_eq!(feats.len(), 8);
    assert!(header.contains("property uchar branch"));
}

/// Float32 PLY in 3DGS style, with shuffled property order and no branch.
fn foreign_ply(path: &Path, rows: &[[f32; 13]]) {
    let names = [
        "opacity", "x", "y", "z", "f_0", "f_1", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    ];
    let mut buf = format!("ply\nformat binary_little_endian 1.0\ncomment foreign\nelement vertex {}\n", rows.len());
    for n in names {
        buf.push_str(&format!("property float {n}\n"));
    }
    buf.push_str("end_header\n");
    let mut bytes = buf.into_bytes();
    for r in rows {
        for v in r {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn foreign_ply_without_branch_imports_as_visible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.ply");
    let row = [0.5f32, 0.1, 0.2, 0.3, 0.25, -0.75, -1.0, -2.0, -3.0, 1.0, 0.0, 0.0, 0.0];
    foreign_ply(&p, &[row, row]);
    let c = read_ply(&p).unwrap();
    assert_eq!(c.len(), 2);
    assert_eq!(c.feat_dim(), 2);
    assert!(c.tags().iter().all(|&t| t == Branch::Visible));
    let g = c.get(1);
    assert_eq!(g.mu, [0.1f32 as f64, 0.2f32 as f64, 0.3f32 as f64]);
    assert_eq!(g.opacity_logit, 0.5);
    assert_eq!(g.feat, vec![0.25, -0.75]);
    assert_eq!(g.scale_log, [-1.0, -2.0, -3.0]);
}

#[test]
fn malformed_ply_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ply");
    write_ply(&p, &random_cloud(3, 4, 2)).unwrap();
    let good = std::fs::read(&p).unwrap();
    let text = String::from_utf8_lossy(&good).to_string();

    let cases: Vec<Vec<u8>> = vec![
        good[..good.len() - 1].to_vec(),
        text.replacen("property double f_1", "property double normal_x", 1).into_bytes(),
        text.replacen("binary_little_endian", "binary_big_endian", 1).into_bytes(),
        text.replacen("ply\n", "plx\n", 1).into_bytes(),
        text.replacen("property double opacity\n", "", 1).into_bytes(),
        b"ply\nformat binary_little_endian 1.0\n".to_vec(),
    ];
    for (k, bytes) in cases.iter().enumerate() {
        std::fs::write(&p, bytes).unwrap();
        let r = read_ply(&p);
        assert!(matches!(r, Err(Error::Format { .. })), "case {k}: {r:?}");
    }
    let mut bad_tag = good.clone();
    *bad_tag.last_mut().unwrap() = 7;
    std::fs::write(&p, bad_tag).unwrap();
    assert!(read_ply(&p).is_err());
}

#[test]
fn png_round_trip_quantizes_to_8_bits() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.png");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = RgbImage::new(5, 3, (0..45).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    write_png(&p, &img).unwrap();
    let back = read_png(&p).unwrap();
    assert_eq!((back.width, back.height), (5, 3));
    for (a, b) in img.data.iter().zip(&back.data) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        assert_eq!((b * 255.0).round() / 255.0, *b);
    }
}

#[derive(Debug, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
struct Inner {
    rate: f64,
    name: String,
}

#[derive(Debug, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
struct Outer {
    seed: u64,
    inner: Inner,
}

#[test]
fn config_overrides_apply_over_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "seed = 3\n[inner]\nrate = 0.5\nname = \"a\"\n").unwrap();
    let c: Outer = load_config(Some(&p), &[]).unwrap();
    assert_eq!(c.inner.rate, 0.5);
    let c: Outer = load_config(Some(&p), &["inner.rate=2e-3".into(), "inner.name=bob".into(), "seed=9".into()]).unwrap();
    assert_eq!(c, Outer { seed: 9, inner: Inner { rate: 2e-3, name: "bob".into() } });
    let d: Outer = load_config(None, &[]).unwrap();
    assert_eq!(d, Outer::default());
    assert!(matches!(load_config::<Outer>(None, &["inner.bogus=1".into()]), Err(Error::Config(_))));
    assert!(matches!(load_config::<Outer>(None, &["novalue".into()]), Err(Error::Config(_))));
    std::fs::write(&p, "seed = [").unwrap();
    assert!(matches!(load_config::<Outer>(Some(&p), &[]), Err(Error::Format { .. })));
}

#[test]
fn explicit_output_dir_wins() {
    assert_eq!(output_dir(Some(Path::new("/x/y")), "runs"), PathBuf::from("/x/y"));
}

fn small_opts() -> SynthOptions {
    SynthOptions {
        width: 32,
        height: 32,
        supersample: 2,
        frames: 6,
        period: 4.0,
        feature_size: 16,
        local_channels: 5,
        global_channels: 4,
        budget: 120,
        audio_dim: 6,
        ..SynthOptions::default()
    }
}

#[test]
fn static_scene_has_one_prior_and_a_camera_per_view() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth_scene(Preset::StaticHead, 7, &small_opts(), dir.path()).unwrap();
    let m = &b.manifest;
    assert_eq!(m.frames.len(), 8);
    assert_eq!(m.heldout, vec![7]);
    assert_eq!(b.training_frames().len(), 7);
    let priors: std::collections::BTreeSet<_> = m.frames.iter().map(|f| f.prior.clone()).collect();
    assert_eq!(priors.len(), 1);
    let cams: Vec<_> = (0..8).map(|i| b.camera(i).unwrap()).collect();
    for i in 0..8 {
        for j in 0..i {
            assert_ne!(cams[i], cams[j]);
        }
    }
    assert!(b.audio().unwrap().is_none());
    let img = b.image(0).unwrap();
    assert_eq!((img.width, img.height), (32, 32));
    let (l, g) = b.features(0).unwrap();
    assert_eq!((l.height, l.channels, g.len()), (16, 5, 4));
}

#[test]
fn talking_scene_stores_the_driving_curve() {
    let dir = tempfile::tempdir().unwrap();
    let opts = small_opts();
    let b = synth_scene(Preset::TalkingHead, 7, &opts, dir.path()).unwrap();
    let curve = driving_curve(opts.frames, opts.period, opts.amplitude);
    assert_eq!(b.manifest.curve.as_deref(), Some(&curve[..]));
    assert_eq!(curve[0], 0.0);
    assert!((curve[2] - opts.amplitude).abs() < 1e-15);
    let track = b.audio().unwrap().unwrap();
    assert_eq!((track.len(), track.dim), (6, 6));
    // frames with equal aperture get equal audio features
    for (x, y) in track.frame(1).iter().zip(track.frame(3)) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_ne!(track.frame(0), track.frame(2));
    for (i, f) in b.manifest.frames.iter().enumerate() {
        assert_eq!(f.aperture, curve[i]);
    }
}

#[test]
fn same_seed_gives_byte_identical_bundles() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let opts = small_opts();
    synth_scene(Preset::TalkingHead, 11, &opts, a.path()).unwrap();
    let bundle = synth_scene(Preset::TalkingHead, 11, &opts, b.path()).unwrap();
    let mut files = vec![SceneBundle::MANIFEST.to_string(), "audio.aud".to_string()];
    for f in &bundle.manifest.frames {
        files.extend([f.image.clone(), f.prior.clone(), f.local.clone(), f.global.clone()]);
    }
    for f in files {
        assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap(), "{f}");
    }
}

#[test]
fn prior_selection_matches_budget_and_lip_split() {
    for budget in [100, 300] {
        for a in [0.0, 0.15] {
            let p = head_prior(HeadState { aperture: a }, budget).unwrap();
            assert_eq!(p.selected().len(), budget);
            assert_eq!(p.upper_lip().len(), p.lower_lip().len());
            assert!(p.lip.iter().all(|&i| p.regions[i] == Region::Mouth));
        }
    }
    assert!(head_prior(HeadState::default(), 20).is_err());
}

#[test]
fn jaw_moves_only_lower_vertices() {
    let closed = head_prior(HeadState::default(), 300).unwrap();
    let open = head_prior(HeadState { aperture: 0.2 }, 300).unwrap();
    for &i in closed.upper_lip() {
        assert_eq!(closed.vertices[i], open.vertices[i]);
    }
    let mid = closed.lower_lip()[closed.lower_lip().len() / 2];
    assert!((closed.vertices[mid][1] - open.vertices[mid][1] - 0.2).abs() < 1e-12);
    let moved = (0..closed.len())
        .filter(|&i| closed.vertices[i] != open.vertices[i])
        .count();
    assert!(moved > 10);
}

#[test]
fn lip_landmarks_land_on_lip_pixels() {
    let opts = SynthOptions::default();
    let cam = orbit_for_test(&opts);
    for a in [0.0, 0.2] {
        let state = HeadState { aperture: a };
        let img = render_head(&cam, state, 3, 4);
        let prior = head_prior(state, 300).unwrap();
        let mid = [prior.upper_lip()[3], prior.lower_lip()[3]];
        for p in project_vertices(&prior.vertices, &mid, &cam) {
            let [u, v] = p.unwrap();
            let px = img.pixel(u.floor() as usize, v.floor() as usize);
            assert!(px[0] > 1.8 * px[1] && px[0] > 1.8 * px[2], "aperture {a}: {px:?} at {u},{v}");
        }
    }
}

fn orbit_for_test(opts: &SynthOptions) -> crate::gaussian::CameraPose {
    let f = opts.focal * opts.width as f64;
    crate::gaussian::CameraPose::look_at(
        nalgebra::Vector3::new(0.0, 0.0, -4.0),
        nalgebra::Vector3::zeros(),
        nalgebra::Vector3::new(0.0, 1.0, 0.0),
        f,
        f,
        opts.width,
        opts.height,
    )
}

#[test]
fn open_mouth_reveals_dark_interior() {
    let opts = SynthOptions::default();
    let cam = orbit_for_test(&opts);
    let closed = render_head(&cam, HeadState::default(), 3, 4);
    let open = render_head(&cam, HeadState { aperture: 0.2 }, 3, 4);
    let diff: f64 = closed.data.iter().zip(&open.data).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 5.0);
    // the head fills a good part of the frame and the corners are background
    let is_bg = |p: [f64; 3]| (p[0] - 0.25).abs() + (p[1] - 0.3).abs() + (p[2] - 0.35).abs() < 1e-12;
    assert!(is_bg(closed.pixel(0, 0)));
    let head_px = (0..64 * 64)
        .filter(|&i| !is_bg(closed.pixel(i % 64, i / 64)))
        .count();
    assert!(head_px > 64 * 64 / 4, "{head_px}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ply_round_trip_any_cloud(seed in 0u64..10_000, n in 0usize..20, z in 1usize..6) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        let cloud = random_cloud(seed, n, z);
        write_ply(&p, &cloud).unwrap();
        prop_assert_eq!(read_ply(&p).unwrap(), cloud);
    }
}
