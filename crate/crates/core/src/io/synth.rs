//! Procedural head scenes with exact ground truth.
//!
//! The head is an ellipsoid facing −z with radii [`HEAD_BOX_MAX`]. Its albedo
//! carries skin, hair, eyes, brows and a mouth whose lower lip and jaw move
//! down by the aperture `a`; the region uncovered between the lips shows teeth
//! and a dark interior. Frames are ray cast and supersampled.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::CameraPose;
use crate::motion::{synthetic_audio, AudioFeatureTrack};
use crate::raster::{write_png, RgbImage};
use crate::recon::{synthetic_features, GlobalFeature, LocalFeatureMap, PriorMesh, Region};

pub const HEAD_BOX_MIN: [f64; 3] = [-0.8, -1.0, -0.9];
pub const HEAD_BOX_MAX: [f64; 3] = [0.8, 1.0, 0.9];
const RADII: [f64; 3] = HEAD_BOX_MAX;
const BACKGROUND: [f64; 3] = [0.25, 0.3, 0.35];
const MOUTH_Y: f64 = -0.45;
const MOUTH_HALF_WIDTH: f64 = 0.26;
const LIP_THICKNESS: f64 = 0.06;
const EYE_X: f64 = 0.3;
const EYE_Y: f64 = 0.25;
const CAMERA_DISTANCE: f64 = 4.0;
const LIP_POINTS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    StaticHead,
    TalkingHead,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "static-head" => Ok(Preset::StaticHead),
            "talking-head" => Ok(Preset::TalkingHead),
            _ => Err(Error::Config(format!(
                "unknown preset `{s}` (expected static-head or talking-head)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::StaticHead => "static-head",
            Preset::TalkingHead => "talking-head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub focal: f64,
    /// Static preset: source view, training views and one held-out view.
    pub views: usize,
    /// Talking preset: number of frames.
    pub frames: usize,
    /// Talking preset: period of the aperture curve in frames.
    pub period: f64,
    /// Largest jaw opening (scene units).
    pub amplitude: f64,
    /// Mouth and eye vertices in the prior.
    pub budget: usize,
    pub audio_dim: usize,
    pub fps: u32,
    /// Samples per pixel side.
    pub supersample: usize,
    pub feature_size: usize,
    pub local_channels: usize,
    pub global_channels: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 1.55,
            views: 8,
            frames: 48,
            period: 12.0,
            amplitude: 0.2,
            budget: 300,
            audio_dim: 32,
            fps: 25,
            supersample: 4,
            feature_size: 64,
            local_channels: 64,
            global_channels: 64,
        }
    }
}

impl SynthOptions {
    pub fn validate(&self, preset: Preset) -> Result<()> {
        if self.width < 11 || self.height < 11 || self.supersample == 0 {
            return Err(Error::Config("synthetic frames must be at least 11x11".into()));
        }
        if preset == Preset::StaticHead && self.views < 3 {
            return Err(Error::Config("static-head needs at least 3 views".into()));
        }
        if preset == Preset::TalkingHead && (self.frames < 2 || self.period <= 0.0) {
            return Err(Error::Config("talking-head needs at least 2 frames and a positive period".into()));
        }
        if self.budget < min_budget() {
            return Err(Error::Config(format!("completion budget must be at least {}", min_budget())));
        }
        if self.amplitude < 0.0 || self.amplitude > 0.3 {
            return Err(Error::Config("jaw amplitude must lie in [0, 0.3]".into()));
        }
        Ok(())
    }
}

/// Serialisable camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraSpec {
    pub fn from_pose(c: &CameraPose) -> Self {
        let r = |i: usize| [c.rotation[(i, 0)], c.rotation[(i, 1)], c.rotation[(i, 2)]];
        Self {
            rotation: [r(0), r(1), r(2)],
            translation: [c.translation.x, c.translation.y, c.translation.z],
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }

    pub fn to_pose(&self) -> Result<CameraPose> {
        let m = &self.rotation;
        let cam = CameraPose {
            rotation: Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            translation: Vector3::from(self.translation),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            near: 0.1,
            far: 100.0,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image: String,
    pub prior: String,
    pub local: String,
    pub global: String,
    pub aperture: f64,
    pub camera: CameraSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub preset: Preset,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Axis-aligned box around the head.
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    /// Frame whose features drive one-shot reconstruction.
    pub source: usize,
    /// Frames kept out of training.
    pub heldout: Vec<usize>,
    pub audio: Option<String>,
    /// Jaw aperture per frame that generated the audio track.
    pub curve: Option<Vec<f64>>,
    pub frames: Vec<FrameEntry>,
}

/// A scene directory and its parsed manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl SceneBundle {
    pub const MANIFEST: &'static str = "manifest.toml";

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(Self::MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let bundle = Self {
            root: root.to_path_buf(),
            manifest,
        };
        bundle.validate().map_err(|e| Error::format(&path, e.to_string()))?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let n = m.frames.len();
        if n == 0 {
            return Err(Error::Empty("scene frames"));
        }
        if m.source >= n || m.heldout.iter().any(|&i| i >= n) {
            return Err(Error::Contract("source or held-out index out of range".into()));
        }
        if let Some(c) = &m.curve {
            if c.len() != n {
                return Err(Error::Dimension {
                    what: "driving curve",
                    expected: n,
                    got: c.len(),
                });
            }
        }
        for f in &m.frames {
            for p in [&f.image, &f.prior, &f.local, &f.global] {
                if !self.root.join(p).is_file() {
                    return Err(Error::Contract(format!("manifest path `{p}` does not exist")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn image(&self, i: usize) -> Result<RgbImage> {
        super::read_png(&self.path(&self.manifest.frames[i].image))
    }

    pub fn camera(&self, i: usize) -> Result<CameraPose> {
        self.manifest.frames[i].camera.to_pose()
    }

    pub fn prior(&self, i: usize) -> Result<PriorMesh> {
        PriorMesh::read(&self.path(&self.manifest.frames[i].prior))
    }

    pub fn features(&self, i: usize) -> Result<(LocalFeatureMap, GlobalFeature)> {
        let f = &self.manifest.frames[i];
        Ok((
            LocalFeatureMap::read(&self.path(&f.local))?,
            GlobalFeature::read(&self.path(&f.global))?,
        ))
    }

    pub fn audio(&self) -> Result<Option<AudioFeatureTrack>> {
        self.manifest
            .audio
            .as_ref()
            .map(|a| AudioFeatureTrack::read(&self.path(a)))
            .transpose()
    }

    /// Frames used for training: everything except the held-out ones.
    pub fn training_frames(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|i| !self.manifest.heldout.contains(i))
            .collect()
    }
}

/// Pose of the animated parts of the head.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadState {
    pub aperture: f64,
}

/// Seeded phases of the skin texture.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Texture {
    phase: [f64; 4],
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            phase: [(); 4].map(|_| rng.gen_range(0.0..2.0 * PI)),
        }
    }
}

fn lip_profile(x: f64) -> f64 {
    (1.0 - (x / MOUTH_HALF_WIDTH).powi(2)).max(0.0)
}

/// Vertical jaw displacement of a point below the mouth line.
fn jaw_drop(x: f64, y: f64, a: f64) -> f64 {
    if y < MOUTH_Y {
        a * lip_profile(x)
    } else {
        0.0
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t)
}

fn albedo(p: [f64; 3], s: HeadState, tex: &Texture) -> [f64; 3] {
    let [x, y, z] = p;
    let front = z < 0.0;
    let hair = [0.24, 0.15, 0.09];
    let hairline = 0.55 + 0.07 * (2.5 * x).cos();
    if y > hairline || (z > 0.3 && y > -0.25) {
        return hair;
    }
    if front {
        let g = lip_profile(x);
        if x.abs() < MOUTH_HALF_WIDTH {
            let open = s.aperture * g;
            if y >= MOUTH_Y && y < MOUTH_Y + LIP_THICKNESS * g {
                return [0.68, 0.22, 0.24];
            }
            if y >= MOUTH_Y - open && y < MOUTH_Y {
                return if y >= MOUTH_Y - 0.035 { [0.93, 0.91, 0.85] } else { [0.28, 0.05, 0.06] };
            }
            if y >= MOUTH_Y - open - LIP_THICKNESS * g && y < MOUTH_Y - open {
                return [0.8, 0.3, 0.3];
            }
        }
        for side in [-1.0, 1.0] {
            let ex = x - side * EYE_X;
            let ey = y - EYE_Y;
            if (ex / 0.12).powi(2) + (ey / 0.06).powi(2) < 1.0 {
                let r = (ex * ex + ey * ey).sqrt();
                return if r < 0.02 {
                    [0.05, 0.05, 0.05]
                } else if r < 0.045 {
                    [0.25, 0.35, 0.55]
                } else {
                    [0.95, 0.95, 0.93]
                };
            }
            let by = y - 0.4 + 0.03 * (ex / 0.13).powi(2);
            if ex.abs() < 0.13 && by.abs() < 0.022 {
                return [0.3, 0.2, 0.12];
            }
            if ((x - side * 0.07) / 0.03).powi(2) + ((y + 0.2) / 0.02).powi(2) < 1.0 {
                return [0.55, 0.35, 0.3];
            }
        }
    }
    let yj = y + jaw_drop(x, y, s.aperture);
    let ph = tex.phase;
    let var = 1.0 + 0.04 * (5.0 * x + ph[0]).sin() * (4.0 * yj + ph[1]).sin() + 0.03 * (7.0 * yj + ph[2]).cos();
    let skin = [0.86 * var, 0.66 * var, 0.52 * var];
    let cheek = (-(((x.abs() - 0.42) / 0.14).powi(2) + ((yj + 0.12 + 0.05 * ph[3].sin()) / 0.12).powi(2))).exp();
    mix(skin, [0.9, 0.5, 0.45], 0.35 * cheek)
}

fn shade(p: [f64; 3]) -> f64 {
    let n = Vector3::new(p[0] / RADII[0].powi(2), p[1] / RADII[1].powi(2), p[2] / RADII[2].powi(2)).normalize();
    let l = Vector3::new(0.4, 0.6, -1.0).normalize();
    0.4 + 0.6 * n.dot(&l).max(0.0)
}

fn intersect(origin: Vector3<f64>, dir: Vector3<f64>) -> Option<[f64; 3]> {
    let r = Vector3::from(RADII);
    let o = origin.component_div(&r);
    let d = dir.component_div(&r);
    let a = d.dot(&d);
    let b = 2.0 * o.dot(&d);
    let c = o.dot(&o) - 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    (t > 0.0).then(|| {
        let p = origin + t * dir;
        [p.x, p.y, p.z]
    })
}

/// Ray casts the head with `ss × ss` samples per pixel.
pub fn render_head(cam: &CameraPose, state: HeadState, seed: u64, ss: usize) -> RgbImage {
    let tex = Texture::new(seed);
    let rt = cam.rotation.transpose();
    let eye = -(rt * cam.translation);
    let mut data = Vec::with_capacity(cam.width * cam.height * 3);
    let inv = 1.0 / (ss * ss) as f64;
    for py in 0..cam.height {
        for px in 0..cam.width {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = px as f64 + (sx as f64 + 0.5) / ss as f64;
                    let v = py as f64 + (sy as f64 + 0.5) / ss as f64;
                    let d = rt * Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
                    let c = match intersect(eye, d) {
                        Some(p) => albedo(p, state, &tex).map(|v| v * shade(p)),
                        None => BACKGROUND,
                    };
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            data.extend(acc.map(|v| (v * inv).clamp(0.0, 1.0)));
        }
    }
    RgbImage::new(cam.width, cam.height, data).expect("image size")
}

/// Point on the front of the ellipsoid above `(x, y)`, pushed `inset` inward along −z.
fn front_surface(x: f64, y: f64, inset: f64) -> [f64; 3] {
    let q = 1.0 - (x / RADII[0]).powi(2) - (y / RADII[1]).powi(2);
    [x, y, -RADII[2] * q.max(0.0).sqrt() + inset]
}

fn min_budget() -> usize {
    2 * LIP_POINTS + 2 * 30 + 1
}

/// Prior mesh for a head state. Vertex order and regions do not depend on the
/// state; only the jaw vertices move.
pub fn head_prior(state: HeadState, budget: usize) -> Result<PriorMesh> {
    if budget < min_budget() {
        return Err(Error::Config(format!("completion budget must be at least {}", min_budget())));
    }
    let a = state.aperture;
    let mut vertices = Vec::new();
    let mut regions = Vec::new();
    let mut push = |v: [f64; 3], r: Region| {
        vertices.push(v);
        regions.push(r);
        vertices.len() - 1
    };

    let near_feature = |x: f64, y: f64| {
        (x.abs() < MOUTH_HALF_WIDTH + 0.05 && (y - MOUTH_Y).abs() < 0.2)
            || ((x.abs() - EYE_X).abs() < 0.15 && (y - EYE_Y).abs() < 0.09)
    };
    for j in 0..19 {
        for i in 0..15 {
            let x = -0.7 + 0.1 * i as f64;
            let y = -0.9 + 0.1 * j as f64;
            if (x / RADII[0]).powi(2) + (y / RADII[1]).powi(2) < 0.9 && !near_feature(x, y) {
                push(front_surface(x, y - jaw_drop(x, y, a), 0.0), Region::Other);
            }
        }
    }

    let mut lip = Vec::with_capacity(2 * LIP_POINTS);
    for upper in [true, false] {
        for k in 0..LIP_POINTS {
            let x = -0.18 + 0.36 * k as f64 / (LIP_POINTS - 1) as f64;
            let g = lip_profile(x);
            let y = if upper {
                MOUTH_Y + 0.5 * LIP_THICKNESS * g
            } else {
                MOUTH_Y - a * g - 0.5 * LIP_THICKNESS * g
            };
            lip.push(push(front_surface(x, y, 0.0), Region::Mouth));
        }
    }

    for side in [-1.0, 1.0] {
        for j in 0..5 {
            for i in 0..6 {
                let x = side * EYE_X + 0.2 * (i as f64 / 5.0 - 0.5);
                let y = EYE_Y + 0.09 * (j as f64 / 4.0 - 0.5);
                push(front_surface(x, y, 0.01), Region::Eye);
            }
        }
    }

    let interior = budget - 2 * LIP_POINTS - 60;
    let cols = 16;
    let rows = interior.div_ceil(cols);
    let total = rows * cols;
    for k in 0..interior {
        let g = k * total / interior;
        let (r, c) = (g / cols, g % cols);
        let x = -0.24 + 0.48 * c as f64 / (cols - 1) as f64;
        let y0 = MOUTH_Y + 0.04 - 0.26 * r as f64 / (rows.max(2) - 1) as f64;
        let y = y0 - jaw_drop(x, y0, a);
        push(front_surface(x, y, 0.05), Region::Mouth);
    }

    let prior = PriorMesh {
        vertices,
        regions,
        landmarks: lip.clone(),
        lip,
    };
    prior.validate()?;
    Ok(prior)
}

/// `a(t) = A · (1 − cos(2πt / period)) / 2`.
pub fn driving_curve(frames: usize, period: f64, amplitude: f64) -> Vec<f64> {
    (0..frames)
        .map(|t| amplitude * 0.5 * (1.0 - (2.0 * PI * t as f64 / period).cos()))
        .collect()
}

fn orbit_camera(opts: &SynthOptions, yaw_deg: f64, pitch_deg: f64) -> CameraPose {
    let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
    let eye = CAMERA_DISTANCE * Vector3::new(yaw.sin() * pitch.cos(), pitch.sin(), -yaw.cos() * pitch.cos());
    let f = opts.focal * opts.width as f64;
    CameraPose::look_at(
        eye,
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        f,
        f,
        opts.width,
        opts.height,
    )
}

/// Yaw/pitch of each static view: the source view straight on, training views
/// spread over ±24° yaw with alternating ±5° pitch, and a held-out view last.
fn static_views(n: usize) -> Vec<(f64, f64)> {
    let m = n - 2;
    let mut v = vec![(0.0, 0.0)];
    for j in 0..m {
        let yaw = if m == 1 { 15.0 } else { -24.0 + 48.0 * j as f64 / (m - 1) as f64 };
        v.push((yaw, if j % 2 == 0 { 5.0 } else { -5.0 }));
    }
    v.push((10.0, 0.0));
    v
}

fn quantized(img: &RgbImage) -> RgbImage {
    let data = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    RgbImage::new(img.width, img.height, data).expect("same size")
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Renders a scene into `out` and writes its manifest.
pub fn synth_scene(preset: Preset, seed: u64, opts: &SynthOptions, out: &Path) -> Result<SceneBundle> {
    opts.validate(preset)?;
    for d in ["frames", "priors", "features"] {
        create_dir(&out.join(d))?;
    }
    let (states, cams, source, heldout, curve): (Vec<HeadState>, Vec<CameraPose>, usize, Vec<usize>, Option<Vec<f64>>) =
        match preset {
            Preset::StaticHead => {
                let views = static_views(opts.views);
                let cams = views.iter().map(|&(y, p)| orbit_camera(opts, y, p)).collect();
                (vec![HeadState::default(); opts.views], cams, 0, vec![opts.views - 1], None)
            }
            Preset::TalkingHead => {
                let curve = driving_curve(opts.frames, opts.period, opts.amplitude);
                let states = curve.iter().map(|&a| HeadState { aperture: a }).collect();
                let cam = orbit_camera(opts, 0.0, 0.0);
                (states, vec![cam; opts.frames], 0, Vec::new(), Some(curve))
            }
        };

    let shared_prior = preset == Preset::StaticHead;
    if shared_prior {
        head_prior(HeadState::default(), opts.budget)?.write(&out.join("priors/head.prior"))?;
    }
    let mut frames = Vec::with_capacity(states.len());
    for (i, (state, cam)) in states.iter().zip(&cams).enumerate() {
        let img = render_head(cam, *state, seed, opts.supersample);
        let image = format!("frames/{i:04}.png");
        write_png(&out.join(&image), &img)?;
        let prior = if shared_prior {
            "priors/head.prior".to_string()
        } else {
            let p = format!("priors/{i:04}.prior");
            head_prior(*state, opts.budget)?.write(&out.join(&p))?;
            p
        };
        let (local, global) =
            synthetic_features(&quantized(&img), opts.feature_size, opts.local_channels, opts.global_channels)?;
        let lp = format!("features/{i:04}.flc");
        let gp = format!("features/{i:04}.fgl");
        local.write(&out.join(&lp))?;
        global.write(&out.join(&gp))?;
        frames.push(FrameEntry {
            image,
            prior,
            local: lp,
            global: gp,
            aperture: state.aperture,
            camera: CameraSpec::from_pose(cam),
        });
    }

    let audio = match &curve {
        Some(c) => {
            let norm: Vec<f64> = c
                .iter()
                .map(|a| if opts.amplitude > 0.0 { a / opts.amplitude } else { 0.0 })
                .collect();
            let track = synthetic_audio(&norm, opts.audio_dim, seed ^ 0x5eed_a0d1, opts.fps)?;
            track.write(&out.join("audio.aud"))?;
            Some("audio.aud".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        preset,
        seed,
        width: opts.width,
        height: opts.height,
        bbox_min: HEAD_BOX_MIN,
        bbox_max: HEAD_BOX_MAX,
        source,
        heldout,
        audio,
        curve,
        frames,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mpath = out.join(SceneBundle::MANIFEST);
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    SceneBundle::load(out)
}
