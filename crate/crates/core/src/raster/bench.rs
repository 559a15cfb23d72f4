use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FeatureImage, Rasterizer, StageTimes};
use crate::error::{Error, Result};
use crate::gaussian::{Branch, CameraPose, GaussianCloud};

/// Frame rate quoted for the reference GPU implementation, shown for context only.
pub const REFERENCE_GPU_FPS: f64 = 45.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub primitives: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
    pub cull_ms: f64,
    pub sort_ms: f64,
    pub composite_ms: f64,
    /// Every frame matched the first one bit for bit.
    pub deterministic: bool,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        format!(
            "{} primitives at {}x{}: {:.1} FPS over {} frames \
             (cull {:.2} ms, sort {:.2} ms, composite {:.2} ms; reference GPU figure {:.0} FPS)",
            self.primitives,
            self.width,
            self.height,
            self.fps,
            self.frames,
            self.cull_ms,
            self.sort_ms,
            self.composite_ms,
            REFERENCE_GPU_FPS
        )
    }
}

/// Times `n_frames` forward renders (after one warm-up frame).
pub fn render_benchmark(
    rast: &Rasterizer,
    cloud: &GaussianCloud,
    cam: &CameraPose,
    n_frames: usize,
) -> Result<BenchReport> {
    if n_frames < 10 {
        return Err(Error::Contract(format!("benchmark needs at least 10 frames, got {n_frames}")));
    }
    let reference: FeatureImage = rast.render(cloud, cam)?;
    let mut total = StageTimes::default();
    let mut deterministic = true;
    let start = Instant::now();
    for _ in 0..n_frames {
        let (img, t) = rast.render_timed(cloud, cam)?;
        deterministic &= img == reference;
        total.cull += t.cull;
        total.sort += t.sort;
        total.composite += t.composite;
    }
    let elapsed = start.elapsed();
    let per = |d: Duration| d.as_secs_f64() * 1e3 / n_frames as f64;
    Ok(BenchReport {
        primitives: cloud.len(),
        width: cam.width,
        height: cam.height,
        frames: n_frames,
        fps: n_frames as f64 / elapsed.as_secs_f64(),
        cull_ms: per(total.cull),
        sort_ms: per(total.sort),
        composite_ms: per(total.composite),
        deterministic,
    })
}

/// Head-sized test scene: `n` primitives scattered over an ellipsoid shell
/// (radii 0.8, 1.0, 0.9) with a frontal camera at distance 4.
pub fn bench_cloud(n: usize, feat_dim: usize, seed: u64, size: usize) -> (GaussianCloud, CameraPose) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radii = Vector3::new(0.8, 1.0, 0.9);
    // splat size so that n discs roughly tile the shell twice
    let area = 4.0 * std::f64::consts::PI * 0.9 * 0.9;
    let r = (2.0 * area / (n.max(1) as f64 * std::f64::consts::PI)).sqrt();
    let mut mu = Vec::with_capacity(3 * n);
    let mut scale_log = Vec::with_capacity(3 * n);
    let mut rot = Vec::with_capacity(4 * n);
    let mut opacity = Vec::with_capacity(n);
    let mut feat = Vec::with_capacity(n * feat_dim);
    for _ in 0..n {
        let d: Vector3<f64> = loop {
            let v: Vector3<f64> = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let l = v.norm();
            if l > 1e-3 && l <= 1.0 {
                break v / l;
            }
        };
        let p = d.component_mul(&radii);
        mu.extend_from_slice(&[p.x, p.y, p.z]);
        scale_log.extend_from_slice(&[r.ln(), r.ln(), (0.3 * r).ln()]);
        let q: [f64; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        rot.extend_from_slice(&q);
        opacity.push(rng.gen_range(1.0..4.0));
        feat.extend((0..feat_dim).map(|_| rng.gen_range(-1.0..1.0)));
    }
    let cloud = GaussianCloud::from_arrays(
        feat_dim,
        mu,
        scale_log,
        rot,
        opacity,
        feat,
        vec![Branch::Visible; n],
    )
    .expect("consistent bench arrays");
    let f = 1.35 * size as f64;
    let cam = CameraPose::look_at(
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        f,
        f,
        size,
        size,
    );
    (cloud, cam)
}
