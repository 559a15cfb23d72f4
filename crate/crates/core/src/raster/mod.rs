//! Tile-based splatting of a [`GaussianCloud`] into a Z-channel feature image.
//!
//! Forward: EWA-project every primitive, cull against the clip range and the
//! image, sort globally by `(depth, index)`, bin into 16×16 tiles using a
//! bounding square of at least 3σ, then composite front to back per pixel.
//! Backward walks each pixel's recorded contributors in reverse.
//!
//! Tiles are independent in both passes. Backward writes per-tile partial
//! buffers that are reduced in tile order, so results are bitwise identical for
//! any thread count.

mod backward;
mod bench;
mod decode;
mod export;
mod op;

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{project_mean_cov, rotmat_unit, sigmoid, CameraPose, GaussianCloud};

pub use backward::RasterGradients;
pub use bench::{bench_cloud, render_benchmark, BenchReport, REFERENCE_GPU_FPS};
pub use decode::{decode_on_tape, decode_to_rgb, Decoder, RgbImage};
pub use export::{read_feature_dump, write_feature_dump, write_png};
pub use op::{rasterize_on_tape, CloudVars};

/// Compositing and binning parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Screen-space covariance floor in px².
    pub low_pass: f64,
    /// Upper clamp on per-splat alpha.
    pub alpha_clamp: f64,
    /// Contributions below this alpha are skipped.
    pub alpha_min: f64,
    /// Traversal stops once transmittance drops below this.
    pub t_min: f64,
    /// Feature-space background, composited with weight `1 - alpha`.
    /// Empty means all zeros.
    pub background: Vec<f64>,
    /// Worker threads for tile processing; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            low_pass: crate::gaussian::LOW_PASS,
            alpha_clamp: 0.99,
            alpha_min: 1.0 / 255.0,
            t_min: 1e-4,
            background: Vec::new(),
            threads: None,
        }
    }
}

/// Pre-decoder render target: `data` is `H × W × Z` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    /// Accumulated opacity per pixel.
    pub alpha: Vec<f64>,
}

impl FeatureImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            alpha: vec![0.0; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let c = self.channels;
        let i = (y * self.width + x) * c;
        &self.data[i..i + c]
    }
}

/// Screen-space state of one visible primitive.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub idx: usize,
    pub mean: [f64; 2],
    /// Inverse 2-D covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    /// Skip test: `power < log_thresh` implies alpha below `alpha_min`.
    pub log_thresh: f64,
    /// Half-widths of the screen box outside which the splat is skipped.
    pub ext: [f64; 2],
    pub tiles: [usize; 4],
}

/// World-side quantities of one primitive, shared by projection and the chain rule.
pub(crate) struct PrimGeom {
    pub qn: [f64; 4],
    pub qnorm: f64,
    pub rot: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub sigma: Matrix3<f64>,
    pub mu: Vector3<f64>,
}

impl PrimGeom {
    pub fn of(cloud: &GaussianCloud, i: usize) -> Option<Self> {
        let q = &cloud.rot[4 * i..4 * i + 4];
        let qnorm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if !(qnorm > 0.0) {
            return None;
        }
        let qn = [q[0] / qnorm, q[1] / qnorm, q[2] / qnorm, q[3] / qnorm];
        let rot = rotmat_unit(qn[0], qn[1], qn[2], qn[3]);
        let sl = &cloud.scale_log[3 * i..3 * i + 3];
        let scale = Vector3::new(sl[0].exp(), sl[1].exp(), sl[2].exp());
        let m = rot * Matrix3::from_diagonal(&scale);
        Some(Self {
            qn,
            qnorm,
            rot,
            scale,
            sigma: m * m.transpose(),
            mu: Vector3::from(cloud.mu(i)),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Contrib {
    /// Position in the tile's splat list.
    pub local: u32,
    pub clamped: bool,
    pub alpha: f64,
    /// Transmittance in front of this contribution.
    pub trans: f64,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct TileRecord {
    /// Offsets into `entries`, one per tile pixel plus one.
    pub offsets: Vec<u32>,
    pub entries: Vec<Contrib>,
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct RasterRecord {
    pub(crate) cam: CameraPose,
    pub(crate) cfg: RasterConfig,
    pub(crate) n_prims: usize,
    pub(crate) feat_dim: usize,
    pub(crate) cloud: GaussianCloud,
    pub(crate) background: Vec<f64>,
    pub(crate) splats: Vec<Splat>,
    pub(crate) tile_lists: Vec<Vec<u32>>,
    pub(crate) tiles: Vec<TileRecord>,
    pub(crate) final_t: Vec<f64>,
}

impl RasterRecord {
    pub fn width(&self) -> usize {
        self.cam.width
    }
    pub fn height(&self) -> usize {
        self.cam.height
    }
    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }
    pub fn num_primitives(&self) -> usize {
        self.n_prims
    }
    /// Number of primitives that survived culling.
    pub fn num_visible(&self) -> usize {
        self.splats.len()
    }
    /// Total per-pixel contributions stored.
    pub fn num_contributions(&self) -> usize {
        self.tiles.iter().map(|t| t.entries.len()).sum()
    }

    /// `(primitive, α·T)` of every primitive composited at pixel `(x, y)`, front to back.
    pub fn pixel_contributions(&self, x: usize, y: usize) -> Vec<(usize, f64)> {
        let (w, h) = (self.cam.width, self.cam.height);
        if x >= w || y >= h {
            return Vec::new();
        }
        let ts = self.cfg.tile_size;
        let (tx, ty) = (x / ts, y / ts);
        let tile = ty * w.div_ceil(ts) + tx;
        let rec = &self.tiles[tile];
        let tw = ts.min(w - tx * ts);
        let lp = (y - ty * ts) * tw + (x - tx * ts);
        let list = &self.tile_lists[tile];
        rec.entries[rec.offsets[lp] as usize..rec.offsets[lp + 1] as usize]
            .iter()
            .map(|c| (self.splats[list[c.local as usize] as usize].idx, c.alpha * c.trans))
            .collect()
    }
}

/// Wall-clock breakdown of one forward render.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub cull: Duration,
    pub sort: Duration,
    pub composite: Duration,
}

#[derive(Clone)]
pub struct Rasterizer {
    cfg: RasterConfig,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Rasterizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Rasterizer").field("cfg", &self.cfg).finish()
    }
}

impl Default for Rasterizer {
    fn default() -> Self {
        Self::new(RasterConfig::default())
    }
}

struct TileGeom {
    tiles_x: usize,
    tiles_y: usize,
}

impl Rasterizer {
    pub fn new(cfg: RasterConfig) -> Self {
        let pool = cfg.threads.map(|n| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .expect("thread pool"),
            )
        });
        Self { cfg, pool }
    }

    pub fn config(&self) -> &RasterConfig {
        &self.cfg
    }

    pub(crate) fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// Forward render keeping the compositing record for [`Rasterizer::backward`].
    pub fn forward(
        &self,
        cloud: &GaussianCloud,
        cam: &CameraPose,
    ) -> Result<(FeatureImage, RasterRecord)> {
        let (img, rec, _) = self.run(cloud, cam, true)?;
        Ok((img, rec.expect("record requested")))
    }

    /// Forward render only.
    pub fn render(&self, cloud: &GaussianCloud, cam: &CameraPose) -> Result<FeatureImage> {
        Ok(self.run(cloud, cam, false)?.0)
    }

    /// Forward render only, with per-stage timings.
    pub fn render_timed(
        &self,
        cloud: &GaussianCloud,
        cam: &CameraPose,
    ) -> Result<(FeatureImage, StageTimes)> {
        let (img, _, t) = self.run(cloud, cam, false)?;
        Ok((img, t))
    }

    fn background(&self, z: usize) -> Result<Vec<f64>> {
        if self.cfg.background.is_empty() {
            Ok(vec![0.0; z])
        } else if self.cfg.background.len() == z {
            Ok(self.cfg.background.clone())
        } else {
            Err(Error::Dimension {
                what: "background",
                expected: z,
                got: self.cfg.background.len(),
            })
        }
    }

    fn geom(&self, cam: &CameraPose) -> TileGeom {
        let ts = self.cfg.tile_size;
        TileGeom {
            tiles_x: cam.width.div_ceil(ts),
            tiles_y: cam.height.div_ceil(ts),
        }
    }

    fn project_all(&self, cloud: &GaussianCloud, cam: &CameraPose, g: &TileGeom) -> Vec<Splat> {
        let cfg = &self.cfg;
        let n = cloud.len();
        let proj: Vec<Option<Splat>> = self.install(|| {
            (0..n)
                .into_par_iter()
                .map(|i| project_one(cloud, i, cam, cfg, g))
                .collect()
        });
        proj.into_iter().flatten().collect()
    }

    fn run(
        &self,
        cloud: &GaussianCloud,
        cam: &CameraPose,
        keep_record: bool,
    ) -> Result<(FeatureImage, Option<RasterRecord>, StageTimes)> {
        cam.validate()?;
        if self.cfg.tile_size == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        let z = cloud.feat_dim();
        let bg = self.background(z)?;
        let g = self.geom(cam);
        let (w, h) = (cam.width, cam.height);
        let ts = self.cfg.tile_size;

        let t0 = Instant::now();
        let unsorted = self.project_all(cloud, cam, &g);
        let t1 = Instant::now();
        let mut keys: Vec<(f64, u32)> = unsorted
            .iter()
            .enumerate()
            .map(|(k, s)| (s.depth, k as u32))
            .collect();
        // projection preserves index order, so the position breaks depth ties by index
        keys.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let splats: Vec<Splat> = keys.iter().map(|&(_, k)| unsorted[k as usize].clone()).collect();
        let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); g.tiles_x * g.tiles_y];
        for (si, s) in splats.iter().enumerate() {
            let [x0, x1, y0, y1] = s.tiles;
            for ty in y0..y1 {
                for tx in x0..x1 {
                    tile_lists[ty * g.tiles_x + tx].push(si as u32);
                }
            }
        }
        let t2 = Instant::now();

        let feat = cloud.feat_flat();
        let cfg = &self.cfg;
        let results: Vec<(Vec<f64>, Vec<f64>, TileRecord)> = self.install(|| {
            (0..tile_lists.len())
                .into_par_iter()
                .map(|tile| {
                    let tx = tile % g.tiles_x;
                    let ty = tile / g.tiles_x;
                    composite_tile(
                        cfg,
                        &splats,
                        &tile_lists[tile],
                        feat,
                        z,
                        &bg,
                        (tx * ts, ty * ts, ((tx + 1) * ts).min(w), ((ty + 1) * ts).min(h)),
                        keep_record,
                    )
                })
                .collect()
        });

        let mut img = FeatureImage::zeros(w, h, z);
        let mut final_t = vec![1.0; w * h];
        let mut tiles = Vec::with_capacity(if keep_record { results.len() } else { 0 });
        for (tile, (colors, trans, rec)) in results.into_iter().enumerate() {
            let tx = tile % g.tiles_x;
            let ty = tile / g.tiles_x;
            let (x0, y0) = (tx * ts, ty * ts);
            let x1 = ((tx + 1) * ts).min(w);
            let y1 = ((ty + 1) * ts).min(h);
            let tw = x1 - x0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let lp = (y - y0) * tw + (x - x0);
                    let gp = y * w + x;
                    img.data[gp * z..(gp + 1) * z].copy_from_slice(&colors[lp * z..(lp + 1) * z]);
                    img.alpha[gp] = 1.0 - trans[lp];
                    final_t[gp] = trans[lp];
                }
            }
            if keep_record {
                tiles.push(rec);
            }
        }
        let t3 = Instant::now();
        let times = StageTimes {
            cull: t1 - t0,
            sort: t2 - t1,
            composite: t3 - t2,
        };
        let record = keep_record.then(|| RasterRecord {
            cam: cam.clone(),
            cfg: self.cfg.clone(),
            n_prims: cloud.len(),
            feat_dim: z,
            cloud: cloud.clone(),
            background: bg,
            splats,
            tile_lists,
            tiles,
            final_t,
        });
        Ok((img, record, times))
    }
}

fn project_one(
    cloud: &GaussianCloud,
    i: usize,
    cam: &CameraPose,
    cfg: &RasterConfig,
    g: &TileGeom,
) -> Option<Splat> {
    let geom = PrimGeom::of(cloud, i)?;
    let p = project_mean_cov(&geom.mu, &geom.sigma, cam, cfg.low_pass)?;
    let (c00, c01, c11) = (p.cov2d[(0, 0)], p.cov2d[(0, 1)], p.cov2d[(1, 1)]);
    let det = c00 * c11 - c01 * c01;
    if !(det > 0.0) {
        return None;
    }
    let opacity = sigmoid(cloud.opacity_logit[i]);
    // Mahalanobis radius²: at least 3σ, and wide enough to hold every pixel
    // whose alpha can reach alpha_min.
    let (r2, log_thresh) = if cfg.alpha_min > 0.0 {
        if opacity < cfg.alpha_min {
            return None;
        }
        let lt = (cfg.alpha_min / opacity).ln();
        ((-2.0 * lt).max(9.0), lt)
    } else {
        (100.0, f64::NEG_INFINITY)
    };
    // the ellipse dᵀ Σ⁻¹ d = r² spans ±r·sqrt(Σ_xx) horizontally
    let margin = 1.0 + 1e-9;
    let ext = [(r2 * c00).sqrt() * margin, (r2 * c11).sqrt() * margin];
    let (u, v) = (p.mean2d.x, p.mean2d.y);
    let ts = cfg.tile_size as f64;
    let clampf = |x: f64, hi: usize| -> usize { x.max(0.0).min(hi as f64) as usize };
    let x0 = clampf(((u - ext[0]).ceil() / ts).floor(), g.tiles_x);
    let x1 = clampf(((u + ext[0]).floor() / ts).floor() + 1.0, g.tiles_x);
    let y0 = clampf(((v - ext[1]).ceil() / ts).floor(), g.tiles_y);
    let y1 = clampf(((v + ext[1]).floor() / ts).floor() + 1.0, g.tiles_y);
    if x0 >= x1 || y0 >= y1 {
        return None;
    }
    Some(Splat {
        idx: i,
        mean: [u, v],
        conic: [c11 / det, -c01 / det, c00 / det],
        opacity,
        depth: p.depth,
        log_thresh,
        ext,
        tiles: [x0, x1, y0, y1],
    })
}

/// Hot-loop copy of a splat, gathered contiguously per tile.
#[derive(Clone, Copy)]
struct Packed {
    mx: f64,
    my: f64,
    xlo: f64,
    xhi: f64,
    a: f64,
    b: f64,
    c: f64,
    o: f64,
    lt: f64,
    feat: usize,
}

#[allow(clippy::too_many_arguments)]
fn composite_tile(
    cfg: &RasterConfig,
    splats: &[Splat],
    list: &[u32],
    feat: &[f64],
    z: usize,
    bg: &[f64],
    (x0, y0, x1, y1): (usize, usize, usize, usize),
    keep_record: bool,
) -> (Vec<f64>, Vec<f64>, TileRecord) {
    let tw = x1 - x0;
    let npix = tw * (y1 - y0);
    let mut colors = vec![0.0; npix * z];
    let mut trans = vec![1.0; npix];
    let mut rec = TileRecord::default();
    if keep_record {
        rec.offsets.reserve(npix + 1);
        rec.offsets.push(0);
    }
    let packed: Vec<Packed> = list
        .iter()
        .map(|&si| {
            let s = &splats[si as usize];
            Packed {
                mx: s.mean[0],
                my: s.mean[1],
                xlo: s.mean[0] - s.ext[0],
                xhi: s.mean[0] + s.ext[0],
                a: s.conic[0],
                b: s.conic[1],
                c: s.conic[2],
                o: s.opacity,
                lt: s.log_thresh,
                feat: s.idx * z,
            }
        })
        .collect();
    let mut row: Vec<u32> = Vec::with_capacity(list.len());
    for y in y0..y1 {
        let py = y as f64;
        row.clear();
        row.extend(list.iter().enumerate().filter_map(|(local, &si)| {
            let s = &splats[si as usize];
            ((py - s.mean[1]).abs() <= s.ext[1]).then_some(local as u32)
        }));
        for x in x0..x1 {
            let lp = (y - y0) * tw + (x - x0);
            let px = x as f64;
            let color = &mut colors[lp * z..(lp + 1) * z];
            let mut t = 1.0;
            for &local in &row {
                let s = &packed[local as usize];
                if px < s.xlo || px > s.xhi {
                    continue;
                }
                let dx = px - s.mx;
                let dy = py - s.my;
                let power = -0.5 * (s.a * dx * dx + s.c * dy * dy) - s.b * dx * dy;
                if power < s.lt {
                    continue;
                }
                let raw = s.o * power.exp();
                let clamped = raw > cfg.alpha_clamp;
                let alpha = if clamped { cfg.alpha_clamp } else { raw };
                if alpha < cfg.alpha_min {
                    continue;
                }
                let wgt = alpha * t;
                let f = &feat[s.feat..s.feat + z];
                for k in 0..z {
                    color[k] += f[k] * wgt;
                }
                if keep_record {
                    rec.entries.push(Contrib {
                        local,
                        clamped,
                        alpha,
                        trans: t,
                    });
                }
                t *= 1.0 - alpha;
                if t < cfg.t_min {
                    break;
                }
            }
            for k in 0..z {
                color[k] += t * bg[k];
            }
            trans[lp] = t;
            if keep_record {
                rec.offsets.push(rec.entries.len() as u32);
            }
        }
    }
    (colors, trans, rec)
}
