//! Training losses and evaluation metrics.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{CameraPose, GaussianCloud};
use crate::nn::{CustomOp, Tape, Tensor, Var};
use crate::recon::PriorMesh;

/// Weights of the perceptual, lifting and lip terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub perceptual: f64,
    pub lifting: f64,
    pub lip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 0.0,
            lifting: 0.1,
            lip: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.perceptual, self.lifting, self.lip].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")))
        }
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "image",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    if a.is_empty() {
        return Err(Error::Empty("image"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

// ---------------------------------------------------------------------------
// lifting distance

/// Uniform grid over a point set for exact nearest-neighbour queries.
struct PointGrid<'a> {
    pts: &'a [f64],
    lo: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl<'a> PointGrid<'a> {
    /// `extra` points only widen the grid box so queries fall inside it.
    fn new(pts: &'a [f64], extra: &[[f64; 3]]) -> Self {
        let n = pts.len() / 3;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let coords = pts.chunks(3).map(|c| [c[0], c[1], c[2]]).chain(extra.iter().copied());
        for p in coords {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let ext = (0..3).map(|k| hi[k] - lo[k]).fold(0.0f64, f64::max).max(1e-12);
        let per_axis = (n as f64).cbrt().ceil().clamp(1.0, 64.0);
        let cell = ext / per_axis;
        let dims = [0, 1, 2].map(|k| (((hi[k] - lo[k]) / cell).floor() as usize + 1).min(1 << 10));
        let ncell = dims[0] * dims[1] * dims[2];
        let mut g = Self {
            pts,
            lo,
            cell,
            dims,
            starts: vec![0; ncell + 1],
            items: vec![0; n],
        };
        let keys: Vec<usize> = (0..n).map(|i| g.key(g.cell_of(&pts[3 * i..3 * i + 3]))).collect();
        for &k in &keys {
            g.starts[k + 1] += 1;
        }
        for c in 0..ncell {
            g.starts[c + 1] += g.starts[c];
        }
        let mut fill = g.starts.clone();
        for (i, &k) in keys.iter().enumerate() {
            g.items[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        g
    }

    fn cell_of(&self, p: &[f64]) -> [usize; 3] {
        [0, 1, 2].map(|k| (((p[k] - self.lo[k]) / self.cell).floor().max(0.0) as usize).min(self.dims[k] - 1))
    }

    fn key(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Index of the nearest point, ties to the lower index.
    fn nearest(&self, q: [f64; 3]) -> usize {
        let c = self.cell_of(&q);
        let mut best = (f64::INFINITY, usize::MAX);
        let max_r = *self.dims.iter().max().unwrap();
        for r in 0..=max_r {
            let lo = [0, 1, 2].map(|k| c[k].saturating_sub(r));
            let hi = [0, 1, 2].map(|k| (c[k] + r).min(self.dims[k] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let on_shell = [x, y, z].iter().zip(&c).any(|(&a, &b)| a.abs_diff(b) == r);
                        if !on_shell {
                            continue;
                        }
                        let k = self.key([x, y, z]);
                        for &i in &self.items[self.starts[k] as usize..self.starts[k + 1] as usize] {
                            let i = i as usize;
                            let d2 = dist2(q, &self.pts[3 * i..3 * i + 3]);
                            if d2 < best.0 || (d2 == best.0 && i < best.1) {
                                best = (d2, i);
                            }
                        }
                    }
                }
            }
            // anything outside the searched cube is at least r·cell away
            let reach = r as f64 * self.cell;
            if best.1 != usize::MAX && best.0.sqrt() < reach {
                break;
            }
        }
        best.1
    }
}

#[inline]
fn dist2(q: [f64; 3], p: &[f64]) -> f64 {
    let (dx, dy, dz) = (q[0] - p[0], q[1] - p[1], q[2] - p[2]);
    dx * dx + dy * dy + dz * dz
}

/// For every vertex, the index of the nearest point in `mu` (flat `3N`).
pub fn nearest_indices(vertices: &[[f64; 3]], mu: &[f64]) -> Result<Vec<usize>> {
    if mu.is_empty() {
        return Err(Error::Empty("visible cloud"));
    }
    let grid = PointGrid::new(mu, vertices);
    Ok(vertices.iter().map(|&v| grid.nearest(v)).collect())
}

/// Mean Euclidean distance from each prior vertex to its nearest visible primitive.
pub fn lifting_loss(vertices: &[[f64; 3]], vis: &GaussianCloud) -> Result<f64> {
    lifting_distance(vertices, vis.mu_flat())
}

/// [`lifting_loss`] on a flat `3N` array of means.
pub fn lifting_distance(vertices: &[[f64; 3]], vis_mu: &[f64]) -> Result<f64> {
    if vertices.is_empty() {
        return Ok(0.0);
    }
    let nn = nearest_indices(vertices, vis_mu)?;
    let total: f64 = vertices
        .iter()
        .zip(&nn)
        .map(|(&v, &j)| dist2(v, &vis_mu[3 * j..3 * j + 3]).sqrt())
        .sum();
    Ok(total / vertices.len() as f64)
}

struct LiftingOp {
    vertices: Vec<[f64; 3]>,
    nearest: Vec<usize>,
}

impl CustomOp for LiftingOp {
    fn name(&self) -> &'static str {
        "lifting_distance"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let mu = inputs[0].data();
        let mut d = vec![0.0; mu.len()];
        let scale = g[0] / self.vertices.len() as f64;
        for (v, &j) in self.vertices.iter().zip(&self.nearest) {
            let p = &mu[3 * j..3 * j + 3];
            let diff = Vector3::new(p[0] - v[0], p[1] - v[1], p[2] - v[2]);
            let n = diff.norm();
            if n > 0.0 {
                for k in 0..3 {
                    d[3 * j + k] += scale * diff[k] / n;
                }
            }
        }
        Ok(vec![Some(d)])
    }
}

/// Lifting distance on the tape; `vis_mu` is `[N, 3]`. The nearest-neighbour
/// assignment is fixed at the current values.
pub fn lifting_on_tape(tape: &mut Tape, vertices: &[[f64; 3]], vis_mu: Var) -> Result<Var> {
    let mu = tape.value(vis_mu).data().to_vec();
    let value = lifting_distance(vertices, &mu)?;
    let nearest = if vertices.is_empty() { Vec::new() } else { nearest_indices(vertices, &mu)? };
    let op = LiftingOp {
        vertices: vertices.to_vec(),
        nearest,
    };
    Ok(tape.custom(Box::new(op), &[vis_mu], Tensor::scalar(value)))
}

// ---------------------------------------------------------------------------
// lip region

#[derive(Debug, Clone, PartialEq)]
pub struct LipMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl LipMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Pixel box `x ∈ [x0, x1), y ∈ [y0, y1)`.
    pub fn from_box(width: usize, height: usize, x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let mut m = Self::empty(width, height);
        let cx = |v: f64| v.clamp(0.0, width as f64) as usize;
        let cy = |v: f64| v.clamp(0.0, height as f64) as usize;
        for y in cy(y0)..cy(y1) {
            for x in cx(x0)..cx(x1) {
                m.mask[y * width + x] = true;
            }
        }
        m
    }
}

/// Pixel positions of the given prior vertices; `None` for points outside the clip range.
pub fn project_vertices(vertices: &[[f64; 3]], indices: &[usize], cam: &CameraPose) -> Vec<Option<[f64; 2]>> {
    indices
        .iter()
        .map(|&i| {
            cam.project_point(&Vector3::from(vertices[i]))
                .map(|(p, _)| [p.x, p.y])
        })
        .collect()
}

/// Bounding box of the projected lip landmarks grown by `margin` px and clipped to the frame.
pub fn lip_mask_from_landmarks(prior: &PriorMesh, cam: &CameraPose, margin: f64) -> LipMask {
    let pts: Vec<[f64; 2]> = project_vertices(&prior.vertices, &prior.lip, cam)
        .into_iter()
        .flatten()
        .collect();
    if pts.is_empty() {
        return LipMask::empty(cam.width, cam.height);
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    LipMask::from_box(
        cam.width,
        cam.height,
        (x0 - margin).floor(),
        (x1 + margin).ceil(),
        (y0 - margin).floor(),
        (y1 + margin).ceil(),
    )
}

/// L1 over masked pixels and all channels; 0 for an empty mask.
pub fn lip_loss(a: &[f64], b: &[f64], mask: &LipMask) -> Result<f64> {
    same_len(a, b)?;
    let npix = mask.mask.len();
    if npix == 0 || a.len() % npix != 0 {
        return Err(Error::Shape(format!("image of {} values vs mask of {npix} pixels", a.len())));
    }
    let c = a.len() / npix;
    let count = mask.count();
    if count == 0 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (p, &m) in mask.mask.iter().enumerate() {
        if m {
            for k in 0..c {
                s += (a[p * c + k] - b[p * c + k]).abs();
            }
        }
    }
    Ok(s / (count * c) as f64)
}

// ---------------------------------------------------------------------------
// stage objectives

/// Optional perceptual term. The default contributes exactly zero.
pub trait PerceptualHook {
    fn on_tape(&self, tape: &mut Tape, rendered: Var, target: &Tensor, width: usize, height: usize) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoPerceptual;

impl PerceptualHook for NoPerceptual {
    fn on_tape(&self, tape: &mut Tape, _: Var, _: &Tensor, _: usize, _: usize) -> Result<Var> {
        Ok(tape.constant(Tensor::scalar(0.0)))
    }
}

/// Loss terms as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    pub perceptual: Var,
    pub lifting: Var,
    pub lip: Option<Var>,
}

/// Scalar values of a [`LossTerms`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub lifting: f64,
    pub lip: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            total: tape.value(self.total).item(),
            l1: tape.value(self.l1).item(),
            perceptual: tape.value(self.perceptual).item(),
            lifting: tape.value(self.lifting).item(),
            lip: self.lip.map_or(0.0, |v| tape.value(v).item()),
        }
    }
}

/// What a stage objective is evaluated on.
pub struct ObjectiveInputs<'a> {
    /// Rendered RGB `[H·W, 3]`.
    pub rendered: Var,
    pub target: &'a Tensor,
    pub width: usize,
    pub height: usize,
    pub prior_vertices: &'a [[f64; 3]],
    /// Visible means `[N, 3]`.
    pub vis_mu: Var,
}

/// `L1 + λ_l·perceptual + λ_f·lifting`.
pub fn stage1_on_tape(
    tape: &mut Tape,
    inp: &ObjectiveInputs,
    w: &LossWeights,
    hook: &dyn PerceptualHook,
) -> Result<LossTerms> {
    w.validate()?;
    let l1 = tape.l1_to(inp.rendered, inp.target)?;
    let perceptual = hook.on_tape(tape, inp.rendered, inp.target, inp.width, inp.height)?;
    let lifting = lifting_on_tape(tape, inp.prior_vertices, inp.vis_mu)?;
    let p = tape.scale(perceptual, w.perceptual);
    let f = tape.scale(lifting, w.lifting);
    let t = tape.add(l1, p)?;
    let total = tape.add(t, f)?;
    Ok(LossTerms {
        total,
        l1,
        perceptual,
        lifting,
        lip: None,
    })
}

/// Stage-1 objective plus `λ_p·lip`.
pub fn stage2_on_tape(
    tape: &mut Tape,
    inp: &ObjectiveInputs,
    mask: &LipMask,
    w: &LossWeights,
    hook: &dyn PerceptualHook,
) -> Result<LossTerms> {
    let mut terms = stage1_on_tape(tape, inp, w, hook)?;
    if mask.width != inp.width || mask.height != inp.height {
        return Err(Error::Shape(format!(
            "lip mask {}x{} vs image {}x{}",
            mask.width, mask.height, inp.width, inp.height
        )));
    }
    let img = tape.reshape(inp.rendered, &[inp.height, inp.width, 3])?;
    let target = inp.target.reshaped(vec![inp.height, inp.width, 3])?;
    let lip = tape.masked_l1_to(img, &target, &mask.mask)?;
    let scaled = tape.scale(lip, w.lip);
    terms.total = tape.add(terms.total, scaled)?;
    terms.lip = Some(lip);
    Ok(terms)
}

#[allow(clippy::too_many_arguments)]
fn eval_terms(
    rendered: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
    prior_vertices: &[[f64; 3]],
    vis_mu: &[f64],
    mask: Option<&LipMask>,
    w: &LossWeights,
    hook: &dyn PerceptualHook,
) -> Result<f64> {
    same_len(rendered, target)?;
    if rendered.len() != width * height * 3 {
        return Err(Error::Shape(format!("expected {width}x{height} RGB image")));
    }
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::new(vec![width * height, 3], rendered.to_vec())?);
    let t = Tensor::new(vec![width * height, 3], target.to_vec())?;
    let m = tape.constant(Tensor::new(vec![vis_mu.len() / 3, 3], vis_mu.to_vec())?);
    let inp = ObjectiveInputs {
        rendered: r,
        target: &t,
        width,
        height,
        prior_vertices,
        vis_mu: m,
    };
    let terms = match mask {
        Some(mask) => stage2_on_tape(&mut tape, &inp, mask, w, hook)?,
        None => stage1_on_tape(&mut tape, &inp, w, hook)?,
    };
    Ok(tape.value(terms.total).item())
}

/// Value of the stage-1 objective on plain images.
#[allow(clippy::too_many_arguments)]
pub fn stage1_loss(
    rendered: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
    prior_vertices: &[[f64; 3]],
    vis: &GaussianCloud,
    w: &LossWeights,
    hook: &dyn PerceptualHook,
) -> Result<f64> {
    eval_terms(rendered, target, width, height, prior_vertices, vis.mu_flat(), None, w, hook)
}

/// Value of the stage-2 objective on plain images.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss(
    rendered: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
    prior_vertices: &[[f64; 3]],
    vis: &GaussianCloud,
    mask: &LipMask,
    w: &LossWeights,
    hook: &dyn PerceptualHook,
) -> Result<f64> {
    eval_terms(rendered, target, width, height, prior_vertices, vis.mu_flat(), Some(mask), w, hook)
}

// ---------------------------------------------------------------------------
// metrics

pub const PSNR_CAP_DB: f64 = 100.0;

/// `10·log10(1 / MSE)` for images in `[0, 1]`, capped at 100 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    if a.is_empty() {
        return Err(Error::Empty("image"));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-region filtering of one channel.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; 11]) -> Vec<f64> {
    let ow = w - 10;
    let oh = h - 10;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..11).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..11).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region with an 11×11 Gaussian window (σ 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, averaged over channels.
/// Images are `H × W × C` row-major.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    same_len(a, b)?;
    if width < 11 || height < 11 {
        return Err(Error::Shape(format!("SSIM needs at least 11x11 pixels, got {width}x{height}")));
    }
    let npix = width * height;
    if a.len() % npix != 0 || a.is_empty() {
        return Err(Error::Shape("image size does not match dimensions".into()));
    }
    let c = a.len() / npix;
    let k = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..npix).map(|p| a[p * c + ch]).collect();
        let y: Vec<f64> = (0..npix).map(|p| b[p * c + ch]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let mx = filter_valid(&x, width, height, &k);
        let my = filter_valid(&y, width, height, &k);
        let sxx = filter_valid(&xx, width, height, &k);
        let syy = filter_valid(&yy, width, height, &k);
        let sxy = filter_valid(&xy, width, height, &k);
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            s += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += s / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Mean Euclidean distance between corresponding anchor points (px).
pub fn lmd_anchor(rendered: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if rendered.len() != truth.len() {
        return Err(Error::Dimension {
            what: "anchor correspondences",
            expected: truth.len(),
            got: rendered.len(),
        });
    }
    if rendered.is_empty() {
        return Err(Error::Empty("anchors"));
    }
    let s: f64 = rendered
        .iter()
        .zip(truth)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum();
    Ok(s / rendered.len() as f64)
}

/// Vertical lip opening in pixels: mean lower-lip y minus mean upper-lip y.
pub fn lip_aperture(upper: &[[f64; 2]], lower: &[[f64; 2]]) -> f64 {
    let mean_y = |p: &[[f64; 2]]| p.iter().map(|q| q[1]).sum::<f64>() / p.len().max(1) as f64;
    mean_y(lower) - mean_y(upper)
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    if a.len() < 2 {
        return Err(Error::Empty("correlation series"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub frame: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lmd_px: Option<f64>,
}

/// CSV with columns `frame,psnr_db,ssim,lmd_px` (empty `lmd_px` when unavailable).
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut s = String::from("frame,psnr_db,ssim,lmd_px\n");
    for r in rows {
        let lmd = r.lmd_px.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{:.6},{:.6},{}\n", r.frame, r.psnr_db, r.ssim, lmd));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
