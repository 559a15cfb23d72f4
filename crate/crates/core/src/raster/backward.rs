use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::{PrimGeom, RasterRecord, Rasterizer, Splat};
use crate::error::{Error, Result};

/// Per-primitive gradients, laid out like the cloud's flat arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGradients {
    pub d_mu: Vec<f64>,
    pub d_scale_log: Vec<f64>,
    pub d_rot: Vec<f64>,
    pub d_opacity_logit: Vec<f64>,
    pub d_feat: Vec<f64>,
}

impl RasterGradients {
    pub fn zeros(n: usize, z: usize) -> Self {
        Self {
            d_mu: vec![0.0; 3 * n],
            d_scale_log: vec![0.0; 3 * n],
            d_rot: vec![0.0; 4 * n],
            d_opacity_logit: vec![0.0; n],
            d_feat: vec![0.0; n * z],
        }
    }

    pub fn len(&self) -> usize {
        self.d_opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_opacity_logit.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        [&self.d_mu, &self.d_scale_log, &self.d_rot, &self.d_opacity_logit, &self.d_feat]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

// per-splat screen-space gradient slots
const S_U: usize = 0;
const S_V: usize = 1;
const S_A: usize = 2;
const S_B: usize = 3;
const S_C: usize = 4;
const S_O: usize = 5;
const S_F: usize = 6;

impl Rasterizer {
    /// Adjoint of [`Rasterizer::forward`] for `d_image` (`H × W × Z`) and an
    /// optional `d_alpha` (`H × W`).
    pub fn backward(
        &self,
        rec: &RasterRecord,
        d_image: &[f64],
        d_alpha: Option<&[f64]>,
    ) -> Result<RasterGradients> {
        let (w, h, z) = (rec.cam.width, rec.cam.height, rec.feat_dim);
        if d_image.len() != w * h * z {
            return Err(Error::Contract(format!(
                "d_image has {} values, record expects {}x{}x{}",
                d_image.len(),
                h,
                w,
                z
            )));
        }
        if let Some(da) = d_alpha {
            if da.len() != w * h {
                return Err(Error::Contract(format!(
                    "d_alpha has {} values, record expects {}x{}",
                    da.len(),
                    h,
                    w
                )));
            }
        }
        let ts = rec.cfg.tile_size;
        let tiles_x = w.div_ceil(ts);
        let stride = S_F + z;

        let partials: Vec<Vec<f64>> = self.install(|| {
            (0..rec.tile_lists.len())
                .into_par_iter()
                .map(|tile| {
                    let tx = tile % tiles_x;
                    let ty = tile / tiles_x;
                    let x0 = tx * ts;
                    let y0 = ty * ts;
                    let x1 = ((tx + 1) * ts).min(w);
                    let y1 = ((ty + 1) * ts).min(h);
                    tile_backward(rec, tile, (x0, y0, x1, y1), d_image, d_alpha, stride)
                })
                .collect()
        });

        let mut grads = RasterGradients::zeros(rec.n_prims, z);
        let mut screen = vec![[0.0f64; S_F]; rec.splats.len()];
        for (tile, part) in partials.iter().enumerate() {
            for (local, &si) in rec.tile_lists[tile].iter().enumerate() {
                let p = &part[local * stride..(local + 1) * stride];
                let sg = &mut screen[si as usize];
                for k in 0..S_F {
                    sg[k] += p[k];
                }
                let idx = rec.splats[si as usize].idx;
                let df = &mut grads.d_feat[idx * z..(idx + 1) * z];
                for k in 0..z {
                    df[k] += p[S_F + k];
                }
            }
        }

        let world: Vec<([f64; 3], [f64; 3], [f64; 4])> = self.install(|| {
            rec.splats
                .par_iter()
                .zip(screen.par_iter())
                .map(|(s, sg)| chain_to_world(s, sg, rec))
                .collect()
        });
        for ((s, sg), (dmu, ds, dq)) in rec.splats.iter().zip(&screen).zip(world) {
            let i = s.idx;
            grads.d_mu[3 * i..3 * i + 3].copy_from_slice(&dmu);
            grads.d_scale_log[3 * i..3 * i + 3].copy_from_slice(&ds);
            grads.d_rot[4 * i..4 * i + 4].copy_from_slice(&dq);
            grads.d_opacity_logit[i] = sg[S_O];
        }
        Ok(grads)
    }
}

fn tile_backward(
    rec: &RasterRecord,
    tile: usize,
    (x0, y0, x1, y1): (usize, usize, usize, usize),
    d_image: &[f64],
    d_alpha: Option<&[f64]>,
    stride: usize,
) -> Vec<f64> {
    let list = &rec.tile_lists[tile];
    let tr = &rec.tiles[tile];
    let mut part = vec![0.0; list.len() * stride];
    if list.is_empty() {
        return part;
    }
    let (w, z) = (rec.cam.width, rec.feat_dim);
    let tw = x1 - x0;
    let mut acc = vec![0.0; z];
    for y in y0..y1 {
        for x in x0..x1 {
            let lp = (y - y0) * tw + (x - x0);
            let entries = &tr.entries[tr.offsets[lp] as usize..tr.offsets[lp + 1] as usize];
            if entries.is_empty() {
                continue;
            }
            let gp = y * w + x;
            let dc = &d_image[gp * z..(gp + 1) * z];
            let da = d_alpha.map_or(0.0, |d| d[gp]);
            if da == 0.0 && dc.iter().all(|&v| v == 0.0) {
                continue;
            }
            let t_final = rec.final_t[gp];
            for k in 0..z {
                acc[k] = t_final * rec.background[k];
            }
            let (px, py) = (x as f64, y as f64);
            for e in entries.iter().rev() {
                let s = &rec.splats[list[e.local as usize] as usize];
                let f = &rec.cloud.feat[s.idx * z..(s.idx + 1) * z];
                let p = &mut part[e.local as usize * stride..(e.local as usize + 1) * stride];
                let wgt = e.alpha * e.trans;
                let inv = 1.0 / (1.0 - e.alpha);
                let mut dalpha = da * t_final * inv;
                for k in 0..z {
                    p[S_F + k] += dc[k] * wgt;
                    dalpha += dc[k] * (f[k] * e.trans - acc[k] * inv);
                    acc[k] += f[k] * wgt;
                }
                if e.clamped {
                    continue;
                }
                let dx = px - s.mean[0];
                let dy = py - s.mean[1];
                let [a, b, c] = s.conic;
                let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
                let g = power.exp();
                let o = s.opacity;
                p[S_O] += dalpha * g * o * (1.0 - o);
                let dpower = dalpha * o * g;
                p[S_A] += -0.5 * dx * dx * dpower;
                p[S_B] += -dx * dy * dpower;
                p[S_C] += -0.5 * dy * dy * dpower;
                // d(power)/d(mean) = -d(power)/d(dx)
                p[S_U] += (a * dx + b * dy) * dpower;
                p[S_V] += (b * dx + c * dy) * dpower;
            }
        }
    }
    part
}

fn chain_to_world(s: &Splat, sg: &[f64; S_F], rec: &RasterRecord) -> ([f64; 3], [f64; 3], [f64; 4]) {
    let cam = &rec.cam;
    let [a, b, c] = s.conic;
    let k = Matrix2::new(a, b, b, c);
    let gk = Matrix2::new(sg[S_A], 0.5 * sg[S_B], 0.5 * sg[S_B], sg[S_C]);
    let g_cov = -(k * gk * k);

    let geo = PrimGeom::of(&rec.cloud, s.idx).expect("projected primitives have a valid rotation");
    let t = cam.to_camera(&geo.mu);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let (fx, fy) = (cam.fx, cam.fy);
    let j = Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz2, 0.0, fy * iz, -fy * t.y * iz2);
    let wm = cam.rotation;
    let tm = j * wm;
    let g_sigma: Matrix3<f64> = tm.transpose() * g_cov * tm;
    let g_t: Matrix2x3<f64> = 2.0 * g_cov * tm * geo.sigma;
    let g_j: Matrix2x3<f64> = g_t * wm.transpose();

    let (du, dv) = (sg[S_U], sg[S_V]);
    let iz3 = iz2 * iz;
    let dt = Vector3::new(
        du * fx * iz - g_j[(0, 2)] * fx * iz2,
        dv * fy * iz - g_j[(1, 2)] * fy * iz2,
        -du * fx * t.x * iz2 - dv * fy * t.y * iz2 - g_j[(0, 0)] * fx * iz2
            + g_j[(0, 2)] * 2.0 * fx * t.x * iz3
            - g_j[(1, 1)] * fy * iz2
            + g_j[(1, 2)] * 2.0 * fy * t.y * iz3,
    );
    let dmu = wm.transpose() * dt;

    let m = geo.rot * Matrix3::from_diagonal(&geo.scale);
    let g_m = 2.0 * g_sigma * m;
    let mut ds = [0.0; 3];
    let mut g_r = Matrix3::zeros();
    for col in 0..3 {
        for row in 0..3 {
            ds[col] += g_m[(row, col)] * geo.rot[(row, col)];
            g_r[(row, col)] = g_m[(row, col)] * geo.scale[col];
        }
    }
    let d_scale_log = [ds[0] * geo.scale[0], ds[1] * geo.scale[1], ds[2] * geo.scale[2]];

    let [w, x, y, zq] = geo.qn;
    let g = |r: usize, cc: usize| g_r[(r, cc)];
    let dqn = [
        2.0 * (-zq * g(0, 1) + y * g(0, 2) + zq * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + zq * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + zq * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + zq * g(1, 2)
            - w * g(2, 0)
            + zq * g(2, 1)
            - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * zq * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * zq * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    ];
    let dot = w * dqn[0] + x * dqn[1] + y * dqn[2] + zq * dqn[3];
    let dq = [
        (dqn[0] - w * dot) / geo.qnorm,
        (dqn[1] - x * dot) / geo.qnorm,
        (dqn[2] - y * dot) / geo.qnorm,
        (dqn[3] - zq * dot) / geo.qnorm,
    ];
    ([dmu.x, dmu.y, dmu.z], d_scale_log, dq)
}
