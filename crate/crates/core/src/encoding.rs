//! Tri-plane multiresolution hash encoding.
//!
//! A position is projected onto the XY, YZ and XZ planes. Each plane holds `L`
//! levels of `T × F` tables; a level of resolution `N_l` looks up the four
//! corners of the cell containing the point and interpolates bilinearly.
//! Output is plane-major, level-minor: `out[(plane·L + l)·F + f]`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CustomOp, Tape, Tensor, Var};

const PRIME_Y: u64 = 2_654_435_761;
/// Positions per backward chunk. Fixed so the reduction order does not depend
/// on the number of threads.
const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub feat_per_level: usize,
    /// Entries per table; a power of two.
    pub table_size: usize,
    pub base_res: usize,
    pub growth: f64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            feat_per_level: 2,
            table_size: 1 << 14,
            base_res: 16,
            growth: 2.0,
            bbox_min: [-1.5; 3],
            bbox_max: [1.5; 3],
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("hash grid: {m}")));
        if self.levels == 0 || self.feat_per_level == 0 {
            return bad("levels and features per level must be positive");
        }
        if !self.table_size.is_power_of_two() {
            return bad("table size must be a power of two");
        }
        if !(self.growth > 1.0) || self.base_res == 0 {
            return bad("growth must exceed 1 and base resolution be positive");
        }
        if (0..3).any(|k| !(self.bbox_max[k] > self.bbox_min[k])) {
            return bad("bounding box is degenerate");
        }
        Ok(())
    }

    /// Length of one encoding, `3·L·F`.
    pub fn output_dim(&self) -> usize {
        3 * self.levels * self.feat_per_level
    }

    pub fn level_res(&self, l: usize) -> usize {
        (self.base_res as f64 * self.growth.powi(l as i32)).floor() as usize
    }

    /// Scalars in all tables, `3·L·T·F`.
    pub fn num_params(&self) -> usize {
        3 * self.levels * self.table_size * self.feat_per_level
    }

    /// Offset of table `(plane, level)` in the flat parameter array.
    fn table_offset(&self, plane: usize, level: usize) -> usize {
        (plane * self.levels + level) * self.table_size * self.feat_per_level
    }
}

/// Dense row-major index when the level grid fits in the table, spatial hash otherwise.
pub fn hash_index(ix: usize, iy: usize, level_res: usize, table_size: usize) -> usize {
    let side = level_res + 1;
    if side * side <= table_size {
        iy * side + ix
    } else {
        let h = (ix as u64) ^ (iy as u64).wrapping_mul(PRIME_Y);
        (h % table_size as u64) as usize
    }
}

/// The trainable tables of one encoder, flat in `(plane, level, entry, feature)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct TriPlaneTables {
    pub cfg: HashGridConfig,
    pub data: Vec<f64>,
}

impl TriPlaneTables {
    pub fn zeros(cfg: HashGridConfig) -> Result<Self> {
        cfg.validate()?;
        let data = vec![0.0; cfg.num_params()];
        Ok(Self { cfg, data })
    }

    /// Entries drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn random(cfg: HashGridConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let data = (0..cfg.num_params()).map(|_| rng.gen_range(-1e-4..=1e-4)).collect();
        Ok(Self { cfg, data })
    }

    /// Tape-shaped view: `[3·L·T, F]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.data.len() / self.cfg.feat_per_level, self.cfg.feat_per_level],
            self.data.clone(),
        )
        .expect("table shape")
    }
}

/// Corner table offsets and bilinear weights for one (plane, level) lookup.
struct Lookup {
    idx: [usize; 4],
    w: [f64; 4],
}

fn plane_coords(cfg: &HashGridConfig, mu: [f64; 3]) -> [[f64; 2]; 3] {
    let n = |k: usize| ((mu[k] - cfg.bbox_min[k]) / (cfg.bbox_max[k] - cfg.bbox_min[k])).clamp(0.0, 1.0);
    let (x, y, z) = (n(0), n(1), n(2));
    [[x, y], [y, z], [x, z]]
}

fn lookup(cfg: &HashGridConfig, plane: usize, level: usize, uv: [f64; 2]) -> Lookup {
    let res = cfg.level_res(level);
    let cell = |u: f64| -> (usize, f64) {
        let p = u * res as f64;
        let i = (p.floor() as usize).min(res - 1);
        (i, p - i as f64)
    };
    let (ix, fx) = cell(uv[0]);
    let (iy, fy) = cell(uv[1]);
    let base = cfg.table_offset(plane, level);
    let f = cfg.feat_per_level;
    let at = |dx: usize, dy: usize| base + hash_index(ix + dx, iy + dy, res, cfg.table_size) * f;
    Lookup {
        idx: [at(0, 0), at(1, 0), at(0, 1), at(1, 1)],
        w: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    }
}

fn encode_into(tables: &TriPlaneTables, mu: [f64; 3], out: &mut [f64]) {
    let cfg = &tables.cfg;
    let f = cfg.feat_per_level;
    let planes = plane_coords(cfg, mu);
    for (p, uv) in planes.iter().enumerate() {
        for l in 0..cfg.levels {
            let lk = lookup(cfg, p, l, *uv);
            let o = &mut out[(p * cfg.levels + l) * f..(p * cfg.levels + l + 1) * f];
            o.fill(0.0);
            for c in 0..4 {
                let e = &tables.data[lk.idx[c]..lk.idx[c] + f];
                for k in 0..f {
                    o[k] += lk.w[c] * e[k];
                }
            }
        }
    }
}

/// Encoding of a single position (clamped into the box).
pub fn encode(mu: [f64; 3], tables: &TriPlaneTables) -> Vec<f64> {
    let mut out = vec![0.0; tables.cfg.output_dim()];
    encode_into(tables, mu, &mut out);
    out
}

/// Row-major `[N, 3·L·F]` encodings.
pub fn encode_batch(positions: &[[f64; 3]], tables: &TriPlaneTables) -> Vec<f64> {
    let d = tables.cfg.output_dim();
    let mut out = vec![0.0; positions.len() * d];
    out.par_chunks_mut(d)
        .zip(positions.par_iter())
        .for_each(|(o, &mu)| encode_into(tables, mu, o));
    out
}

/// Table gradients for `d_out` (`[N, 3·L·F]`). Positions receive no gradient.
pub fn encode_backward(positions: &[[f64; 3]], cfg: &HashGridConfig, d_out: &[f64]) -> Result<Vec<f64>> {
    let d = cfg.output_dim();
    if d_out.len() != positions.len() * d {
        return Err(Error::Dimension {
            what: "encoding gradient",
            expected: positions.len() * d,
            got: d_out.len(),
        });
    }
    let f = cfg.feat_per_level;
    let partials: Vec<Vec<f64>> = positions
        .par_chunks(CHUNK)
        .zip(d_out.par_chunks(CHUNK * d))
        .map(|(pos, dg)| {
            let mut part = vec![0.0; cfg.num_params()];
            for (mu, g) in pos.iter().zip(dg.chunks(d)) {
                let planes = plane_coords(cfg, *mu);
                for (p, uv) in planes.iter().enumerate() {
                    for l in 0..cfg.levels {
                        let go = &g[(p * cfg.levels + l) * f..(p * cfg.levels + l + 1) * f];
                        if go.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        let lk = lookup(cfg, p, l, *uv);
                        for c in 0..4 {
                            for k in 0..f {
                                part[lk.idx[c] + k] += lk.w[c] * go[k];
                            }
                        }
                    }
                }
            }
            part
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(|| vec![0.0; cfg.num_params()]);
    for part in iter {
        total.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
    }
    Ok(total)
}

struct EncodeOp {
    cfg: HashGridConfig,
    positions: Vec<[f64; 3]>,
}

impl CustomOp for EncodeOp {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_output: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(encode_backward(&self.positions, &self.cfg, grad_output)?)])
    }
}

/// Encodes `positions` against the table variable `tables` (`[3·L·T, F]`),
/// producing `[N, 3·L·F]`.
pub fn encode_on_tape(
    tape: &mut Tape,
    cfg: &HashGridConfig,
    tables: Var,
    positions: &[[f64; 3]],
) -> Result<Var> {
    let data = tape.value(tables).data();
    if data.len() != cfg.num_params() {
        return Err(Error::Dimension {
            what: "hash tables",
            expected: cfg.num_params(),
            got: data.len(),
        });
    }
    let t = TriPlaneTables {
        cfg: cfg.clone(),
        data: data.to_vec(),
    };
    let out = Tensor::new(vec![positions.len(), cfg.output_dim()], encode_batch(positions, &t))?;
    let op = EncodeOp {
        cfg: cfg.clone(),
        positions: positions.to_vec(),
    };
    Ok(tape.custom(Box::new(op), &[tables], out))
}
