//! The full finite-difference suite: randomized instances for the rasterizer
//! composed with the decoder, the encoder, every tape op, every loss term and
//! the motion field.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{compare_gradients_floored, kink_aware_partial, random_raster_scene, smooth_raster_config, GradReport};
use crate::encoding::{encode_on_tape, HashGridConfig, TriPlaneTables};
use crate::error::Result;
use crate::gaussian::{Branch, CameraPose, GaussianCloud};
use crate::motion::{dual_branch_on_tape, MotionConfig, MotionFields};
use crate::nn::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::objectives::{lifting_on_tape, stage1_on_tape, stage2_on_tape, LipMask, LossWeights, NoPerceptual, ObjectiveInputs};
use crate::raster::{decode_on_tape, rasterize_on_tape, CloudVars, Decoder, Rasterizer};

/// Relative tolerance for checks through the rasterizer.
pub const RASTER_RTOL: f64 = 1e-3;
/// Relative tolerance for pure network and loss checks.
pub const NN_RTOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    /// Randomized instances per family.
    pub instances: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { instances: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyResult {
    pub name: String,
    pub instances: usize,
    pub report: GradReport,
    pub seconds: f64,
}

impl FamilyResult {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.instances > 0
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<28} {:>3} instances {:>6} components  max rel err {:.2e} (tol {:.0e})  {:.1}s  {}",
            self.name,
            self.instances,
            self.report.checked,
            self.report.max_rel_err,
            self.report.rtol,
            self.seconds,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

type Build<'a> = dyn Fn(&mut Tape, &Bound) -> Result<Var> + 'a;

/// Compares tape gradients of `build` with central differences of its value
/// at the chosen coordinates.
fn check(store: &ParamStore, coords: &[(ParamId, usize)], h: f64, rtol: f64, atol: f64, build: &Build) -> Result<GradReport> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| true);
    let loss = build(&mut tape, &bound)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, k)| tape.grad(bound.var(id)).map_or(0.0, |g| g[k]))
        .collect();
    let mut numeric = Vec::with_capacity(coords.len());
    for &(id, k) in coords {
        let mut s = store.clone();
        let x0 = s.get(id).data()[k];
        let mut err = None;
        let est = kink_aware_partial(
            |x| {
                s.get_mut(id).data_mut()[k] = x;
                let mut t = Tape::new();
                let b = s.bind(&mut t, |_| false);
                match build(&mut t, &b) {
                    Ok(v) => t.value(v).item(),
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            x0,
            h,
        );
        if let Some(e) = err {
            return Err(e);
        }
        numeric.push(est);
    }
    Ok(compare_gradients_floored(&analytic, &numeric, rtol, atol))
}

/// Up to `per` distinct random coordinates of every parameter.
fn pick(store: &ParamStore, per: usize, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| {
            let n = store.get(id).numel();
            sample(rng, n, per.min(n))
                .into_iter()
                .map(move |k| (id, k))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Random linear readout `Σ c ⊙ x` so every output entry matters.
fn readout(tape: &mut Tape, x: Var, rng: &mut impl Rng) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let c = rand_tensor(&shape, -1.0, 1.0, rng);
    let y = tape.mul_const(x, &c)?;
    Ok(tape.sum(y))
}

fn cloud_params(store: &mut ParamStore, cloud: &GaussianCloud) -> [ParamId; 5] {
    let n = cloud.len();
    let z = cloud.feat_dim();
    let t = |shape: Vec<usize>, d: &[f64]| Tensor::new(shape, d.to_vec()).expect("cloud shape");
    [
        store.add("mu", t(vec![n, 3], cloud.mu_flat())),
        store.add("scale_log", t(vec![n, 3], cloud.scale_log_flat())),
        store.add("rot", t(vec![n, 4], cloud.rot_flat())),
        store.add("opacity_logit", t(vec![n, 1], cloud.opacity_logit_flat())),
        store.add("feat", t(vec![n, z], cloud.feat_flat())),
    ]
}

fn cloud_vars(bound: &Bound, ids: &[ParamId; 5]) -> CloudVars {
    CloudVars {
        mu: bound.var(ids[0]),
        scale_log: bound.var(ids[1]),
        rot: bound.var(ids[2]),
        opacity_logit: bound.var(ids[3]),
        feat: bound.var(ids[4]),
    }
}

struct RasterInstance {
    store: ParamStore,
    cloud: [ParamId; 5],
    decoder: Decoder,
    cam: CameraPose,
    size: usize,
}

fn raster_instance(seed: u64) -> RasterInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(5..=50);
    let z = rng.gen_range(2..=4);
    let size = 32;
    let (cloud, cam) = random_raster_scene(seed, n, z, size);
    let mut store = ParamStore::new();
    let ids = cloud_params(&mut store, &cloud);
    let decoder = Decoder::new(&mut store, "decoder", z, 0.0, true, &mut rng);
    for id in decoder.param_ids() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = rand_tensor(&shape, -0.5, 0.5, &mut rng);
    }
    RasterInstance {
        store,
        cloud: ids,
        decoder,
        cam,
        size,
    }
}

fn raster_decode(seed: u64) -> Result<GradReport> {
    let inst = raster_instance(seed);
    let rast = Rasterizer::new(smooth_raster_config());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0);
    let c = rand_tensor(&[inst.size * inst.size, 3], -1.0, 1.0, &mut rng);
    let coords = pick(&inst.store, 6, &mut rng);
    check(&inst.store, &coords, 1e-4, RASTER_RTOL, 1e-7, &|tape, bound| {
        let vars = cloud_vars(bound, &inst.cloud);
        let (feat, _) = rasterize_on_tape(tape, &rast, &inst.cam, &vars)?;
        let rgb = decode_on_tape(tape, bound, &inst.decoder, feat, inst.size, inst.size)?;
        let y = tape.mul_const(rgb, &c)?;
        Ok(tape.sum(y))
    })
}

fn loss_through_raster(seed: u64) -> Result<GradReport> {
    let inst = raster_instance(seed);
    let rast = Rasterizer::new(smooth_raster_config());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let s = inst.size;
    let target = rand_tensor(&[s * s, 3], 0.0, 1.0, &mut rng);
    let verts: Vec<[f64; 3]> = (0..12)
        .map(|_| [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.8..0.8)])
        .collect();
    let x0 = rng.gen_range(0.0..20.0);
    let y0 = rng.gen_range(0.0..20.0);
    let mask = LipMask::from_box(s, s, x0, x0 + 10.0, y0, y0 + 8.0);
    let w = LossWeights {
        perceptual: 0.0,
        lifting: rng.gen_range(0.05..1.0),
        lip: rng.gen_range(0.5..2.0),
    };
    let coords = pick(&inst.store, 5, &mut rng);
    check(&inst.store, &coords, 1e-4, RASTER_RTOL, 1e-7, &|tape, bound| {
        let vars = cloud_vars(bound, &inst.cloud);
        let (feat, _) = rasterize_on_tape(tape, &rast, &inst.cam, &vars)?;
        let rgb = decode_on_tape(tape, bound, &inst.decoder, feat, s, s)?;
        let inp = ObjectiveInputs {
            rendered: rgb,
            target: &target,
            width: s,
            height: s,
            prior_vertices: &verts,
            vis_mu: vars.mu,
        };
        Ok(stage2_on_tape(tape, &inp, &mask, &w, &NoPerceptual)?.total)
    })
}

fn encode(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = HashGridConfig {
        levels: rng.gen_range(1..=3),
        feat_per_level: rng.gen_range(1..=2),
        table_size: 1 << rng.gen_range(4..=7),
        base_res: rng.gen_range(2..=6),
        ..HashGridConfig::default()
    };
    let tables = TriPlaneTables::random(cfg.clone(), &mut rng)?;
    let positions: Vec<[f64; 3]> = (0..rng.gen_range(1..=8))
        .map(|_| [0; 3].map(|_| rng.gen_range(-1.4..1.4)))
        .collect();
    let mut store = ParamStore::new();
    let id = store.add("tables", tables.to_tensor());
    let c = rand_tensor(&[positions.len(), cfg.output_dim()], -1.0, 1.0, &mut rng);
    let build = |tape: &mut Tape, bound: &Bound| -> Result<Var> {
        let e = encode_on_tape(tape, &cfg, bound.var(id), &positions)?;
        let y = tape.mul_const(e, &c)?;
        Ok(tape.sum(y))
    };
    // Most table entries are untouched; check every touched entry plus a few others.
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| true);
    let l = build(&mut tape, &bound)?;
    tape.backward(l)?;
    let g = tape.grad(bound.var(id)).unwrap_or(&[]).to_vec();
    let mut coords: Vec<(ParamId, usize)> = (0..g.len()).filter(|&k| g[k] != 0.0).map(|k| (id, k)).collect();
    coords.extend(sample(&mut rng, g.len(), 4.min(g.len())).into_iter().map(|k| (id, k)));
    check(&store, &coords, 1e-6, NN_RTOL, 1e-9, &build)
}

/// Tape ops checked one at a time; each instance composes the op with a random
/// readout.
pub const TAPE_OPS: &[&str] = &[
    "matmul",
    "add_row",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "mul_const",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "slice_rows",
    "broadcast_rows",
    "reshape",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "conv3x3",
    "l1_to",
    "masked_l1_to",
    "sum",
    "mean",
];

fn tape_op(op: &str, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=5);
    let n = rng.gen_range(1..=5);
    let k = rng.gen_range(1..=5);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&[m, n], -1.5, 1.5, &mut rng));
    let (b_shape, lo, hi): (Vec<usize>, f64, f64) = match op {
        "matmul" => (vec![n, k], -1.5, 1.5),
        "add_row" | "broadcast_rows" => (vec![n], -1.5, 1.5),
        "add" | "sub" | "mul" => (vec![m, n], -1.5, 1.5),
        "concat_cols" => (vec![m, k], -1.5, 1.5),
        "concat_rows" => (vec![k, n], -1.5, 1.5),
        "conv3x3" => (vec![3, 3, n, k], -0.5, 0.5),
        _ => (vec![1], 0.0, 1.0),
    };
    let b = store.add("b", rand_tensor(&b_shape, lo, hi, &mut rng));
    let conv_b = store.add("conv_bias", rand_tensor(&[k], -0.5, 0.5, &mut rng));
    let cst = rand_tensor(&[m, n], -1.5, 1.5, &mut rng);
    let img_h = rng.gen_range(1..=4);
    let img = store.add("img", rand_tensor(&[img_h, m, n], -1.5, 1.5, &mut rng));
    let mask: Vec<bool> = (0..img_h * m).map(|_| rng.gen_bool(0.6)).collect();
    let img_target = rand_tensor(&[img_h, m, n], -1.5, 1.5, &mut rng);
    let (s0, s1) = {
        let s = rng.gen_range(0..n);
        (s, rng.gen_range(s + 1..=n))
    };
    let (r0, r1) = {
        let s = rng.gen_range(0..m);
        (s, rng.gen_range(s + 1..=m))
    };
    let factor = rng.gen_range(-2.0..2.0);
    let c_seed = rng.gen();
    let build = |tape: &mut Tape, bound: &Bound| -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(c_seed);
        let (av, bv) = (bound.var(a), bound.var(b));
        let out = match op {
            "matmul" => tape.matmul(av, bv)?,
            "add_row" => tape.add_row(av, bv)?,
            "add" => tape.add(av, bv)?,
            "sub" => tape.sub(av, bv)?,
            "mul" => tape.mul(av, bv)?,
            "scale" => tape.scale(av, factor),
            "add_const" => tape.add_const(av, &cst)?,
            "mul_const" => tape.mul_const(av, &cst)?,
            "concat_cols" => tape.concat_cols(&[av, bv])?,
            "concat_rows" => tape.concat_rows(&[av, bv])?,
            "slice_cols" => tape.slice_cols(av, s0, s1)?,
            "slice_rows" => tape.slice_rows(av, r0, r1)?,
            "broadcast_rows" => tape.broadcast_rows(bv, m),
            "reshape" => tape.reshape(av, &[n, m])?,
            "relu" => tape.relu(av),
            "tanh" => tape.tanh(av),
            "sigmoid" => tape.sigmoid(av),
            "exp" => tape.exp(av),
            "conv3x3" => tape.conv3x3(bound.var(img), bv, bound.var(conv_b))?,
            "l1_to" => return tape.l1_to(av, &cst),
            "masked_l1_to" => return tape.masked_l1_to(bound.var(img), &img_target, &mask),
            "sum" => return Ok(tape.sum(av)),
            "mean" => return Ok(tape.mean(av)),
            other => unreachable!("unknown op {other}"),
        };
        readout(tape, out, &mut rng)
    };
    let coords = pick(&store, 8, &mut rng);
    check(&store, &coords, 1e-6, NN_RTOL, 1e-9, &build)
}

fn lifting(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=20);
    let mut store = ParamStore::new();
    let mu = store.add("mu", rand_tensor(&[n, 3], -1.0, 1.0, &mut rng));
    let verts: Vec<[f64; 3]> = (0..rng.gen_range(1..=15))
        .map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0)))
        .collect();
    let coords = pick(&store, 3 * n, &mut rng);
    check(&store, &coords, 1e-6, NN_RTOL, 1e-9, &|tape, bound| {
        lifting_on_tape(tape, &verts, bound.var(mu))
    })
}

fn stage_losses(seed: u64, stage2: bool) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rng.gen_range(3..=9), rng.gen_range(3..=9));
    let n = rng.gen_range(2..=10);
    let mut store = ParamStore::new();
    let img = store.add("rendered", rand_tensor(&[w * h, 3], 0.0, 1.0, &mut rng));
    let mu = store.add("mu", rand_tensor(&[n, 3], -1.0, 1.0, &mut rng));
    let target = rand_tensor(&[w * h, 3], 0.0, 1.0, &mut rng);
    let verts: Vec<[f64; 3]> = (0..6).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let mask = LipMask::from_box(w, h, 1.0, w as f64 - 1.0, 0.0, h as f64 / 2.0);
    let wts = LossWeights {
        perceptual: 0.0,
        lifting: rng.gen_range(0.0..1.0),
        lip: rng.gen_range(0.0..2.0),
    };
    let coords = pick(&store, 12, &mut rng);
    check(&store, &coords, 1e-6, NN_RTOL, 1e-9, &|tape, bound| {
        let inp = ObjectiveInputs {
            rendered: bound.var(img),
            target: &target,
            width: w,
            height: h,
            prior_vertices: &verts,
            vis_mu: bound.var(mu),
        };
        let terms = if stage2 {
            stage2_on_tape(tape, &inp, &mask, &wts, &NoPerceptual)?
        } else {
            stage1_on_tape(tape, &inp, &wts, &NoPerceptual)?
        };
        Ok(terms.total)
    })
}

fn motion_field(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MotionConfig {
        hash: HashGridConfig {
            levels: 2,
            table_size: 1 << 6,
            base_res: 4,
            ..HashGridConfig::default()
        },
        audio_dim: 4,
        hidden: 6,
        hidden_layers: 2,
    };
    let mut store = ParamStore::new();
    let fields = MotionFields::new(&mut store, &cfg, true, &mut rng)?;
    // Replace the zero output layers so every parameter receives gradient.
    for id in fields.param_ids() {
        if store.get(id).data().iter().all(|&v| v == 0.0) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = rand_tensor(&shape, -0.5, 0.5, &mut rng);
        }
    }
    let n = rng.gen_range(2..=8);
    let (mut cloud, _) = random_raster_scene(seed, n, 2, 16);
    let split = rng.gen_range(1..n);
    let tags: Vec<Branch> = (0..n).map(|i| if i < split { Branch::Visible } else { Branch::Occluded }).collect();
    cloud = GaussianCloud::from_arrays(
        2,
        cloud.mu_flat().to_vec(),
        cloud.scale_log_flat().to_vec(),
        cloud.rot_flat().to_vec(),
        cloud.opacity_logit_flat().to_vec(),
        cloud.feat_flat().to_vec(),
        tags,
    )?;
    let f_a: Vec<f64> = (0..cfg.audio_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c = rand_tensor(&[n, crate::motion::DELTA_DIM], -1.0, 1.0, &mut rng);
    let coords = pick(&store, 6, &mut rng);
    check(&store, &coords, 1e-6, NN_RTOL, 1e-9, &|tape, bound| {
        let d = dual_branch_on_tape(tape, bound, &fields, &cloud, &f_a)?;
        let y = tape.mul_const(d, &c)?;
        Ok(tape.sum(y))
    })
}

fn family(name: &str, opts: &SuiteOptions, rtol: f64, salt: u64, f: impl Fn(u64) -> Result<GradReport>) -> Result<FamilyResult> {
    let t = Instant::now();
    let mut report = GradReport::empty(rtol);
    for i in 0..opts.instances {
        let seed = opts.seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt << 32 | i as u64);
        report.merge(&f(seed)?);
    }
    Ok(FamilyResult {
        name: name.to_string(),
        instances: opts.instances,
        report,
        seconds: t.elapsed().as_secs_f64(),
    })
}

/// Runs every family; the result lists one entry per family.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<FamilyResult>> {
    let mut out = vec![
        family("raster∘decode", opts, RASTER_RTOL, 1, raster_decode)?,
        family("stage2 loss∘raster∘decode", opts, RASTER_RTOL, 2, loss_through_raster)?,
        family("encode", opts, NN_RTOL, 3, encode)?,
        family("motion field", opts, NN_RTOL, 4, motion_field)?,
        family("loss: lifting", opts, NN_RTOL, 5, lifting)?,
        family("loss: stage1", opts, NN_RTOL, 6, |s| stage_losses(s, false))?,
        family("loss: stage2", opts, NN_RTOL, 7, |s| stage_losses(s, true))?,
    ];
    for (i, op) in TAPE_OPS.iter().enumerate() {
        out.push(family(&format!("op: {op}"), opts, NN_RTOL, 100 + i as u64, |s| tape_op(op, s))?);
    }
    Ok(out)
}
