//! Audio-conditioned motion fields.
//!
//! A field maps `encode(μ) ⊕ f_a` through an MLP to eleven deltas per
//! primitive (Δμ 3, Δs 3, Δr 4, Δα 1) that are added to the unconstrained
//! parameters. The coarse field drives visible primitives and the fine field
//! occluded ones.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_on_tape, HashGridConfig, TriPlaneTables};
use crate::error::{Error, Result};
use crate::gaussian::{Branch, CameraPose, GaussianCloud};
use crate::nn::{zero_init_last_layer, Activation, Bound, Mlp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::raster::{CloudVars, FeatureImage, Rasterizer};

const AUDIO_MAGIC: &[u8; 4] = b"AUD\x01";

/// Per-frame audio conditioning vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureTrack {
    pub dim: usize,
    pub fps_num: u32,
    pub fps_den: u32,
    /// `N_t × D_a`, frame-major.
    pub data: Vec<f64>,
}

impl AudioFeatureTrack {
    pub fn new(dim: usize, fps_num: u32, fps_den: u32, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Contract(format!(
                "audio data of {} values does not split into frames of {dim}",
                data.len()
            )));
        }
        if fps_num == 0 || fps_den == 0 {
            return Err(Error::Contract("audio frame rate must be positive".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("audio features are not finite".into()));
        }
        Ok(Self {
            dim,
            fps_num,
            fps_den,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn fps(&self) -> f64 {
        self.fps_num as f64 / self.fps_den as f64
    }

    /// Frames in the given order.
    pub fn reordered(&self, order: &[usize]) -> Self {
        let data = order.iter().flat_map(|&t| self.frame(t).iter().copied()).collect();
        Self { data, ..self.clone() }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + 8 * self.data.len());
        buf.extend_from_slice(AUDIO_MAGIC);
        for v in [self.len() as u32, self.dim as u32, self.fps_num, self.fps_den] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || bytes[..3] != AUDIO_MAGIC[..3] {
            return Err(Error::format(path, "bad magic or truncated header"));
        }
        if bytes[3] != AUDIO_MAGIC[3] {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: bytes[3] as u32,
                expected: AUDIO_MAGIC[3] as u32,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (n, d, num, den) = (word(0) as usize, word(1) as usize, word(2), word(3));
        let body = &bytes[20..];
        if body.len() != 8 * n * d {
            return Err(Error::format(path, format!("expected {n}x{d} values, found {} bytes", body.len())));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(d, num, den, data).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Embeds a scalar driving curve with a fixed random projection:
/// `f_a[t][k] = tanh(u_k · c[t] + v_k)`.
pub fn synthetic_audio(curve: &[f64], dim: usize, seed: u64, fps: u32) -> Result<AudioFeatureTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let data = curve
        .iter()
        .flat_map(|&c| (0..dim).map(|k| (u[k] * c + v[k]).tanh()).collect::<Vec<_>>())
        .collect();
    AudioFeatureTrack::new(dim, fps, 1, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldBranch {
    Coarse,
    Fine,
}

impl FieldBranch {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldBranch::Coarse => "coarse",
            FieldBranch::Fine => "fine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub hash: HashGridConfig,
    pub audio_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            hash: HashGridConfig::default(),
            audio_dim: 32,
            hidden: 64,
            hidden_layers: 2,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        self.hash.validate()?;
        if self.audio_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("motion audio_dim and hidden must be positive".into()));
        }
        Ok(())
    }
}

pub const DELTA_DIM: usize = 11;

/// Encoder tables and deformation MLP of one branch, under `motion.<branch>.`.
#[derive(Debug, Clone)]
pub struct MotionFieldParams {
    pub branch: FieldBranch,
    pub cfg: MotionConfig,
    /// Tables shaped `[3·L·T, F]`.
    pub tables: ParamId,
    pub mlp: Mlp,
}

impl MotionFieldParams {
    /// Small random tables and an MLP whose last layer is zero, so the field
    /// starts as the identity deformation.
    pub fn new(store: &mut ParamStore, cfg: &MotionConfig, branch: FieldBranch, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let prefix = format!("motion.{}", branch.as_str());
        let tables = TriPlaneTables::random(cfg.hash.clone(), rng)?;
        let tables = store.add(format!("{prefix}.tables"), tables.to_tensor());
        let mut widths = vec![cfg.hash.output_dim() + cfg.audio_dim];
        widths.extend(std::iter::repeat_n(cfg.hidden, cfg.hidden_layers));
        widths.push(DELTA_DIM);
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), &widths, Activation::Relu, rng);
        zero_init_last_layer(&mlp, store);
        Ok(Self {
            branch,
            cfg: cfg.clone(),
            tables,
            mlp,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.tables];
        v.extend(self.mlp.param_ids());
        v
    }
}

/// Coarse field plus an optional fine field. Without a fine field the coarse
/// one drives every primitive.
#[derive(Debug, Clone)]
pub struct MotionFields {
    pub coarse: MotionFieldParams,
    pub fine: Option<MotionFieldParams>,
}

impl MotionFields {
    pub fn new(store: &mut ParamStore, cfg: &MotionConfig, with_fine: bool, rng: &mut impl Rng) -> Result<Self> {
        let coarse = MotionFieldParams::new(store, cfg, FieldBranch::Coarse, rng)?;
        let fine = if with_fine {
            Some(MotionFieldParams::new(store, cfg, FieldBranch::Fine, rng)?)
        } else {
            None
        };
        Ok(Self { coarse, fine })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.coarse.param_ids();
        if let Some(f) = &self.fine {
            v.extend(f.param_ids());
        }
        v
    }

    pub fn audio_dim(&self) -> usize {
        self.coarse.cfg.audio_dim
    }
}

/// Per-primitive additive updates in unconstrained parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationDelta {
    pub d_mu: Vec<f64>,
    pub d_scale_log: Vec<f64>,
    pub d_rot: Vec<f64>,
    pub d_opacity_logit: Vec<f64>,
}

impl DeformationDelta {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_mu: vec![0.0; 3 * n],
            d_scale_log: vec![0.0; 3 * n],
            d_rot: vec![0.0; 4 * n],
            d_opacity_logit: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_opacity_logit.is_empty()
    }

    /// From row-major `[N, 11]` field outputs.
    pub fn from_rows(rows: &[f64]) -> Self {
        let n = rows.len() / DELTA_DIM;
        let mut d = Self::zeros(n);
        for (i, r) in rows.chunks_exact(DELTA_DIM).enumerate() {
            d.d_mu[3 * i..3 * i + 3].copy_from_slice(&r[0..3]);
            d.d_scale_log[3 * i..3 * i + 3].copy_from_slice(&r[3..6]);
            d.d_rot[4 * i..4 * i + 4].copy_from_slice(&r[6..10]);
            d.d_opacity_logit[i] = r[10];
        }
        d
    }

    pub fn is_zero(&self) -> bool {
        [&self.d_mu, &self.d_scale_log, &self.d_rot, &self.d_opacity_logit]
            .iter()
            .all(|v| v.iter().all(|&x| x == 0.0))
    }

    pub fn all_finite(&self) -> bool {
        [&self.d_mu, &self.d_scale_log, &self.d_rot, &self.d_opacity_logit]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Field outputs `[N, 11]` on the tape for fixed positions and one audio frame.
pub fn motion_field_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    params: &MotionFieldParams,
    positions: &[[f64; 3]],
    f_a: &[f64],
) -> Result<Var> {
    if f_a.len() != params.cfg.audio_dim {
        return Err(Error::Dimension {
            what: "audio feature",
            expected: params.cfg.audio_dim,
            got: f_a.len(),
        });
    }
    let enc = encode_on_tape(tape, &params.cfg.hash, bound.var(params.tables), positions)?;
    let a = tape.constant(Tensor::from_vec(f_a.to_vec()));
    let a = tape.broadcast_rows(a, positions.len());
    let x = tape.concat_cols(&[enc, a])?;
    params.mlp.forward(tape, bound, x)
}

pub fn motion_field_forward(
    positions: &[[f64; 3]],
    f_a: &[f64],
    params: &MotionFieldParams,
    store: &ParamStore,
) -> Result<DeformationDelta> {
    if positions.is_empty() {
        return Ok(DeformationDelta::zeros(0));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let y = motion_field_on_tape(&mut tape, &bound, params, positions, f_a)?;
    Ok(DeformationDelta::from_rows(tape.value(y).data()))
}

fn add_into(dst: &mut [f64], d: &[f64]) {
    for (x, &v) in dst.iter_mut().zip(d) {
        // leave untouched entries bitwise equal, including signed zeros
        if v != 0.0 {
            *x += v;
        }
    }
}

/// `{μ + Δμ, s + Δs, r + Δr, α + Δα, f}`.
pub fn apply_deformation(cloud: &GaussianCloud, delta: &DeformationDelta) -> Result<GaussianCloud> {
    if delta.len() != cloud.len() {
        return Err(Error::Dimension {
            what: "deformation delta",
            expected: cloud.len(),
            got: delta.len(),
        });
    }
    let mut out = cloud.clone();
    add_into(out.mu_flat_mut(), &delta.d_mu);
    add_into(out.scale_log_flat_mut(), &delta.d_scale_log);
    add_into(out.rot_flat_mut(), &delta.d_rot);
    add_into(out.opacity_logit_flat_mut(), &delta.d_opacity_logit);
    Ok(out)
}

/// Applies field outputs `[N, 11]` to cloud variables on the tape.
pub fn apply_on_tape(tape: &mut Tape, vars: &CloudVars, delta: Var) -> Result<CloudVars> {
    let mut part = |x: Var, a: usize, b: usize| -> Result<Var> {
        let d = tape.slice_cols(delta, a, b)?;
        tape.add(x, d)
    };
    Ok(CloudVars {
        mu: part(vars.mu, 0, 3)?,
        scale_log: part(vars.scale_log, 3, 6)?,
        rot: part(vars.rot, 6, 10)?,
        opacity_logit: part(vars.opacity_logit, 10, 11)?,
        feat: vars.feat,
    })
}

/// Number of leading visible primitives; the rest must all be occluded.
pub fn visible_prefix(tags: &[Branch]) -> Result<usize> {
    let n_vis = tags.iter().take_while(|&&t| t == Branch::Visible).count();
    if tags[n_vis..].iter().any(|&t| t != Branch::Occluded) {
        return Err(Error::Contract("cloud must list visible primitives before occluded ones".into()));
    }
    Ok(n_vis)
}

/// Field outputs for a whole cloud on the tape: coarse rows for the visible
/// prefix, fine rows for the occluded rest (coarse everywhere without a fine field).
pub fn dual_branch_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    fields: &MotionFields,
    cloud: &GaussianCloud,
    f_a: &[f64],
) -> Result<Var> {
    let positions: Vec<[f64; 3]> = (0..cloud.len()).map(|i| cloud.mu(i)).collect();
    let Some(fine) = &fields.fine else {
        return motion_field_on_tape(tape, bound, &fields.coarse, &positions, f_a);
    };
    let n_vis = visible_prefix(cloud.tags())?;
    let mut parts = Vec::with_capacity(2);
    if n_vis > 0 {
        parts.push(motion_field_on_tape(tape, bound, &fields.coarse, &positions[..n_vis], f_a)?);
    }
    if n_vis < positions.len() {
        parts.push(motion_field_on_tape(tape, bound, fine, &positions[n_vis..], f_a)?);
    }
    tape.concat_rows(&parts)
}

/// Deforms `cloud` for one audio frame: the coarse field moves visible
/// primitives and the fine field occluded ones, in any tag order.
pub fn dual_branch_animate(
    cloud: &GaussianCloud,
    f_a: &[f64],
    fields: &MotionFields,
    store: &ParamStore,
) -> Result<GaussianCloud> {
    let positions: Vec<[f64; 3]> = (0..cloud.len()).map(|i| cloud.mu(i)).collect();
    let mut delta = DeformationDelta::zeros(cloud.len());
    let groups: Vec<(Vec<usize>, &MotionFieldParams)> = match &fields.fine {
        None => vec![((0..cloud.len()).collect(), &fields.coarse)],
        Some(fine) => vec![
            (cloud.indices_of(Branch::Visible), &fields.coarse),
            (cloud.indices_of(Branch::Occluded), fine),
        ],
    };
    for (rows, field) in groups {
        let pos: Vec<[f64; 3]> = rows.iter().map(|&i| positions[i]).collect();
        let d = motion_field_forward(&pos, f_a, field, store)?;
        for (k, &i) in rows.iter().enumerate() {
            delta.d_mu[3 * i..3 * i + 3].copy_from_slice(&d.d_mu[3 * k..3 * k + 3]);
            delta.d_scale_log[3 * i..3 * i + 3].copy_from_slice(&d.d_scale_log[3 * k..3 * k + 3]);
            delta.d_rot[4 * i..4 * i + 4].copy_from_slice(&d.d_rot[4 * k..4 * k + 4]);
            delta.d_opacity_logit[i] = d.d_opacity_logit[k];
        }
    }
    apply_deformation(cloud, &delta)
}

/// Deform-then-render for every frame of `track`; the cloud is reconstructed
/// once by the caller and reused.
pub fn animate_sequence(
    cloud: &GaussianCloud,
    track: &AudioFeatureTrack,
    fields: &MotionFields,
    store: &ParamStore,
    rast: &Rasterizer,
    cam: &CameraPose,
) -> Result<Vec<FeatureImage>> {
    if track.is_empty() {
        return Err(Error::Empty("audio track"));
    }
    (0..track.len())
        .map(|t| {
            let deformed = dual_branch_animate(cloud, track.frame(t), fields, store)?;
            rast.render(&deformed, cam)
        })
        .collect()
}

#[cfg(test)]
mod tests;
