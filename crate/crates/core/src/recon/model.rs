use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{GlobalFeature, LocalFeatureMap};
use super::prior::PriorMesh;
use crate::error::{Error, Result};
use crate::gaussian::{Branch, CameraPose, GaussianCloud};
use crate::nn::{Activation, Bound, ConvStack, Mlp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::raster::CloudVars;

/// Where the feature plane sits in head space.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanePlacement {
    pub center: Vector3<f64>,
    /// Unit direction of increasing grid column.
    pub right: Vector3<f64>,
    /// Unit direction of increasing grid row.
    pub down: Vector3<f64>,
    /// Side length of the square grid.
    pub extent: f64,
    /// Largest lift along the normal on either side.
    pub half_depth: f64,
}

impl PlanePlacement {
    /// Square plane through the centre of the head box, facing `cam`, wide
    /// enough to cover the box as seen from the camera; the lift range is half
    /// the box depth along the viewing direction.
    pub fn facing(bbox_min: [f64; 3], bbox_max: [f64; 3], cam: &CameraPose) -> Self {
        let lo = Vector3::from(bbox_min);
        let hi = Vector3::from(bbox_max);
        let size = hi - lo;
        let row = |r: usize| Vector3::new(cam.rotation[(r, 0)], cam.rotation[(r, 1)], cam.rotation[(r, 2)]);
        let (right, down, fwd) = (row(0), row(1), row(2));
        let span = |d: Vector3<f64>| d.abs().dot(&size);
        Self {
            center: 0.5 * (lo + hi),
            right,
            down,
            extent: span(right).max(span(down)),
            half_depth: 0.5 * span(fwd),
        }
    }
}

/// Regular `P × P` grid of lifting points with a shared unit normal.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlane {
    pub res: usize,
    /// Row-major grid points, row 0 first.
    pub points: Vec<[f64; 3]>,
    pub normal: [f64; 3],
    pub spacing: f64,
    pub half_depth: f64,
}

impl FeaturePlane {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Primitives produced by the visible branch.
    pub fn primitive_count(&self) -> usize {
        2 * self.points.len()
    }
}

pub fn init_feature_plane(res: usize, placement: &PlanePlacement) -> Result<FeaturePlane> {
    if res < 8 {
        return Err(Error::Config(format!("feature plane resolution must be at least 8, got {res}")));
    }
    if !(placement.extent > 0.0 && placement.half_depth > 0.0) {
        return Err(Error::Config("feature plane extent and depth must be positive".into()));
    }
    let right = placement.right.normalize();
    let down = placement.down.normalize();
    // points toward the viewer for a camera-facing placement
    let normal = down.cross(&right).normalize();
    let spacing = placement.extent / res as f64;
    let mut points = Vec::with_capacity(res * res);
    for r in 0..res {
        for c in 0..res {
            let u = (c as f64 + 0.5) * spacing - 0.5 * placement.extent;
            let v = (r as f64 + 0.5) * spacing - 0.5 * placement.extent;
            let p = placement.center + u * right + v * down;
            points.push([p.x, p.y, p.z]);
        }
    }
    Ok(FeaturePlane {
        res,
        points,
        normal: [normal.x, normal.y, normal.z],
        spacing,
        half_depth: placement.half_depth,
    })
}

/// Sizes and initial values of the reconstruction networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub plane_res: usize,
    pub local_channels: usize,
    pub global_channels: usize,
    pub conv_hidden: usize,
    pub mlp_hidden: usize,
    pub feat_dim: usize,
    /// Visible splat radius as a multiple of the grid spacing.
    pub visible_scale: f64,
    /// Thickness of visible splats along the normal, relative to their radius.
    pub visible_flatness: f64,
    pub visible_opacity_logit: f64,
    /// Initial radius of completion-branch splats (scene units).
    pub occluded_scale: f64,
    pub occluded_opacity_logit: f64,
    /// Multiplier on the initial weights of each head's output layer.
    pub head_init_gain: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            plane_res: 64,
            local_channels: 64,
            global_channels: 64,
            conv_hidden: 32,
            mlp_hidden: 128,
            feat_dim: 8,
            visible_scale: 0.8,
            visible_flatness: 0.5,
            visible_opacity_logit: 1.0,
            occluded_scale: 0.03,
            occluded_opacity_logit: 0.0,
            head_init_gain: 0.1,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("plane_res", self.plane_res),
            ("local_channels", self.local_channels),
            ("global_channels", self.global_channels),
            ("conv_hidden", self.conv_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("feat_dim", self.feat_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("recon.{name} must be positive")));
        }
        if self.plane_res < 8 {
            return Err(Error::Config("recon.plane_res must be at least 8".into()));
        }
        if !(self.visible_scale > 0.0 && self.visible_flatness > 0.0 && self.occluded_scale > 0.0) {
            return Err(Error::Config("recon splat sizes must be positive".into()));
        }
        Ok(())
    }

    /// Channels emitted per pixel by each conv head.
    pub fn conv_out(&self) -> usize {
        9 + self.feat_dim
    }

    /// Channels emitted per vertex by the completion MLP.
    pub fn mlp_out(&self) -> usize {
        8 + self.feat_dim
    }
}

/// Trainable reconstruction networks. All parameters live under `recon.`.
#[derive(Debug, Clone)]
pub struct ReconParams {
    pub cfg: ReconConfig,
    pub conv0: ConvStack,
    pub conv1: ConvStack,
    pub completion: Mlp,
    /// Per-vertex weights `[V_sel, 1]`.
    pub vertex_weights: ParamId,
}

impl ReconParams {
    pub fn new(store: &mut ParamStore, cfg: &ReconConfig, n_selected: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if n_selected == 0 {
            return Err(Error::Empty("mouth/eye vertex selection"));
        }
        let convs = [cfg.local_channels, cfg.conv_hidden, cfg.conv_hidden, cfg.conv_out()];
        let conv0 = ConvStack::new(store, "recon.conv0", &convs, Activation::Relu, rng);
        let conv1 = ConvStack::new(store, "recon.conv1", &convs, Activation::Relu, rng);
        let widths = [1 + cfg.global_channels, cfg.mlp_hidden, cfg.mlp_hidden, cfg.mlp_out()];
        let completion = Mlp::new(store, "recon.completion", &widths, Activation::Relu, rng);
        for w in [conv0.last().weight, conv1.last().weight, completion.last().weight] {
            for v in store.get_mut(w).data_mut() {
                *v *= cfg.head_init_gain;
            }
        }
        let wv = (0..n_selected).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vertex_weights = store.add("recon.vertex_weights", Tensor::new(vec![n_selected, 1], wv)?);
        Ok(Self {
            cfg: cfg.clone(),
            conv0,
            conv1,
            completion,
            vertex_weights,
        })
    }

    pub fn n_selected(&self, store: &ParamStore) -> usize {
        store.get(self.vertex_weights).shape()[0]
    }
}

fn row_const(tape: &mut Tape, v: Vec<f64>) -> Var {
    tape.constant(Tensor::from_vec(v))
}

/// Splits a head output `[M, off + 8 + Z]` into the non-positional groups,
/// adding the base values to scale and rotation and opacity.
fn split_head(
    tape: &mut Tape,
    y: Var,
    first: usize,
    z: usize,
    scale_log: [f64; 3],
    opacity_logit: f64,
) -> Result<(Var, Var, Var, Var)> {
    let s = tape.slice_cols(y, first, first + 3)?;
    let base = row_const(tape, scale_log.to_vec());
    let s = tape.add_row(s, base)?;
    let q = tape.slice_cols(y, first + 3, first + 7)?;
    let ident = row_const(tape, vec![1.0, 0.0, 0.0, 0.0]);
    let q = tape.add_row(q, ident)?;
    let o = tape.slice_cols(y, first + 7, first + 8)?;
    let ob = row_const(tape, vec![opacity_logit]);
    let o = tape.add_row(o, ob)?;
    let f = tape.slice_cols(y, first + 8, first + 8 + z)?;
    Ok((s, q, o, f))
}

/// Lifted sheets from both conv heads, head 0 (`+n`) rows first.
pub fn visible_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    params: &ReconParams,
    local: &LocalFeatureMap,
    plane: &FeaturePlane,
) -> Result<CloudVars> {
    let cfg = &params.cfg;
    let p = plane.res;
    if local.height != p || local.width != p {
        return Err(Error::Dimension {
            what: "local feature map resolution vs feature plane",
            expected: p,
            got: if local.height != p { local.height } else { local.width },
        });
    }
    if local.channels != cfg.local_channels {
        return Err(Error::Dimension {
            what: "local feature channels",
            expected: cfg.local_channels,
            got: local.channels,
        });
    }
    let x = tape.constant(Tensor::new(vec![p, p, local.channels], local.data.clone())?);
    let points = Tensor::new(vec![p * p, 3], plane.points.iter().flatten().copied().collect())?;
    let r = cfg.visible_scale * plane.spacing;
    let scale_log = [r.ln(), r.ln(), (cfg.visible_flatness * r).ln()];
    let mut groups: Vec<[Var; 5]> = Vec::with_capacity(2);
    for (head, sign) in [(&params.conv0, 1.0), (&params.conv1, -1.0)] {
        let y = head.forward(tape, bound, x)?;
        let y = tape.reshape(y, &[p * p, cfg.conv_out()])?;
        let off = tape.slice_cols(y, 0, 1)?;
        let t = tape.tanh(off);
        let dir = tape.constant(Tensor::new(
            vec![1, 3],
            plane.normal.iter().map(|n| sign * plane.half_depth * n).collect(),
        )?);
        let d = tape.matmul(t, dir)?;
        let mu = tape.add_const(d, &points)?;
        let (s, q, o, f) = split_head(tape, y, 1, cfg.feat_dim, scale_log, cfg.visible_opacity_logit)?;
        groups.push([mu, s, q, o, f]);
    }
    concat_groups(tape, &groups)
}

/// One primitive per selected prior vertex, positioned exactly on it.
pub fn completion_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    params: &ReconParams,
    global: &GlobalFeature,
    prior: &PriorMesh,
) -> Result<CloudVars> {
    let cfg = &params.cfg;
    let sel = prior.selected_positions();
    if sel.is_empty() {
        return Err(Error::Empty("mouth/eye vertex selection"));
    }
    let w = bound.var(params.vertex_weights);
    let n_w = tape.value(w).shape()[0];
    if n_w != sel.len() {
        return Err(Error::Dimension {
            what: "per-vertex weights vs selected prior vertices",
            expected: sel.len(),
            got: n_w,
        });
    }
    if global.len() != cfg.global_channels {
        return Err(Error::Dimension {
            what: "global feature length",
            expected: cfg.global_channels,
            got: global.len(),
        });
    }
    let g = tape.constant(Tensor::from_vec(global.data.clone()));
    let g = tape.broadcast_rows(g, sel.len());
    let input = tape.concat_cols(&[w, g])?;
    let y = params.completion.forward(tape, bound, input)?;
    let mu = tape.constant(Tensor::new(vec![sel.len(), 3], sel.iter().flatten().copied().collect())?);
    let r = cfg.occluded_scale.ln();
    let (s, q, o, f) = split_head(tape, y, 0, cfg.feat_dim, [r, r, r], cfg.occluded_opacity_logit)?;
    Ok(CloudVars {
        mu,
        scale_log: s,
        rot: q,
        opacity_logit: o,
        feat: f,
    })
}

fn concat_groups(tape: &mut Tape, groups: &[[Var; 5]]) -> Result<CloudVars> {
    let col = |tape: &mut Tape, k: usize| tape.concat_rows(&groups.iter().map(|g| g[k]).collect::<Vec<_>>());
    Ok(CloudVars {
        mu: col(tape, 0)?,
        scale_log: col(tape, 1)?,
        rot: col(tape, 2)?,
        opacity_logit: col(tape, 3)?,
        feat: col(tape, 4)?,
    })
}

/// Visible rows followed by completion rows, matching [`crate::merge_clouds`].
pub fn merge_vars(tape: &mut Tape, vis: &CloudVars, occ: &CloudVars) -> Result<CloudVars> {
    concat_groups(tape, &[vis.as_array(), occ.as_array()])
}

/// Everything a reconstruction consumes besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ReconInputs<'a> {
    pub local: &'a LocalFeatureMap,
    pub global: &'a GlobalFeature,
    pub plane: &'a FeaturePlane,
    pub prior: &'a PriorMesh,
}

/// Both branches on the tape; `None` skips the completion branch.
pub struct ReconVars {
    pub visible: CloudVars,
    pub occluded: Option<CloudVars>,
    pub merged: CloudVars,
    pub tags: Vec<Branch>,
}

pub fn reconstruct_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    params: &ReconParams,
    inp: &ReconInputs,
    with_completion: bool,
) -> Result<ReconVars> {
    let visible = visible_on_tape(tape, bound, params, inp.local, inp.plane)?;
    let n_vis = inp.plane.primitive_count();
    let mut tags = vec![Branch::Visible; n_vis];
    let (occluded, merged) = if with_completion {
        let occ = completion_on_tape(tape, bound, params, inp.global, inp.prior)?;
        tags.extend(std::iter::repeat_n(Branch::Occluded, tape.value(occ.opacity_logit).numel()));
        let merged = merge_vars(tape, &visible, &occ)?;
        (Some(occ), merged)
    } else {
        (None, visible)
    };
    Ok(ReconVars {
        visible,
        occluded,
        merged,
        tags,
    })
}

fn frozen(store: &ParamStore) -> (Tape, Bound) {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    (tape, bound)
}

pub fn visible_branch(
    local: &LocalFeatureMap,
    plane: &FeaturePlane,
    params: &ReconParams,
    store: &ParamStore,
) -> Result<GaussianCloud> {
    let (mut tape, bound) = frozen(store);
    let v = visible_on_tape(&mut tape, &bound, params, local, plane)?;
    v.to_cloud(&tape, &vec![Branch::Visible; plane.primitive_count()])
}

pub fn completion_branch(
    global: &GlobalFeature,
    prior: &PriorMesh,
    params: &ReconParams,
    store: &ParamStore,
) -> Result<GaussianCloud> {
    let (mut tape, bound) = frozen(store);
    let v = completion_on_tape(&mut tape, &bound, params, global, prior)?;
    v.to_cloud(&tape, &vec![Branch::Occluded; prior.selected().len()])
}

pub fn reconstruct(inp: &ReconInputs, params: &ReconParams, store: &ParamStore) -> Result<GaussianCloud> {
    let (mut tape, bound) = frozen(store);
    let r = reconstruct_on_tape(&mut tape, &bound, params, inp, true)?;
    r.merged.to_cloud(&tape, &r.tags)
}
