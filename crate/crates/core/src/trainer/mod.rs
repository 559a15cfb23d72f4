//! Two-stage training: Stage 1 fits reconstruction and decoder with the
//! motion fields absent, Stage 2 freezes them and fits the motion fields.

mod checkpoint;
mod eval;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{CameraPose, GaussianCloud};
use crate::io::SceneBundle;
use crate::motion::{apply_on_tape, dual_branch_on_tape, visible_prefix, MotionConfig, MotionFields};
use crate::nn::{adam_step, AdamState, ParamId, ParamStore, Tape, Tensor};
use crate::objectives::{
    lip_mask_from_landmarks, psnr, stage1_on_tape, stage2_on_tape, LossValues, LossWeights, NoPerceptual,
    ObjectiveInputs,
};
use crate::raster::{decode_on_tape, rasterize_on_tape, CloudVars, Decoder, RasterConfig, Rasterizer};
use crate::recon::{
    init_feature_plane, reconstruct, reconstruct_on_tape, FeaturePlane, GlobalFeature, LocalFeatureMap,
    PlanePlacement, PriorMesh, ReconConfig, ReconInputs, ReconParams,
};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use eval::{
    animate_frames, evaluate_views, lip_anchors, lip_sync_report, render_rgb, Anchor, LipAnchors, LipSyncReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Stage-1 loss weights.
    pub weights: LossWeights,
    pub stage2_weights: LossWeights,
    /// Log a held-out PSNR every this many iterations (0 disables).
    pub eval_every: usize,
    /// Lip-mask margin in pixels.
    pub lip_margin: f64,
    /// `false` drops the completion branch in both stages.
    pub completion_branch: bool,
    /// `false` routes occluded primitives through the coarse field.
    pub fine_field: bool,
    /// Reconstruct each Stage-1 sample from its own frame instead of the source frame.
    pub per_frame_source: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 200_000,
            lr: crate::nn::DEFAULT_LR,
            weights: LossWeights::default(),
            stage2_weights: LossWeights::default(),
            eval_every: 0,
            lip_margin: 4.0,
            completion_branch: true,
            fine_field: true,
            per_frame_source: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.weights.validate()?;
        self.stage2_weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub refiner: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { refiner: true }
    }
}

/// Everything a run is configured by; serialised as sectioned TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Rasterizer worker threads; 0 uses the global pool. Results do not
    /// depend on it, so it is left out of serialised configs and checkpoints.
    #[serde(skip_serializing)]
    pub threads: usize,
    pub recon: ReconConfig,
    pub motion: MotionConfig,
    pub decoder: DecoderConfig,
    pub train: TrainingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// 64×64 scenes, P = 64, Z = 8, 2,000 iterations per stage, λ_f = 2 in Stage 2.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            threads: 0,
            recon: ReconConfig::default(),
            motion: MotionConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainingConfig {
                iterations: 2_000,
                stage2_weights: LossWeights {
                    lifting: 2.0,
                    ..LossWeights::default()
                },
                ..TrainingConfig::default()
            },
        }
    }

    /// P = 296, Z = 32, 200,000 iterations per stage.
    pub fn full() -> Self {
        Self {
            seed: 0,
            threads: 0,
            recon: ReconConfig {
                plane_res: 296,
                feat_dim: 32,
                ..ReconConfig::default()
            },
            motion: MotionConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainingConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (expected desk or full)"))),
        }
    }

    /// Preset values, then the config file, then `key=value` overrides.
    pub fn load(preset: &str, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::load_onto(Self::preset(preset)?, path, overrides)
    }

    /// Like [`PipelineConfig::load`] with an explicit base, e.g. a checkpoint's config.
    pub fn load_onto(base: Self, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let threads = base.threads;
        let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        table.insert("threads".into(), toml::Value::Integer(threads as i64));
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::format(p, e.to_string()))?;
            merge_tables(&mut table, file);
        }
        for ov in overrides {
            crate::io::apply_override(&mut table, ov)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.recon.validate()?;
        self.motion.validate()?;
        self.train.validate()
    }

    pub fn rasterizer(&self) -> Rasterizer {
        Rasterizer::new(RasterConfig {
            threads: (self.threads > 0).then_some(self.threads),
            ..RasterConfig::default()
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// The sections that fix parameter shapes and initial values.
    fn model_echo(&self) -> String {
        let mut t = toml::Table::try_from(self).expect("config serialises");
        t.remove("train");
        toml::to_string(&t).expect("table serialises")
    }
}

fn merge_tables(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge_tables(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(0.02, 0.98);
    (p / (1.0 - p)).ln()
}

/// All trainable tensors of the pipeline in one store.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub recon: ReconParams,
    pub decoder: Decoder,
    pub fields: MotionFields,
}

impl Model {
    /// Builds every parameter from `cfg.seed`. The decoder bias starts at the
    /// logit of `background` so empty pixels reproduce it.
    pub fn new(cfg: &PipelineConfig, n_selected: usize, background: [f64; 3]) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let recon = ReconParams::new(&mut store, &cfg.recon, n_selected, &mut rng)?;
        let decoder = Decoder::new(&mut store, "decoder", cfg.recon.feat_dim, 0.0, cfg.decoder.refiner, &mut rng);
        store
            .get_mut(decoder.bias)
            .data_mut()
            .copy_from_slice(&background.map(logit));
        let fields = MotionFields::new(&mut store, &cfg.motion, true, &mut rng)?;
        Ok(Self {
            store,
            recon,
            decoder,
            fields,
        })
    }

    pub fn stage1_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix(&["recon.", "decoder."])
    }

    pub fn motion_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix(&["motion."])
    }

    /// The fields used for animation under `train.fine_field`.
    pub fn active_fields(&self, fine_field: bool) -> MotionFields {
        MotionFields {
            coarse: self.fields.coarse.clone(),
            fine: if fine_field { self.fields.fine.clone() } else { None },
        }
    }

    /// Model shaped like `cfg` with the parameters of `ckpt`.
    pub fn from_checkpoint(cfg: &PipelineConfig, ckpt: &Checkpoint) -> Result<Self> {
        let n_sel = ckpt
            .params
            .find("recon.vertex_weights")
            .map(|id| ckpt.params.get(id).shape()[0])
            .ok_or_else(|| Error::Checkpoint("missing recon.vertex_weights".into()))?;
        let mut m = Self::new(cfg, n_sel, [0.5; 3])?;
        if m.store.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, config expects {}",
                ckpt.params.len(),
                m.store.len()
            )));
        }
        m.store.load_from(&ckpt.params)?;
        Ok(m)
    }
}

/// One supervised frame.
#[derive(Debug, Clone)]
pub struct Sample {
    pub frame: usize,
    pub local: Arc<LocalFeatureMap>,
    pub global: Arc<GlobalFeature>,
    /// Prior fitted to this frame.
    pub prior: PriorMesh,
    pub camera: CameraPose,
    /// `[H·W, 3]`.
    pub target: Tensor,
    pub audio: Option<Vec<f64>>,
}

/// Training frames plus the source frame a head is reconstructed from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub source: Sample,
    pub plane: FeaturePlane,
    pub background: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl Dataset {
    /// Loads `frames` of a bundle (all training frames when `None`).
    pub fn from_bundle(bundle: &SceneBundle, cfg: &PipelineConfig, frames: Option<&[usize]>) -> Result<Self> {
        let m = &bundle.manifest;
        let p = cfg.recon.plane_res;
        let audio = bundle.audio()?;
        if let Some(a) = &audio {
            if a.len() != bundle.len() {
                return Err(Error::Dimension {
                    what: "audio frames",
                    expected: bundle.len(),
                    got: a.len(),
                });
            }
        }
        let load = |i: usize, with_features: bool, src: Option<&Sample>| -> Result<Sample> {
            let (local, global) = match (with_features, src) {
                (false, Some(s)) => (s.local.clone(), s.global.clone()),
                _ => {
                    let (l, g) = bundle.features(i)?;
                    check_channels(&l, &g, &cfg.recon)?;
                    (Arc::new(l.resampled(p)), Arc::new(g))
                }
            };
            Ok(Sample {
                frame: i,
                local,
                global,
                prior: bundle.prior(i)?,
                camera: bundle.camera(i)?,
                target: bundle.image(i)?.to_tensor(),
                audio: audio.as_ref().map(|a| a.frame(i).to_vec()),
            })
        };
        let source = load(m.source, true, None)?;
        let chosen: Vec<usize> = match frames {
            Some(f) => f.to_vec(),
            None => bundle.training_frames(),
        };
        if chosen.is_empty() {
            return Err(Error::Empty("training frames"));
        }
        let samples = chosen
            .iter()
            .map(|&i| load(i, cfg.train.per_frame_source, Some(&source)))
            .collect::<Result<Vec<_>>>()?;
        let placement = PlanePlacement::facing(m.bbox_min, m.bbox_max, &source.camera);
        let plane = init_feature_plane(p, &placement)?;
        let background = border_mean(&source.target, m.width, m.height);
        Ok(Self {
            samples,
            source,
            plane,
            background,
            width: m.width,
            height: m.height,
        })
    }

    pub fn n_selected(&self) -> usize {
        self.source.prior.selected().len()
    }

    /// Sample used at `iteration`: a seeded permutation per epoch, so the order
    /// depends only on `(seed, iteration)`.
    pub fn sample_at(&self, seed: u64, iteration: usize) -> &Sample {
        let n = self.samples.len();
        let epoch = (iteration / n) as u64;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        &self.samples[order[iteration % n]]
    }
}

fn check_channels(l: &LocalFeatureMap, g: &GlobalFeature, cfg: &ReconConfig) -> Result<()> {
    if l.channels != cfg.local_channels {
        return Err(Error::Dimension {
            what: "local feature channels",
            expected: cfg.local_channels,
            got: l.channels,
        });
    }
    if g.len() != cfg.global_channels {
        return Err(Error::Dimension {
            what: "global feature channels",
            expected: cfg.global_channels,
            got: g.len(),
        });
    }
    Ok(())
}

/// Mean colour of the outermost pixel ring.
fn border_mean(img: &Tensor, w: usize, h: usize) -> [f64; 3] {
    let d = img.data();
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                for k in 0..3 {
                    acc[k] += d[(y * w + x) * 3 + k];
                }
                n += 1.0;
            }
        }
    }
    acc.map(|v| v / n)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub frame: usize,
    pub loss: LossValues,
    pub psnr_db: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut s = String::from("iteration,frame,total,l1,perceptual,lifting,lip,psnr_db\n");
    for r in rows {
        let l = &r.loss;
        s.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6}\n",
            r.iteration, r.frame, l.total, l.l1, l.perceptual, l.lifting, l.lip, r.psnr_db
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

fn recon_inputs<'a>(s: &'a Sample, prior: &'a PriorMesh, plane: &'a FeaturePlane) -> ReconInputs<'a> {
    ReconInputs {
        local: &s.local,
        global: &s.global,
        plane,
        prior,
    }
}

fn collect_grads(tape: &Tape, bound: &crate::nn::Bound, ids: &[ParamId]) -> Vec<(ParamId, Vec<f64>)> {
    ids.iter()
        .filter_map(|&id| tape.grad(bound.var(id)).map(|g| (id, g.to_vec())))
        .collect()
}

/// Loss terms, training-frame PSNR and gradients of one Stage-1 step.
pub fn stage1_step(
    model: &Model,
    ds: &Dataset,
    s: &Sample,
    cfg: &PipelineConfig,
    rast: &Rasterizer,
) -> Result<(LossValues, f64, Vec<(ParamId, Vec<f64>)>)> {
    let ids = model.stage1_ids();
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, |id| ids.contains(&id));
    let inp = recon_inputs(s, &s.prior, &ds.plane);
    let rv = reconstruct_on_tape(&mut tape, &bound, &model.recon, &inp, cfg.train.completion_branch)?;
    let (feat, _) = rasterize_on_tape(&mut tape, rast, &s.camera, &rv.merged)?;
    let rgb = decode_on_tape(&mut tape, &bound, &model.decoder, feat, ds.width, ds.height)?;
    let obj = ObjectiveInputs {
        rendered: rgb,
        target: &s.target,
        width: ds.width,
        height: ds.height,
        prior_vertices: &s.prior.vertices,
        vis_mu: rv.visible.mu,
    };
    let terms = stage1_on_tape(&mut tape, &obj, &cfg.train.weights, &NoPerceptual)?;
    let p = psnr(tape.value(rgb).data(), s.target.data())?;
    tape.backward(terms.total)?;
    Ok((terms.values(&tape), p, collect_grads(&tape, &bound, &ids)))
}

/// The head reconstructed once from the source frame and its prior.
pub fn source_cloud(model: &Model, ds: &Dataset, completion_branch: bool) -> Result<GaussianCloud> {
    let inp = recon_inputs(&ds.source, &ds.source.prior, &ds.plane);
    if completion_branch {
        reconstruct(&inp, &model.recon, &model.store)
    } else {
        crate::recon::visible_branch(&ds.source.local, &ds.plane, &model.recon, &model.store)
    }
}

/// Loss terms, PSNR and motion-field gradients of one Stage-2 step on a
/// frozen cloud.
pub fn stage2_step(
    model: &Model,
    ds: &Dataset,
    cloud: &GaussianCloud,
    s: &Sample,
    cfg: &PipelineConfig,
    rast: &Rasterizer,
) -> Result<(LossValues, f64, Vec<(ParamId, Vec<f64>)>)> {
    let f_a = s
        .audio
        .as_deref()
        .ok_or_else(|| Error::Contract(format!("frame {} has no audio features", s.frame)))?;
    let fields = model.active_fields(cfg.train.fine_field);
    let ids = model.motion_ids();
    let n_vis = visible_prefix(cloud.tags())?;
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, |id| ids.contains(&id));
    let vars = CloudVars::constant(&mut tape, cloud);
    let delta = dual_branch_on_tape(&mut tape, &bound, &fields, cloud, f_a)?;
    let deformed = apply_on_tape(&mut tape, &vars, delta)?;
    let (feat, _) = rasterize_on_tape(&mut tape, rast, &s.camera, &deformed)?;
    let rgb = decode_on_tape(&mut tape, &bound, &model.decoder, feat, ds.width, ds.height)?;
    let vis_mu = tape.slice_rows(deformed.mu, 0, n_vis)?;
    let obj = ObjectiveInputs {
        rendered: rgb,
        target: &s.target,
        width: ds.width,
        height: ds.height,
        prior_vertices: &s.prior.vertices,
        vis_mu,
    };
    let mask = lip_mask_from_landmarks(&s.prior, &s.camera, cfg.train.lip_margin);
    let terms = stage2_on_tape(&mut tape, &obj, &mask, &cfg.train.stage2_weights, &NoPerceptual)?;
    let p = psnr(tape.value(rgb).data(), s.target.data())?;
    tape.backward(terms.total)?;
    Ok((terms.values(&tape), p, collect_grads(&tape, &bound, &ids)))
}

fn apply_grads(store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], adam: &mut AdamState) {
    let refs: Vec<(ParamId, &[f64])> = grads.iter().map(|(id, g)| (*id, g.as_slice())).collect();
    adam_step(store, &refs, adam);
}

fn check_resume(ckpt: &Checkpoint, stage: u8, cfg: &PipelineConfig) -> Result<()> {
    if ckpt.stage != stage {
        return Err(Error::Checkpoint(format!(
            "cannot resume a stage-{} checkpoint in a stage-{stage} run",
            ckpt.stage
        )));
    }
    ckpt.check_model_config(cfg)
}

/// Stage 1 from scratch, or from `resume` (a Stage-1 checkpoint), up to
/// `cfg.train.iterations`.
pub fn train_stage1(cfg: &PipelineConfig, ds: &Dataset, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut model, mut adam, start) = match resume {
        Some(c) => {
            check_resume(c, 1, cfg)?;
            let model = Model::from_checkpoint(cfg, c)?;
            let adam = c.adam.clone().ok_or_else(|| Error::Checkpoint("no optimizer state".into()))?;
            (model, adam, c.iteration as usize)
        }
        None => {
            let model = Model::new(cfg, ds.n_selected(), ds.background)?;
            let adam = AdamState::new(&model.store, cfg.train.lr);
            (model, adam, 0)
        }
    };
    let rast = cfg.rasterizer();
    let motion = model.motion_ids();
    let motion_fp = model.store.fingerprint(&motion);
    let mut log = Vec::with_capacity(cfg.train.iterations.saturating_sub(start));
    for it in start..cfg.train.iterations {
        let s = ds.sample_at(cfg.seed, it);
        let (loss, p, grads) = stage1_step(&model, ds, s, cfg, &rast)?;
        apply_grads(&mut model.store, &grads, &mut adam);
        log.push(LogRow {
            iteration: it,
            frame: s.frame,
            loss,
            psnr_db: p,
        });
        if cfg.train.eval_every > 0 && (it + 1) % cfg.train.eval_every == 0 {
            log::info!("stage 1 iteration {}: loss {:.5} psnr {:.2}", it + 1, loss.total, p);
        }
    }
    if model.store.fingerprint(&motion) != motion_fp {
        return Err(Error::Contract("motion fields changed during stage 1".into()));
    }
    let checkpoint = Checkpoint::new(1, cfg.train.iterations as u64, cfg, &model.store, Some(adam));
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
    })
}

/// Stage 2 from a Stage-1 checkpoint (fresh optimizer), or resumed from a
/// Stage-2 checkpoint.
pub fn train_stage2(cfg: &PipelineConfig, ds: &Dataset, from: &Checkpoint) -> Result<TrainOutcome> {
    cfg.validate()?;
    from.check_model_config(cfg)?;
    let mut model = Model::from_checkpoint(cfg, from)?;
    let (mut adam, start) = match from.stage {
        1 => (AdamState::new(&model.store, cfg.train.lr), 0),
        2 => (
            from.adam
                .clone()
                .ok_or_else(|| Error::Checkpoint("no optimizer state".into()))?,
            from.iteration as usize,
        ),
        s => return Err(Error::Checkpoint(format!("unknown stage {s}"))),
    };
    let frozen = model.stage1_ids();
    let frozen_fp = model.store.fingerprint(&frozen);
    let rast = cfg.rasterizer();
    let cloud = source_cloud(&model, ds, cfg.train.completion_branch)?;
    let mut log = Vec::with_capacity(cfg.train.iterations.saturating_sub(start));
    for it in start..cfg.train.iterations {
        let s = ds.sample_at(cfg.seed, it);
        let (loss, p, grads) = stage2_step(&model, ds, &cloud, s, cfg, &rast)?;
        apply_grads(&mut model.store, &grads, &mut adam);
        log.push(LogRow {
            iteration: it,
            frame: s.frame,
            loss,
            psnr_db: p,
        });
        if cfg.train.eval_every > 0 && (it + 1) % cfg.train.eval_every == 0 {
            log::info!("stage 2 iteration {}: loss {:.5} psnr {:.2}", it + 1, loss.total, p);
        }
    }
    if model.store.fingerprint(&frozen) != frozen_fp {
        return Err(Error::Contract("stage-1 parameters changed during stage 2".into()));
    }
    let checkpoint = Checkpoint::new(2, cfg.train.iterations as u64, cfg, &model.store, Some(adam));
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
    })
}
