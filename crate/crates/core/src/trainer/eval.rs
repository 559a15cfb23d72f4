//! Rendering and scoring of trained models.

use super::{Dataset, Model, Sample};
use crate::error::{Error, Result};
use crate::gaussian::{CameraPose, GaussianCloud};
use crate::motion::{animate_sequence, dual_branch_animate, AudioFeatureTrack};
use crate::objectives::{
    lip_aperture, lip_loss, lip_mask_from_landmarks, lmd_anchor, pearson, project_vertices, psnr,
    ssim, MetricsRow,
};
use crate::raster::{decode_to_rgb, Rasterizer, RgbImage};
use crate::recon::PriorMesh;

pub fn render_rgb(model: &Model, cloud: &GaussianCloud, cam: &CameraPose, rast: &Rasterizer) -> Result<RgbImage> {
    decode_to_rgb(&rast.render(cloud, cam)?, &model.store, &model.decoder)
}

/// A lip landmark tracked through the cloud: the primitives composited at its
/// pixel in a reference render, with their normalised `α·T` weights.
pub type Anchor = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct LipAnchors {
    pub upper: Vec<Anchor>,
    pub lower: Vec<Anchor>,
}

/// Anchors for the lip landmarks of `prior`, read from the render of `cloud` at `cam`.
pub fn lip_anchors(cloud: &GaussianCloud, prior: &PriorMesh, cam: &CameraPose, rast: &Rasterizer) -> Result<LipAnchors> {
    let (_, rec) = rast.forward(cloud, cam)?;
    let pick = |idx: &[usize]| -> Result<Vec<Anchor>> {
        project_vertices(&prior.vertices, idx, cam)
            .into_iter()
            .zip(idx)
            .map(|(p, &v)| {
                let p = p.ok_or_else(|| Error::Contract(format!("lip vertex {v} is behind the camera")))?;
                let (x, y) = (p[0].round(), p[1].round());
                if x < 0.0 || y < 0.0 {
                    return Err(Error::Contract(format!("lip vertex {v} projects outside the frame")));
                }
                let mut c = rec.pixel_contributions(x as usize, y as usize);
                let total: f64 = c.iter().map(|e| e.1).sum();
                if !(total > 0.0) {
                    return Err(Error::Contract(format!("nothing is rendered at lip vertex {v}")));
                }
                for e in &mut c {
                    e.1 /= total;
                }
                Ok(c)
            })
            .collect()
    };
    Ok(LipAnchors {
        upper: pick(prior.upper_lip())?,
        lower: pick(prior.lower_lip())?,
    })
}

fn project_all(cloud: &GaussianCloud, anchors: &[Anchor], cam: &CameraPose) -> Result<Vec<[f64; 2]>> {
    let pts: Vec<[f64; 3]> = anchors
        .iter()
        .map(|a| {
            let mut p = [0.0; 3];
            for &(i, w) in a {
                let m = cloud.mu(i);
                for k in 0..3 {
                    p[k] += w * m[k];
                }
            }
            p
        })
        .collect();
    let all: Vec<usize> = (0..pts.len()).collect();
    project_vertices(&pts, &all, cam)
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Contract("lip anchor behind the camera".into()))
}

fn prior_lips(prior: &PriorMesh, cam: &CameraPose) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    let proj = |idx: &[usize]| {
        project_vertices(&prior.vertices, idx, cam)
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Contract("lip landmark behind the camera".into()))
    };
    Ok((proj(prior.upper_lip())?, proj(prior.lower_lip())?))
}

/// PSNR, SSIM and anchor LMD of the static `cloud` rendered at each sample's camera.
pub fn evaluate_views(
    model: &Model,
    cloud: &GaussianCloud,
    samples: &[Sample],
    anchors: &LipAnchors,
    rast: &Rasterizer,
) -> Result<Vec<MetricsRow>> {
    let (up, lo) = (&anchors.upper, &anchors.lower);
    samples
        .iter()
        .map(|s| {
            let img = render_rgb(model, cloud, &s.camera, rast)?;
            let mut rendered = project_all(cloud, up, &s.camera)?;
            rendered.extend(project_all(cloud, lo, &s.camera)?);
            let (mut truth, tl) = prior_lips(&s.prior, &s.camera)?;
            truth.extend(tl);
            Ok(MetricsRow {
                frame: s.frame,
                psnr_db: psnr(&img.data, s.target.data())?,
                ssim: ssim(&img.data, s.target.data(), img.width, img.height)?,
                lmd_px: Some(lmd_anchor(&rendered, &truth)?),
            })
        })
        .collect()
}

/// Decoded frames of `cloud` driven by every frame of `track`.
pub fn animate_frames(
    model: &Model,
    cloud: &GaussianCloud,
    track: &AudioFeatureTrack,
    fine_field: bool,
    cam: &CameraPose,
    rast: &Rasterizer,
) -> Result<Vec<RgbImage>> {
    let fields = model.active_fields(fine_field);
    animate_sequence(cloud, track, &fields, &model.store, rast, cam)?
        .iter()
        .map(|f| decode_to_rgb(f, &model.store, &model.decoder))
        .collect()
}

#[derive(Debug, Clone)]
pub struct LipSyncReport {
    /// Rendered lip aperture per frame (px).
    pub aperture: Vec<f64>,
    /// Driving value per frame.
    pub curve: Vec<f64>,
    pub pearson: f64,
    /// Mean anchor LMD over frames (px).
    pub lmd_px: f64,
    /// Mean L1 inside the lip mask over frames.
    pub mouth_l1: f64,
    pub rows: Vec<MetricsRow>,
}

/// Animates `cloud` with each sample's audio and compares lip anchors with the
/// sample's prior and the aperture with `curve[frame]`.
pub fn lip_sync_report(
    model: &Model,
    ds: &Dataset,
    cloud: &GaussianCloud,
    curve: &[f64],
    fine_field: bool,
    lip_margin: f64,
    rast: &Rasterizer,
) -> Result<LipSyncReport> {
    let fields = model.active_fields(fine_field);
    let anchors = lip_anchors(cloud, &ds.source.prior, &ds.source.camera, rast)?;
    let (up, lo) = (&anchors.upper, &anchors.lower);
    let n = ds.samples.len();
    let mut aperture = Vec::with_capacity(n);
    let mut drive = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let mut mouth = 0.0;
    for s in &ds.samples {
        let f_a = s
            .audio
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("frame {} has no audio features", s.frame)))?;
        let c = *curve.get(s.frame).ok_or(Error::Dimension {
            what: "driving curve",
            expected: s.frame + 1,
            got: curve.len(),
        })?;
        let deformed = dual_branch_animate(cloud, f_a, &fields, &model.store)?;
        let ru = project_all(&deformed, up, &s.camera)?;
        let rl = project_all(&deformed, lo, &s.camera)?;
        aperture.push(lip_aperture(&ru, &rl));
        drive.push(c);
        let (tu, tl) = prior_lips(&s.prior, &s.camera)?;
        let rendered: Vec<[f64; 2]> = ru.into_iter().chain(rl).collect();
        let truth: Vec<[f64; 2]> = tu.into_iter().chain(tl).collect();
        let img = render_rgb(model, &deformed, &s.camera, rast)?;
        let mask = lip_mask_from_landmarks(&s.prior, &s.camera, lip_margin);
        mouth += lip_loss(&img.data, s.target.data(), &mask)?;
        rows.push(MetricsRow {
            frame: s.frame,
            psnr_db: psnr(&img.data, s.target.data())?,
            ssim: ssim(&img.data, s.target.data(), img.width, img.height)?,
            lmd_px: Some(lmd_anchor(&rendered, &truth)?),
        });
    }
    let lmd = rows.iter().filter_map(|r| r.lmd_px).sum::<f64>() / n as f64;
    Ok(LipSyncReport {
        pearson: pearson(&aperture, &drive)?,
        aperture,
        curve: drive,
        lmd_px: lmd,
        mouth_l1: mouth / n as f64,
        rows,
    })
}
