use super::{FeatureImage, RasterRecord, Rasterizer};
use crate::error::{Error, Result};
use crate::gaussian::{Branch, CameraPose, GaussianCloud};
use crate::nn::{CustomOp, Tape, Tensor, Var};

/// Tape handles for the five parameter groups of a cloud:
/// `mu [N,3]`, `scale_log [N,3]`, `rot [N,4]`, `opacity_logit [N,1]`, `feat [N,Z]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CloudVars {
    pub mu: Var,
    pub scale_log: Var,
    pub rot: Var,
    pub opacity_logit: Var,
    pub feat: Var,
}

impl CloudVars {
    pub fn as_array(&self) -> [Var; 5] {
        [self.mu, self.scale_log, self.rot, self.opacity_logit, self.feat]
    }

    /// Puts a cloud's arrays on the tape as constants.
    pub fn constant(tape: &mut Tape, cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        let z = cloud.feat_dim();
        let t = |shape: [usize; 2], d: &[f64]| Tensor::new(shape.to_vec(), d.to_vec()).expect("cloud shape");
        Self {
            mu: tape.constant(t([n, 3], cloud.mu_flat())),
            scale_log: tape.constant(t([n, 3], cloud.scale_log_flat())),
            rot: tape.constant(t([n, 4], cloud.rot_flat())),
            opacity_logit: tape.constant(t([n, 1], cloud.opacity_logit_flat())),
            feat: tape.constant(t([n, z], cloud.feat_flat())),
        }
    }

    /// Reads the current values back into a cloud with the given tags.
    pub fn to_cloud(&self, tape: &Tape, tags: &[Branch]) -> Result<GaussianCloud> {
        let feat = tape.value(self.feat);
        let (n, z) = feat.dims2()?;
        if tags.len() != n {
            return Err(Error::Dimension {
                what: "branch tags",
                expected: n,
                got: tags.len(),
            });
        }
        GaussianCloud::from_arrays(
            z,
            tape.value(self.mu).data().to_vec(),
            tape.value(self.scale_log).data().to_vec(),
            tape.value(self.rot).data().to_vec(),
            tape.value(self.opacity_logit).data().to_vec(),
            feat.data().to_vec(),
            tags.to_vec(),
        )
    }
}

struct RasterOp {
    rast: Rasterizer,
    rec: RasterRecord,
}

impl CustomOp for RasterOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let g = self.rast.backward(&self.rec, grad_output, None)?;
        Ok(vec![
            Some(g.d_mu),
            Some(g.d_scale_log),
            Some(g.d_rot),
            Some(g.d_opacity_logit),
            Some(g.d_feat),
        ])
    }
}

/// Renders the cloud held in `vars` and records the op; the output is `[H·W, Z]`.
pub fn rasterize_on_tape(
    tape: &mut Tape,
    rast: &Rasterizer,
    cam: &CameraPose,
    vars: &CloudVars,
) -> Result<(Var, FeatureImage)> {
    let n = tape.value(vars.opacity_logit).numel();
    let cloud = vars.to_cloud(tape, &vec![Branch::Visible; n])?;
    let (img, rec) = rast.forward(&cloud, cam)?;
    let out = Tensor::new(vec![img.width * img.height, img.channels], img.data.clone())?;
    let op = RasterOp {
        rast: rast.clone(),
        rec,
    };
    let v = tape.custom(Box::new(op), &vars.as_array(), out);
    Ok((v, img))
}
