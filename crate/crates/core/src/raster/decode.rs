use rand::Rng;

use super::FeatureImage;
use crate::error::{Error, Result};
use crate::nn::{uniform_fan_in, Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Row-major `H × W × 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension {
                what: "rgb image",
                expected: width * height * 3,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.width * self.height, 3], self.data.clone()).expect("rgb shape")
    }
}

/// Feature-to-RGB decoder: per-pixel affine map, optional residual 3×3
/// convolution, then sigmoid.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub refiner: Option<(ParamId, ParamId)>,
    pub feat_dim: usize,
}

impl Decoder {
    /// Weights `[Z, 3]` use fan-in init, bias starts at `bias_init` on every
    /// channel. The refiner starts at zero so enabling it does not change the
    /// initial output.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feat_dim: usize,
        bias_init: f64,
        refiner: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(&[feat_dim, 3], feat_dim, 3.0, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::from_vec(vec![bias_init; 3]));
        let refiner = refiner.then(|| {
            (
                store.add(format!("{name}.refiner.weight"), Tensor::zeros(&[3, 3, 3, 3])),
                store.add(format!("{name}.refiner.bias"), Tensor::zeros(&[3])),
            )
        });
        Self {
            weight,
            bias,
            refiner,
            feat_dim,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight, self.bias];
        if let Some((w, b)) = self.refiner {
            v.extend([w, b]);
        }
        v
    }
}

/// Decodes a `[H·W, Z]` feature variable to `[H·W, 3]` RGB on the tape.
pub fn decode_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    dec: &Decoder,
    feat: Var,
    width: usize,
    height: usize,
) -> Result<Var> {
    let (rows, z) = tape.value(feat).dims2()?;
    if z != dec.feat_dim {
        return Err(Error::Dimension {
            what: "decoder input channels",
            expected: dec.feat_dim,
            got: z,
        });
    }
    if rows != width * height {
        return Err(Error::Dimension {
            what: "decoder input pixels",
            expected: width * height,
            got: rows,
        });
    }
    let y = tape.matmul(feat, bound.var(dec.weight))?;
    let mut y = tape.add_row(y, bound.var(dec.bias))?;
    if let Some((w, b)) = dec.refiner {
        let img = tape.reshape(y, &[height, width, 3])?;
        let r = tape.conv3x3(img, bound.var(w), bound.var(b))?;
        let r = tape.reshape(r, &[rows, 3])?;
        y = tape.add(y, r)?;
    }
    Ok(tape.sigmoid(y))
}

/// Non-differentiable decode of a rendered feature image.
pub fn decode_to_rgb(img: &FeatureImage, store: &ParamStore, dec: &Decoder) -> Result<RgbImage> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let x = tape.constant(Tensor::new(
        vec![img.width * img.height, img.channels],
        img.data.clone(),
    )?);
    let y = decode_on_tape(&mut tape, &bound, dec, x, img.width, img.height)?;
    RgbImage::new(img.width, img.height, tape.value(y).data().to_vec())
}
