use rand::Rng;

use super::params::{uniform_fan_in, Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::None => x,
        }
    }
}

// Kaiming-uniform gain for layers followed by a relu, and the plain
// variance-preserving gain for linear outputs.
const RELU_GAIN: f64 = 6.0;
const LINEAR_GAIN: f64 = 3.0;

fn gain_for(act: Activation) -> f64 {
    if act == Activation::Relu {
        RELU_GAIN
    } else {
        LINEAR_GAIN
    }
}

/// Fully connected layer over rows: `[m, in] → [m, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub act: Activation,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let w = uniform_fan_in(&[inputs, outputs], inputs, gain_for(act), rng);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
            act,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        let y = tape.add_row(y, bound.var(self.bias))?;
        Ok(self.act.apply(tape, y))
    }
}

/// 3×3 same-padded convolution over `[H, W, Cin]`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub act: Activation,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let w = uniform_fan_in(&[3, 3, cin, cout], 9 * cin, gain_for(act), rng);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            act,
            cin,
            cout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv3x3(x, bound.var(self.weight), bound.var(self.bias))?;
        Ok(self.act.apply(tape, y))
    }
}

/// Dense layers with `hidden` activation between them and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::None } else { hidden };
                Dense::new(store, &format!("{name}.layer{i}"), w[0], w[1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(tape, bound, x)?;
        }
        Ok(x)
    }

    pub fn last(&self) -> &Dense {
        self.layers.last().expect("non-empty")
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Sets the final layer's weight and bias to zero so the MLP starts as the zero map.
pub fn zero_init_last_layer(mlp: &Mlp, store: &mut ParamStore) {
    let last = mlp.last();
    store.get_mut(last.weight).data_mut().fill(0.0);
    store.get_mut(last.bias).data_mut().fill(0.0);
}

/// Stack of 3×3 convolutions with `hidden` activation between them and a linear output.
#[derive(Debug, Clone)]
pub struct ConvStack {
    pub layers: Vec<Conv>,
}

impl ConvStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: &[usize],
        hidden: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(channels.len() >= 2);
        let last = channels.len() - 2;
        let layers = channels
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                let act = if i == last { Activation::None } else { hidden };
                Conv::new(store, &format!("{name}.layer{i}"), c[0], c[1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(tape, bound, x)?;
        }
        Ok(x)
    }

    pub fn last(&self) -> &Conv {
        self.layers.last().expect("non-empty")
    }
}
