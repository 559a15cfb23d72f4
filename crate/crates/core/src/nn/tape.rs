//! Reverse-mode tape over dense tensors.
//!
//! Every op appends a node holding its value; `backward` walks the nodes in
//! reverse creation order. Ops never mutate their inputs. Nodes that do not
//! depend on a gradient-carrying leaf are skipped during the reverse sweep.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// An op whose adjoint is supplied by the caller (rasterizer, hash encoder, ...).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the gradient of the output.
    /// `None` marks inputs that receive no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    BroadcastRows(Var),
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Conv3x3 { x: Var, w: Var, b: Var },
    L1Target(Var, Vec<f64>),
    MaskedL1 { x: Var, target: Vec<f64>, mask: Vec<bool>, channels: usize, count: usize },
    Sum(Var),
    Mean(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &str, msg: impl std::fmt::Display) -> Error {
    Error::Shape(format!("{op}: {msg}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(b).numel() != n {
            return Err(shape_err("add_row", format!("bias {} vs {n} cols", self.value(b).numel())));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(x) || self.rg(b);
        let _ = m;
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x, b), rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_op(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn map_op(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map_op(x, |v| v * c, Op::Scale(x, c))
    }

    /// `x + c` for a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(shape_err("add_const", "shape mismatch"));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = c.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddConst(x), rg))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(shape_err("mul_const", "shape mismatch"));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let shape = c.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulConst(x, c.data().to_vec()), rg))
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(shape_err("concat_cols", format!("rows {r} vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row-wise concatenation of 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let (_, n) = self.value(*first).dims2()?;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != n {
                return Err(shape_err("concat_rows", format!("cols {c} vs {n}")));
            }
            m += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > n {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {n}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols(x, start, end), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > m {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {m}")));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![end - start, n], out)?, Op::SliceRows(x, start, end), rg))
    }

    /// Repeats a vector `v[n]` as `rows` rows of a `[rows, n]` matrix.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Var {
        let src = self.value(v).data();
        let n = src.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        let rg = self.rg(v);
        self.push(
            Tensor::new(vec![rows, n], out).expect("consistent"),
            Op::BroadcastRows(v),
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_op(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, crate::gaussian::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_op(x, f64::exp, Op::Exp(x))
    }

    /// 3×3 convolution, stride 1, zero "same" padding.
    /// `x: [H, W, Cin]`, `w: [3, 3, Cin, Cout]`, `b: [Cout]` → `[H, W, Cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, cin) = match self.value(x).shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(shape_err("conv3x3", format!("input {s:?}"))),
        };
        let cout = match self.value(w).shape() {
            [3, 3, ci, co] if *ci == cin => *co,
            s => return Err(shape_err("conv3x3", format!("weight {s:?} for cin={cin}"))),
        };
        if self.value(b).numel() != cout {
            return Err(shape_err("conv3x3", "bias length"));
        }
        let cols = im2col(self.value(x).data(), h, wd, cin);
        let mut out = vec![0.0; h * wd * cout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias);
        }
        gemm(
            h * wd,
            9 * cin,
            cout,
            &cols,
            (9 * cin) as isize,
            1,
            self.value(w).data(),
            cout as isize,
            1,
            &mut out,
            true,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![h, wd, cout], out)?, Op::Conv3x3 { x, w, b }, rg))
    }

    /// Mean absolute difference against a constant target.
    pub fn l1_to(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.value(x).shape() != target.shape() {
            return Err(shape_err(
                "l1",
                format!("{:?} vs {:?}", self.value(x).shape(), target.shape()),
            ));
        }
        let n = target.numel().max(1) as f64;
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s / n), Op::L1Target(x, target.data().to_vec()), rg))
    }

    /// Mean absolute difference over the masked pixels of an `[H, W, C]` image.
    /// An empty mask yields exactly 0.
    pub fn masked_l1_to(&mut self, x: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let (h, w, c) = match self.value(x).shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(shape_err("masked_l1", format!("input {s:?}"))),
        };
        if target.shape() != self.value(x).shape() || mask.len() != h * w {
            return Err(shape_err("masked_l1", "image/target/mask mismatch"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let xd = self.value(x).data();
        let mut s = 0.0;
        for (p, &m) in mask.iter().enumerate() {
            if m {
                for k in 0..c {
                    s += (xd[p * c + k] - target.data()[p * c + k]).abs();
                }
            }
        }
        let v = if count == 0 { 0.0 } else { s / (count * c) as f64 };
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(v),
            Op::MaskedL1 {
                x,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
                channels: c,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Records a custom op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Gradient accumulated on `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let node = &self.nodes[idx];
            let contributions = self.node_backward(node, &g)?;
            for (v, dg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(dg),
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let val = |v: Var| self.value(v);
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    // g[m,n] · bᵀ[n,k]
                    gemm(m, n, k, g, n as isize, 1, val(*b).data(), 1, n as isize, &mut da, false);
                    res.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    // aᵀ[k,m] · g[m,n]
                    gemm(k, m, n, val(*a).data(), 1, k as isize, g, n as isize, 1, &mut db, false);
                    res.push((*b, db));
                }
            }
            Op::AddRow(x, b) => {
                let n = val(*b).numel();
                res.push((*x, g.to_vec()));
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                res.push((*b, db));
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                res.push((*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()));
                res.push((*b, g.iter().zip(av).map(|(g, a)| g * a).collect()));
            }
            Op::Scale(x, c) => res.push((*x, g.iter().map(|v| v * c).collect())),
            Op::AddConst(x) => res.push((*x, g.to_vec())),
            Op::MulConst(x, c) => res.push((*x, g.iter().zip(c).map(|(g, c)| g * c).collect())),
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2()?;
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&g[i * n + off..i * n + off + w]);
                    }
                    off += w;
                    res.push((p, dp));
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    res.push((p, g[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (m, n) = val(*x).dims2()?;
                let w = end - start;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                res.push((*x, dx));
            }
            Op::SliceRows(x, start, end) => {
                let (m, n) = val(*x).dims2()?;
                let mut dx = vec![0.0; m * n];
                dx[start * n..end * n].copy_from_slice(&g[..(end - start) * n]);
                res.push((*x, dx));
            }
            Op::BroadcastRows(v) => {
                let n = val(*v).numel();
                let mut dv = vec![0.0; n];
                for row in g.chunks(n) {
                    dv.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                res.push((*v, dv));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Relu(x) => res.push((
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )),
            Op::Tanh(x) => res.push((
                *x,
                g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
            )),
            Op::Sigmoid(x) => res.push((
                *x,
                g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )),
            Op::Exp(x) => res.push((*x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect())),
            Op::Conv3x3 { x, w, b } => {
                let (h, wd, cin) = match val(*x).shape() {
                    [h, w, c] => (*h, *w, *c),
                    _ => unreachable!(),
                };
                let cout = val(*b).numel();
                let hw = h * wd;
                if self.rg(*b) {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks(cout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    res.push((*b, db));
                }
                if self.rg(*w) {
                    let cols = im2col(val(*x).data(), h, wd, cin);
                    let mut dw = vec![0.0; 9 * cin * cout];
                    // colsᵀ[9cin, hw] · g[hw, cout]
                    gemm(
                        9 * cin,
                        hw,
                        cout,
                        &cols,
                        1,
                        (9 * cin) as isize,
                        g,
                        cout as isize,
                        1,
                        &mut dw,
                        false,
                    );
                    res.push((*w, dw));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; hw * 9 * cin];
                    // g[hw, cout] · wᵀ[cout, 9cin]
                    gemm(
                        hw,
                        cout,
                        9 * cin,
                        g,
                        cout as isize,
                        1,
                        val(*w).data(),
                        1,
                        cout as isize,
                        &mut dcols,
                        false,
                    );
                    res.push((*x, col2im(&dcols, h, wd, cin)));
                }
            }
            Op::L1Target(x, target) => {
                let n = target.len().max(1) as f64;
                let s = g[0] / n;
                res.push((
                    *x,
                    val(*x)
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(a, b)| s * sign(a - b))
                        .collect(),
                ));
            }
            Op::MaskedL1 {
                x,
                target,
                mask,
                channels,
                count,
            } => {
                let xd = val(*x).data();
                let mut dx = vec![0.0; xd.len()];
                if *count > 0 {
                    let s = g[0] / (*count * *channels) as f64;
                    for (p, &m) in mask.iter().enumerate() {
                        if m {
                            for k in 0..*channels {
                                let i = p * channels + k;
                                dx[i] = s * sign(xd[i] - target[i]);
                            }
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; val(*x).numel()])),
            Op::Mean(x) => {
                let n = val(*x).numel();
                res.push((*x, vec![g[0] / n.max(1) as f64; n]));
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&ins, out, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&v, dg) in inputs.iter().zip(grads) {
                    if let Some(dg) = dg {
                        if dg.len() != val(v).numel() {
                            return Err(Error::Contract(format!(
                                "custom op {} gradient length mismatch",
                                op.name()
                            )));
                        }
                        res.push((v, dg));
                    }
                }
            }
        }
        Ok(res)
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `[H, W, C]` → `[H·W, 9·C]` patches ordered `(ky, kx, c)`.
fn im2col(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut cols = vec![0.0; h * w * k];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = (ky * 3 + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut x = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let row = &cols[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = (ky * 3 + kx) * c;
                    x[dst..dst + c]
                        .iter_mut()
                        .zip(&row[src..src + c])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    x
}
