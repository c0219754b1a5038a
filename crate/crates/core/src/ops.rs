//! Core tensor operators: elementwise arithmetic, exp, reductions, views
//! and batched matrix products.

use crate::error::{Error, Result};
use crate::tape::{InputGrads, Op, Tape, Var};
use crate::tensor::{check_shape, strides, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
    Max,
}

struct Binary(BinaryKind);

impl Op for Binary {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: self.name(),
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        if self.0 == BinaryKind::Div && b.data().contains(&0.0) {
            return Err(Error::NonFinite { op: "div" });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| self.0.eval(x, y))
            .collect();
        Tensor::new(a.shape(), data)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64], needs: &[bool]) -> Result<InputGrads> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (ga, gb): (Vec<f64>, Vec<f64>) = match self.0 {
            BinaryKind::Add => (g.to_vec(), g.to_vec()),
            BinaryKind::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
            BinaryKind::Mul => (
                g.iter().zip(b).map(|(g, b)| g * b).collect(),
                g.iter().zip(a).map(|(g, a)| g * a).collect(),
            ),
            BinaryKind::Div => (
                g.iter().zip(b).map(|(g, b)| g / b).collect(),
                g.iter()
                    .zip(a.iter().zip(b))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect(),
            ),
        };
        Ok(vec![needs[0].then_some(ga), needs[1].then_some(gb)])
    }
}

struct ScalarOp {
    kind: BinaryKind,
    c: f64,
}

impl Op for ScalarOp {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add_scalar",
            BinaryKind::Sub => "sub_scalar",
            BinaryKind::Mul => "mul_scalar",
            BinaryKind::Div => "div_scalar",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        if self.kind == BinaryKind::Div && self.c == 0.0 {
            return Err(Error::NonFinite { op: "div_scalar" });
        }
        let a = inputs[0];
        let data = a.data().iter().map(|&x| self.kind.eval(x, self.c)).collect();
        Tensor::new(a.shape(), data)
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        let scale = match self.kind {
            BinaryKind::Add | BinaryKind::Sub => 1.0,
            BinaryKind::Mul => self.c,
            BinaryKind::Div => 1.0 / self.c,
        };
        Ok(vec![Some(g.iter().map(|v| v * scale).collect())])
    }
}

struct Exp;

/// Inputs above this overflow or come close enough to be useless.
const EXP_LIMIT: f64 = 700.0;

impl Op for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let a = inputs[0];
        if a.data().iter().any(|&x| !x.is_finite() || x > EXP_LIMIT) {
            return Err(Error::NonFinite { op: "exp" });
        }
        Tensor::new(a.shape(), a.data().iter().map(|x| x.exp()).collect())
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        Ok(vec![Some(g.iter().zip(out.data()).map(|(g, e)| g * e).collect())])
    }
}

/// Scales a tensor by a learnable single-element tensor.
struct ScaleBy;

impl Op for ScaleBy {
    fn name(&self) -> &'static str {
        "scale_by"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, s) = (inputs[0], inputs[1]);
        let s = s.item().map_err(|_| Error::ShapeMismatch {
            op: "scale_by",
            lhs: x.shape().to_vec(),
            rhs: s.shape().to_vec(),
        })?;
        Tensor::new(x.shape(), x.data().iter().map(|v| v * s).collect())
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Result<InputGrads> {
        let (x, s) = (inputs[0].data(), inputs[1].data()[0]);
        let gx = needs[0].then(|| g.iter().map(|v| v * s).collect());
        let gs = needs[1].then(|| vec![g.iter().zip(x).map(|(g, x)| g * x).sum()]);
        Ok(vec![gx, gs])
    }
}

struct Reduce {
    axes: Vec<usize>,
    mode: ReduceMode,
    /// Output slot of every input element.
    slot: Vec<usize>,
    /// Winning input index per output element (max mode).
    argmax: Vec<usize>,
    group: usize,
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        vec![1]
    } else {
        out
    }
}

impl Op for Reduce {
    fn name(&self) -> &'static str {
        match self.mode {
            ReduceMode::Sum => "sum",
            ReduceMode::Mean => "mean",
            ReduceMode::Max => "max",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let a = inputs[0];
        let shape = a.shape();
        let out_shape = reduced_shape(shape, &self.axes);
        let kept: Vec<usize> = (0..shape.len()).filter(|i| !self.axes.contains(i)).collect();
        let out_strides = strides(&out_shape);
        let in_strides = a.strides();
        self.group = self.axes.iter().map(|&i| shape[i]).product();
        self.slot = (0..a.numel())
            .map(|flat| {
                kept.iter()
                    .zip(&out_strides)
                    .map(|(&ax, &os)| (flat / in_strides[ax]) % shape[ax] * os)
                    .sum()
            })
            .collect();
        let n_out = out_shape.iter().product();
        let mut out = match self.mode {
            ReduceMode::Max => vec![f64::NEG_INFINITY; n_out],
            _ => vec![0.0; n_out],
        };
        if self.mode == ReduceMode::Max {
            self.argmax = vec![usize::MAX; n_out];
        }
        for (i, (&v, &s)) in a.data().iter().zip(&self.slot).enumerate() {
            match self.mode {
                ReduceMode::Sum | ReduceMode::Mean => out[s] += v,
                ReduceMode::Max => {
                    // Strict comparison keeps the first maximal index.
                    if v > out[s] || self.argmax[s] == usize::MAX {
                        out[s] = v;
                        self.argmax[s] = i;
                    }
                }
            }
        }
        if self.mode == ReduceMode::Mean {
            let n = self.group as f64;
            out.iter_mut().for_each(|v| *v /= n);
        }
        Tensor::new(&out_shape, out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        let n = inputs[0].numel();
        let grad = match self.mode {
            ReduceMode::Sum => self.slot.iter().map(|&s| g[s]).collect(),
            ReduceMode::Mean => {
                let k = self.group as f64;
                self.slot.iter().map(|&s| g[s] / k).collect()
            }
            ReduceMode::Max => {
                let mut grad = vec![0.0; n];
                for (s, &i) in self.argmax.iter().enumerate() {
                    grad[i] += g[s];
                }
                grad
            }
        };
        Ok(vec![Some(grad)])
    }
}

struct Reshape {
    to: Vec<usize>,
}

impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let a = inputs[0];
        let n = check_shape(&self.to)?;
        if n != a.numel() {
            return Err(Error::ElementCount {
                from: a.shape().to_vec(),
                to: self.to.clone(),
            });
        }
        Tensor::new(&self.to, a.data().to_vec())
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        Ok(vec![Some(g.to_vec())])
    }
}

/// Splits `shape` around `axis` into (outer, inner) element counts.
fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

struct Concat {
    axis: usize,
}

impl Op for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let first = inputs[0].shape();
        if self.axis >= first.len() {
            return Err(Error::AxisOutOfRange {
                axis: self.axis,
                ndim: first.len(),
            });
        }
        for t in &inputs[1..] {
            let s = t.shape();
            let agree = s.len() == first.len()
                && s.iter()
                    .zip(first)
                    .enumerate()
                    .all(|(i, (a, b))| i == self.axis || a == b);
            if !agree {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let mut out_shape = first.to_vec();
        out_shape[self.axis] = inputs.iter().map(|t| t.shape()[self.axis]).sum();
        let (outer, inner) = outer_inner(first, self.axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for t in inputs {
                let chunk = t.shape()[self.axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(&out_shape, data)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Result<InputGrads> {
        let (outer, inner) = outer_inner(inputs[0].shape(), self.axis);
        let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
        let mut pos = 0;
        for _ in 0..outer {
            for (t, grad) in inputs.iter().zip(grads.iter_mut()) {
                let chunk = t.shape()[self.axis] * inner;
                grad.extend_from_slice(&g[pos..pos + chunk]);
                pos += chunk;
            }
        }
        Ok(grads.into_iter().zip(needs).map(|(g, &n)| n.then_some(g)).collect())
    }
}

struct Slice {
    axis: usize,
    start: usize,
    len: usize,
}

impl Op for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let a = inputs[0];
        let shape = a.shape();
        if self.axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis: self.axis,
                ndim: shape.len(),
            });
        }
        if self.len == 0 || self.start + self.len > shape[self.axis] {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {}..{} outside axis of size {}",
                    self.start,
                    self.start + self.len,
                    shape[self.axis]
                ),
            ));
        }
        let (outer, inner) = outer_inner(shape, self.axis);
        let span = shape[self.axis] * inner;
        let mut data = Vec::with_capacity(outer * self.len * inner);
        for o in 0..outer {
            let base = o * span + self.start * inner;
            data.extend_from_slice(&a.data()[base..base + self.len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[self.axis] = self.len;
        Tensor::new(&out_shape, data)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        let shape = inputs[0].shape();
        let (outer, inner) = outer_inner(shape, self.axis);
        let span = shape[self.axis] * inner;
        let mut grad = vec![0.0; inputs[0].numel()];
        let chunk = self.len * inner;
        for o in 0..outer {
            let base = o * span + self.start * inner;
            grad[base..base + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
        }
        Ok(vec![Some(grad)])
    }
}

/// `out[m, n] (+)= op(x)[m, k] · op(y)[k, n]` where `op` optionally transposes.
/// `x` is stored `[m, k]` (or `[k, m]` when `tx`), `y` is `[k, n]` (or `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(x: &[f64], tx: bool, y: &[f64], ty: bool, m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let xv = if tx { x[p * m + i] } else { x[i * k + p] };
            if xv == 0.0 {
                continue;
            }
            if ty {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += xv * y[j * k + p];
                }
            } else {
                let yrow = &y[p * n..(p + 1) * n];
                for (o, &yv) in row.iter_mut().zip(yrow) {
                    *o += xv * yv;
                }
            }
        }
    }
}

/// Batched matrix product over a leading batch axis.
struct Bmm {
    trans_a: bool,
    trans_b: bool,
    dims: (usize, usize, usize, usize),
}

impl Op for Bmm {
    fn name(&self) -> &'static str {
        "bmm"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let mismatch = || Error::ShapeMismatch {
            op: "bmm",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (&[ba, a0, a1], &[bb, b0, b1]) = (a.shape(), b.shape()) else {
            return Err(mismatch());
        };
        let (m, ka) = if self.trans_a { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if self.trans_b { (b1, b0) } else { (b0, b1) };
        if ba != bb || ka != kb {
            return Err(mismatch());
        }
        self.dims = (ba, m, n, ka);
        let k = ka;
        let mut out = vec![0.0; ba * m * n];
        for bi in 0..ba {
            gemm(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                self.trans_a,
                &b.data()[bi * k * n..(bi + 1) * k * n],
                self.trans_b,
                m,
                n,
                k,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        Tensor::new(&[ba, m, n], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Result<InputGrads> {
        let (batch, m, n, k) = self.dims;
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (ta, tb) = (self.trans_a, self.trans_b);
        let mut ga = needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = needs[1].then(|| vec![0.0; b.len()]);
        for bi in 0..batch {
            let gs = &g[bi * m * n..(bi + 1) * m * n];
            let asl = &a[bi * m * k..(bi + 1) * m * k];
            let bsl = &b[bi * k * n..(bi + 1) * k * n];
            if let Some(ga) = ga.as_mut() {
                let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                if ta {
                    // stored [k, m] = op(b) · gᵀ
                    gemm(bsl, tb, gs, true, k, m, n, dst);
                } else {
                    // [m, k] = g · op(b)ᵀ
                    gemm(gs, false, bsl, !tb, m, k, n, dst);
                }
            }
            if let Some(gb) = gb.as_mut() {
                let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                if tb {
                    // stored [n, k] = gᵀ · op(a)
                    gemm(gs, true, asl, ta, n, k, m, dst);
                } else {
                    // [k, n] = op(a)ᵀ · g
                    gemm(asl, !ta, gs, false, k, n, m, dst);
                }
            }
        }
        Ok(vec![ga, gb])
    }
}

impl Tape {
    pub fn ew(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary(kind), &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.ew(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.ew(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.ew(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.ew(BinaryKind::Div, a, b)
    }

    /// Elementwise op against a constant scalar right-hand side.
    pub fn ew_scalar(&self, kind: BinaryKind, a: Var, c: f64) -> Result<Var> {
        self.apply(ScalarOp { kind, c }, &[a])
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.ew_scalar(BinaryKind::Add, a, c)
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.ew_scalar(BinaryKind::Mul, a, c)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.apply(Exp, &[a])
    }

    /// Multiplies `x` by the single-element tensor `s`; both may need gradients.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        self.apply(ScaleBy, &[x, s])
    }

    /// Reduces over `axes` (all axes when empty). Reduced axes are dropped;
    /// reducing everything yields shape `[1]`.
    pub fn reduce(&self, a: Var, axes: &[usize], mode: ReduceMode) -> Result<Var> {
        let ndim = self.value(a)?.ndim();
        let mut axes: Vec<usize> = if axes.is_empty() {
            (0..ndim).collect()
        } else {
            axes.to_vec()
        };
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= ndim) {
            return Err(Error::AxisOutOfRange { axis: bad, ndim });
        }
        axes.sort_unstable();
        axes.dedup();
        self.apply(
            Reduce {
                axes,
                mode,
                slot: Vec::new(),
                argmax: Vec::new(),
                group: 0,
            },
            &[a],
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.reduce(a, &[], ReduceMode::Sum)
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.reduce(a, &[], ReduceMode::Mean)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Reshape { to: shape.to_vec() }, &[a])
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        self.apply(Concat { axis }, parts)
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Slice { axis, start, len }, &[a])
    }

    /// `[B, M, K] x [B, K, N] -> [B, M, N]`, with optional transposition of
    /// the last two axes of either operand.
    pub fn bmm(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.apply(
            Bmm {
                trans_a,
                trans_b,
                dims: (0, 0, 0, 0),
            },
            &[a, b],
        )
    }
}
