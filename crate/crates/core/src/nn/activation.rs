use crate::error::{Error, Result};
use crate::tape::{InputGrads, Op, Tape, Var};
use crate::tensor::Tensor;

struct Relu;

impl Op for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::new(x.shape(), data)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        // Subgradient 0 at the kink.
        let grad = inputs[0]
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Ok(vec![Some(grad)])
    }
}

struct Sigmoid;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Op for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        Tensor::new(x.shape(), x.data().iter().map(|&v| sigmoid(v)).collect())
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        let grad = out.data().iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect();
        Ok(vec![Some(grad)])
    }
}

/// Softmax along one axis with max subtraction.
struct Softmax {
    axis: usize,
}

/// (outer, len, inner) around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn softmax_in_place(data: &mut [f64], shape: &[usize], axis: usize) {
    let (outer, len, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(data[base + k * inner]);
            }
            let mut sum = 0.0;
            for k in 0..len {
                let e = (data[base + k * inner] - max).exp();
                data[base + k * inner] = e;
                sum += e;
            }
            for k in 0..len {
                data[base + k * inner] /= sum;
            }
        }
    }
}

impl Op for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if self.axis >= x.ndim() {
            return Err(Error::AxisOutOfRange {
                axis: self.axis,
                ndim: x.ndim(),
            });
        }
        let mut data = x.data().to_vec();
        softmax_in_place(&mut data, x.shape(), self.axis);
        Tensor::new(x.shape(), data)
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        let (outer, len, inner) = split_axis(out.shape(), self.axis);
        let y = out.data();
        let mut grad = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let dot: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                for k in 0..len {
                    let idx = base + k * inner;
                    grad[idx] = y[idx] * (g[idx] - dot);
                }
            }
        }
        Ok(vec![Some(grad)])
    }
}

pub fn relu(tape: &Tape, x: Var) -> Result<Var> {
    tape.apply(Relu, &[x])
}

pub fn sigmoid_op(tape: &Tape, x: Var) -> Result<Var> {
    tape.apply(Sigmoid, &[x])
}

pub fn softmax(tape: &Tape, x: Var, axis: usize) -> Result<Var> {
    tape.apply(Softmax { axis }, &[x])
}

/// Per-pixel class probabilities from `[N, K, H, W]` logits.
pub fn softmax_channels(tape: &Tape, logits: Var) -> Result<Var> {
    softmax(tape, logits, 1)
}
