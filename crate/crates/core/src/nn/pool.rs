use crate::error::{Error, Result};
use crate::tape::{InputGrads, Op, Tape, Var};
use crate::tensor::Tensor;

use super::conv::conv_out_size;

fn nchw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::invalid(op, format!("expected NCHW input, got {:?}", x.shape()))),
    }
}

/// Sliding-window max; padded positions never win.
struct MaxPool2d {
    k: usize,
    stride: usize,
    pad: usize,
    argmax: Vec<usize>,
}

impl Op for MaxPool2d {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (n, c, h, w) = nchw("max_pool2d", x)?;
        if self.k.is_multiple_of(2) || self.stride == 0 || self.pad >= self.k {
            return Err(Error::invalid(
                "max_pool2d",
                format!("kernel {} stride {} pad {}", self.k, self.stride, self.pad),
            ));
        }
        let ho = conv_out_size(h, self.k, self.stride, self.pad);
        let wo = conv_out_size(w, self.k, self.stride, self.pad);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        self.argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = usize::MAX;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            // Strict comparison: first maximal index in scan order wins.
                            if arg == usize::MAX || xd[idx] > best {
                                best = xd[idx];
                                arg = idx;
                            }
                        }
                    }
                    out.push(best);
                    self.argmax.push(arg);
                }
            }
        }
        Tensor::new(&[n, c, ho, wo], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        let mut grad = vec![0.0; inputs[0].numel()];
        for (&src, &gv) in self.argmax.iter().zip(g) {
            grad[src] += gv;
        }
        Ok(vec![Some(grad)])
    }
}

struct UpsampleNearest {
    factor: usize,
}

impl Op for UpsampleNearest {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (n, c, h, w) = nchw("upsample_nearest", x)?;
        let f = self.factor;
        if f == 0 {
            return Err(Error::invalid("upsample_nearest", "factor 0"));
        }
        let (ho, wo) = (h * f, w * f);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in x.data().chunks_exact(h * w) {
            for oy in 0..ho {
                let row = &plane[(oy / f) * w..(oy / f + 1) * w];
                for ox in 0..wo {
                    out.push(row[ox / f]);
                }
            }
        }
        Tensor::new(&[n, c, ho, wo], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        let (_, _, h, w) = nchw("upsample_nearest", inputs[0])?;
        let f = self.factor;
        let (ho, wo) = (h * f, w * f);
        let mut grad = vec![0.0; inputs[0].numel()];
        for (gp, dst) in g.chunks_exact(ho * wo).zip(grad.chunks_exact_mut(h * w)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[(oy / f) * w + ox / f] += gp[oy * wo + ox];
                }
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// `x [N, C, H, W] * gate [N, C]`, gate broadcast over H and W.
struct ScaleChannels;

impl Op for ScaleChannels {
    fn name(&self) -> &'static str {
        "scale_channels"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, gate) = (inputs[0], inputs[1]);
        let (n, c, h, w) = nchw("scale_channels", x)?;
        if gate.shape() != [n, c] {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                lhs: vec![n, c],
                rhs: gate.shape().to_vec(),
            });
        }
        let hw = h * w;
        let data = x
            .data()
            .chunks_exact(hw)
            .zip(gate.data())
            .flat_map(|(plane, &s)| plane.iter().map(move |v| v * s))
            .collect();
        Tensor::new(x.shape(), data)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Result<InputGrads> {
        let (x, gate) = (inputs[0], inputs[1]);
        let hw = x.numel() / gate.numel();
        let gx = needs[0].then(|| {
            g.chunks_exact(hw)
                .zip(gate.data())
                .flat_map(|(plane, &s)| plane.iter().map(move |v| v * s))
                .collect()
        });
        let gg = needs[1].then(|| {
            g.chunks_exact(hw)
                .zip(x.data().chunks_exact(hw))
                .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                .collect()
        });
        Ok(vec![gx, gg])
    }
}

/// Max pool with odd kernel `k`, padding `pad`.
pub fn max_pool2d(tape: &Tape, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
    tape.apply(
        MaxPool2d {
            k,
            stride,
            pad,
            argmax: Vec::new(),
        },
        &[x],
    )
}

pub fn upsample_nearest(tape: &Tape, x: Var, factor: usize) -> Result<Var> {
    tape.apply(UpsampleNearest { factor }, &[x])
}

pub fn scale_channels(tape: &Tape, x: Var, gate: Var) -> Result<Var> {
    tape.apply(ScaleChannels, &[x, gate])
}

/// Mean over H and W: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(tape: &Tape, x: Var) -> Result<Var> {
    tape.reduce(x, &[2, 3], crate::ops::ReduceMode::Mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn eval(f: impl Fn(&Tape, Var) -> Result<Var>, x: Tensor) -> Tensor {
        let tape = Tape::new();
        let v = tape.constant(x);
        let y = f(&tape, v).unwrap();
        let out = tape.value(y).unwrap().clone();
        out
    }

    fn pool5(tape: &Tape, x: Var) -> Result<Var> {
        max_pool2d(tape, x, 5, 1, 2)
    }

    #[test]
    fn pooling_one_hot_marks_window() {
        let mut data = vec![0.0; 49];
        data[3 * 7 + 1] = 1.0;
        let y = eval(pool5, Tensor::new(&[1, 1, 7, 7], data).unwrap());
        for oy in 0..7usize {
            for ox in 0..7usize {
                let covered = oy.abs_diff(3) <= 2 && ox.abs_diff(1) <= 2;
                assert_eq!(y.data()[oy * 7 + ox], if covered { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn pooling_constant_and_dominance() {
        let y = eval(pool5, Tensor::full(&[1, 2, 6, 6], -3.0).unwrap());
        assert!(y.data().iter().all(|&v| v == -3.0));
        let x = Tensor::randn(&[1, 2, 6, 6], &mut Rng::new(4)).unwrap();
        let y = eval(pool5, x.clone());
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a >= b));
    }

    #[test]
    fn pooling_tie_routes_to_first() {
        let tape = Tape::new();
        let x = tape.param(Tensor::full(&[1, 1, 1, 3], 2.0).unwrap());
        let y = max_pool2d(&tape, x, 3, 1, 1).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        // Windows: {0,1}, {0,1,2}, {1,2} -> first max indices 0, 0, 1.
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[2.0, 1.0, 0.0]);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = eval(|t, v| upsample_nearest(t, v, 2), x.clone());
        assert_eq!(
            y.data(),
            &[
                1.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0,
            ]
        );
        // 2x2 mean pooling undoes nearest upsampling.
        let mut down = vec![0.0; 4];
        for oy in 0..4 {
            for ox in 0..4 {
                down[(oy / 2) * 2 + ox / 2] += y.data()[oy * 4 + ox] / 4.0;
            }
        }
        assert_eq!(down, x.data());

        let y = eval(|t, v| upsample_nearest(t, v, 2), Tensor::zeros(&[1, 3, 8, 8]).unwrap());
        assert_eq!(y.shape(), &[1, 3, 16, 16]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[1, 1, 1, 2]).unwrap());
        let y = upsample_nearest(&tape, x, 8).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[64.0, 64.0]);
    }

    #[test]
    fn scale_channels_broadcasts() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gate = tape.constant(Tensor::new(&[1, 2], vec![10.0, 0.5]).unwrap());
        let y = scale_channels(&tape, x, gate).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[10.0, 20.0, 1.5, 2.0]);
    }
}
