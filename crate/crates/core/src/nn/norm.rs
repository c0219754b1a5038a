use crate::error::{Error, Result};
use crate::tape::{InputGrads, Op, Tape, Var};
use crate::tensor::Tensor;

pub const GN_EPS: f64 = 1e-5;

struct GroupNorm {
    groups: usize,
    eps: f64,
    /// Standardized input, kept for the backward rule.
    xhat: Vec<f64>,
    /// 1 / sqrt(var + eps) per (sample, group).
    rstd: Vec<f64>,
}

impl GroupNorm {
    fn dims(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let &[n, c, ..] = x.shape() else {
            return Err(Error::invalid("group_norm", "expected [N, C, ...] input"));
        };
        if self.groups == 0 || c % self.groups != 0 {
            return Err(Error::invalid(
                "group_norm",
                format!("{c} channels not divisible into {} groups", self.groups),
            ));
        }
        let spatial = x.numel() / (n * c);
        Ok((n, c, spatial))
    }
}

impl Op for GroupNorm {
    fn name(&self) -> &'static str {
        "group_norm"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let (n, c, spatial) = self.dims(x)?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                lhs: vec![c],
                rhs: gamma.shape().to_vec(),
            });
        }
        let cpg = c / self.groups;
        let m = cpg * spatial;
        let xd = x.data();
        self.xhat = vec![0.0; xd.len()];
        self.rstd = vec![0.0; n * self.groups];
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for gi in 0..self.groups {
                let start = (ni * c + gi * cpg) * spatial;
                let block = &xd[start..start + m];
                let mean = block.iter().sum::<f64>() / m as f64;
                let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let rstd = 1.0 / (var + self.eps).sqrt();
                self.rstd[ni * self.groups + gi] = rstd;
                for (j, &v) in block.iter().enumerate() {
                    let ch = gi * cpg + j / spatial;
                    let xh = (v - mean) * rstd;
                    self.xhat[start + j] = xh;
                    out[start + j] = xh * gamma.data()[ch] + beta.data()[ch];
                }
            }
        }
        Tensor::new(x.shape(), out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Result<InputGrads> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, spatial) = self.dims(x)?;
        let cpg = c / self.groups;
        let m = cpg * spatial;
        let mut gx = needs[0].then(|| vec![0.0; x.numel()]);
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for ni in 0..n {
            for gi in 0..self.groups {
                let start = (ni * c + gi * cpg) * spatial;
                let rstd = self.rstd[ni * self.groups + gi];
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..m {
                    let ch = gi * cpg + j / spatial;
                    let gy = g[start + j];
                    let xh = self.xhat[start + j];
                    ggamma[ch] += gy * xh;
                    gbeta[ch] += gy;
                    let d = gy * gamma.data()[ch];
                    sum_d += d;
                    sum_dx += d * xh;
                }
                if let Some(gx) = gx.as_mut() {
                    let inv_m = 1.0 / m as f64;
                    for j in 0..m {
                        let ch = gi * cpg + j / spatial;
                        let d = g[start + j] * gamma.data()[ch];
                        let xh = self.xhat[start + j];
                        gx[start + j] = rstd * (d - inv_m * sum_d - xh * inv_m * sum_dx);
                    }
                }
            }
        }
        Ok(vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)])
    }
}

/// Normalizes each (sample, channel group) to zero mean and unit variance,
/// then applies the per-channel affine `gamma * x + beta`.
pub fn group_norm(tape: &Tape, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
    tape.apply(
        GroupNorm {
            groups,
            eps,
            xhat: Vec::new(),
            rstd: Vec::new(),
        },
        &[x, gamma, beta],
    )
}

/// Group count used throughout the model: `gcd(channels, preferred)`, which
/// equals `min(preferred, channels)` for every channel count the builder emits.
pub fn groups_for(channels: usize, preferred: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    gcd(channels, preferred).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn run(x: Tensor, gamma: f64, beta: f64, groups: usize, eps: f64) -> Result<Tensor> {
        let c = x.shape()[1];
        let tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[c], gamma)?);
        let b = tape.constant(Tensor::full(&[c], beta)?);
        let y = group_norm(&tape, xv, g, b, groups, eps)?;
        let out = tape.value(y)?.clone();
        Ok(out)
    }

    fn group_stats(t: &Tensor, groups: usize) -> Vec<(f64, f64)> {
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let per = t.numel() / n / groups;
        let mut stats = Vec::new();
        for ni in 0..n {
            for gi in 0..groups {
                let start = ni * t.numel() / n + gi * per;
                let block = &t.data()[start..start + per];
                let mean = block.iter().sum::<f64>() / per as f64;
                let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
                stats.push((mean, var));
            }
        }
        let _ = c;
        stats
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let y = run(Tensor::full(&[1, 4, 3, 3], 2.5).unwrap(), 1.0, 0.0, 2, GN_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_leaves_beta() {
        let x = Tensor::randn(&[2, 4, 3, 3], &mut Rng::new(1)).unwrap();
        let y = run(x, 0.0, 5.0, 2, GN_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn group_statistics_standardized() {
        let x = Tensor::randn(&[2, 8, 4, 4], &mut Rng::new(11)).unwrap();
        let raw = group_stats(&x, 4);
        // Without eps the standardized groups are exactly mean 0 / var 1.
        let y = run(x.clone(), 1.0, 0.0, 4, 0.0).unwrap();
        for (mean, var) in group_stats(&y, 4) {
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "var {var}");
        }
        // With eps the variance shrinks to var / (var + eps).
        let y = run(x, 1.0, 0.0, 4, GN_EPS).unwrap();
        for ((mean, var), (_, raw_var)) in group_stats(&y, 4).into_iter().zip(raw) {
            assert!(mean.abs() < 1e-9);
            assert!((var - raw_var / (raw_var + GN_EPS)).abs() < 1e-9);
        }
    }

    #[test]
    fn indivisible_channels_rejected() {
        let r = run(Tensor::zeros(&[1, 6, 2, 2]).unwrap(), 1.0, 0.0, 4, GN_EPS);
        assert!(matches!(r, Err(Error::InvalidArgument { op: "group_norm", .. })));
    }

    #[test]
    fn group_choice() {
        assert_eq!(groups_for(64, 8), 8);
        assert_eq!(groups_for(4, 8), 4);
        assert_eq!(groups_for(8, 8), 8);
        assert_eq!(groups_for(12, 8), 4);
    }
}
