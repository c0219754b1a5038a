use crate::error::{Error, Result};
use crate::tape::{InputGrads, Op, Tape, Var};
use crate::tensor::Tensor;

/// Output extent of a padded, strided window sweep.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        valid_range(kx, self.pad, self.stride, self.w, self.wo)
    }

    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        valid_range(ky, self.pad, self.stride, self.h, self.ho)
    }
}

/// Half-open range of output positions `o` with `0 <= o*stride + k - pad < size`.
fn valid_range(k: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// 2-D cross-correlation with zero padding `k / 2` and per-channel bias.
struct Conv2d {
    stride: usize,
    geo: Option<Geometry>,
}

impl Op for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, wt, b) = (inputs[0], inputs[1], inputs[2]);
        let (&[n, c_in, h, w], &[c_out, wc_in, kh, kw]) = (x.shape(), wt.shape()) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        };
        if wc_in != c_in {
            return Err(Error::invalid(
                "conv2d",
                format!("input has {c_in} channels, weight expects {wc_in}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("unsupported kernel {kh}x{kw}")));
        }
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![c_out],
                rhs: b.shape().to_vec(),
            });
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::invalid("conv2d", format!("stride {}", self.stride)));
        }
        let k = kh;
        let pad = k / 2;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid(
                "conv2d",
                format!("{h}x{w} input smaller than {k}x{k} kernel after padding"),
            ));
        }
        let geo = Geometry {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride: self.stride,
            pad,
            ho: conv_out_size(h, k, self.stride, pad),
            wo: conv_out_size(w, k, self.stride, pad),
        };
        self.geo = Some(geo);

        let (xd, wd, bd) = (x.data(), wt.data(), b.data());
        let plane_out = geo.ho * geo.wo;
        let mut out = vec![0.0; n * c_out * plane_out];
        for ni in 0..n {
            for co in 0..c_out {
                let dst = &mut out[(ni * c_out + co) * plane_out..][..plane_out];
                dst.iter_mut().for_each(|v| *v = bd[co]);
                for ci in 0..c_in {
                    let src = &xd[(ni * c_in + ci) * h * w..][..h * w];
                    let kern = &wd[(co * c_in + ci) * k * k..][..k * k];
                    correlate(&geo, src, kern, dst);
                }
            }
        }
        Tensor::new(&[n, c_out, geo.ho, geo.wo], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Result<InputGrads> {
        let geo = self.geo.expect("forward ran");
        let (xd, wd) = (inputs[0].data(), inputs[1].data());
        let Geometry {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            ..
        } = geo;
        let plane_out = geo.ho * geo.wo;
        let mut gx = needs[0].then(|| vec![0.0; xd.len()]);
        let mut gw = needs[1].then(|| vec![0.0; wd.len()]);
        let gb = needs[2].then(|| {
            let mut gb = vec![0.0; c_out];
            for ni in 0..n {
                for (co, acc) in gb.iter_mut().enumerate() {
                    *acc += g[(ni * c_out + co) * plane_out..][..plane_out].iter().sum::<f64>();
                }
            }
            gb
        });
        for ni in 0..n {
            for co in 0..c_out {
                let go = &g[(ni * c_out + co) * plane_out..][..plane_out];
                for ci in 0..c_in {
                    let base_x = (ni * c_in + ci) * h * w;
                    let base_w = (co * c_in + ci) * k * k;
                    if let Some(gx) = gx.as_mut() {
                        scatter_input(&geo, go, &wd[base_w..base_w + k * k], &mut gx[base_x..base_x + h * w]);
                    }
                    if let Some(gw) = gw.as_mut() {
                        accumulate_weight(&geo, go, &xd[base_x..base_x + h * w], &mut gw[base_w..base_w + k * k]);
                    }
                }
            }
        }
        Ok(vec![gx, gw, gb])
    }
}

fn correlate(geo: &Geometry, src: &[f64], kern: &[f64], dst: &mut [f64]) {
    let (k, s, p, w, wo) = (geo.k, geo.stride, geo.pad, geo.w, geo.wo);
    for ky in 0..k {
        let (oy0, oy1) = geo.valid_rows(ky);
        for kx in 0..k {
            let wv = kern[ky * k + kx];
            let (ox0, ox1) = geo.valid_cols(kx);
            for oy in oy0..oy1 {
                let iy = oy * s + ky - p;
                let row_in = &src[iy * w..(iy + 1) * w];
                let row_out = &mut dst[oy * wo..(oy + 1) * wo];
                if s == 1 {
                    let ix0 = ox0 + kx - p;
                    for (o, &i) in row_out[ox0..ox1].iter_mut().zip(&row_in[ix0..]) {
                        *o += wv * i;
                    }
                } else {
                    for ox in ox0..ox1 {
                        row_out[ox] += wv * row_in[ox * s + kx - p];
                    }
                }
            }
        }
    }
}

fn scatter_input(geo: &Geometry, go: &[f64], kern: &[f64], gx: &mut [f64]) {
    let (k, s, p, w, wo) = (geo.k, geo.stride, geo.pad, geo.w, geo.wo);
    for ky in 0..k {
        let (oy0, oy1) = geo.valid_rows(ky);
        for kx in 0..k {
            let wv = kern[ky * k + kx];
            let (ox0, ox1) = geo.valid_cols(kx);
            for oy in oy0..oy1 {
                let iy = oy * s + ky - p;
                let row_g = &go[oy * wo..(oy + 1) * wo];
                let row_x = &mut gx[iy * w..(iy + 1) * w];
                for ox in ox0..ox1 {
                    row_x[ox * s + kx - p] += wv * row_g[ox];
                }
            }
        }
    }
}

fn accumulate_weight(geo: &Geometry, go: &[f64], src: &[f64], gw: &mut [f64]) {
    let (k, s, p, w, wo) = (geo.k, geo.stride, geo.pad, geo.w, geo.wo);
    for ky in 0..k {
        let (oy0, oy1) = geo.valid_rows(ky);
        for kx in 0..k {
            let (ox0, ox1) = geo.valid_cols(kx);
            let mut acc = 0.0;
            for oy in oy0..oy1 {
                let iy = oy * s + ky - p;
                let row_g = &go[oy * wo..(oy + 1) * wo];
                let row_x = &src[iy * w..(iy + 1) * w];
                for ox in ox0..ox1 {
                    acc += row_g[ox] * row_x[ox * s + kx - p];
                }
            }
            gw[ky * k + kx] += acc;
        }
    }
}

/// `x [N, C_in, H, W]`, `weight [C_out, C_in, k, k]`, `bias [C_out]`; padding is `k / 2`.
pub fn conv2d(tape: &Tape, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
    tape.apply(Conv2d { stride, geo: None }, &[x, weight, bias])
}
