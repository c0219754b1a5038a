//! Weighted Multi-class Exponential (WME) loss.
//!
//! For a pixel of true class `i` with softmax probabilities `p`:
//!
//! ```text
//! T1 = λ_i · β₁ · exp(−p_i)          λ_i = exp(−cr_i)
//! T2 = β₂ · exp(Σ_{j≠i} p_j)
//! L  = Σ_pixels (T1 + T2)
//! ```
//!
//! `cr_i` is the fraction of labeled pixels that belong to class `i`, so rare
//! classes get `λ` close to 1 and a class covering everything gets `1/e`.

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::nn::softmax_channels;
use crate::ops::ReduceMode;
use crate::tape::{InputGrads, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmeParams {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for WmeParams {
    fn default() -> Self {
        WmeParams { beta1: 2.0, beta2: 1.0 }
    }
}

impl WmeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta2 > 0.0) || !self.beta1.is_finite() || !self.beta2.is_finite() {
            return Err(Error::Config(format!(
                "loss scales must be positive, got beta1={} beta2={}",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// `λ = exp(−cr)`.
pub fn lambda_for_rate(cr: f64) -> f64 {
    (-cr).exp()
}

/// Class rates and the weights derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    cr: Vec<f64>,
    lambda: Vec<f64>,
}

impl ClassWeights {
    /// Rates must be non-negative and sum to 1 within 1e-9.
    pub fn from_rates(cr: Vec<f64>) -> Result<Self> {
        if cr.is_empty() {
            return Err(Error::Config("no class rates".into()));
        }
        if cr.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::Config(format!("class rates outside [0, 1]: {cr:?}")));
        }
        let total: f64 = cr.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class rates sum to {total}, not 1")));
        }
        let lambda = cr.iter().map(|&r| lambda_for_rate(r)).collect();
        Ok(ClassWeights { cr, lambda })
    }

    /// The λ ≡ 1 ablation: every rate reported as 0.
    pub fn unweighted(classes: usize) -> Self {
        ClassWeights {
            cr: vec![0.0; classes],
            lambda: vec![1.0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.lambda.len()
    }

    pub fn cr(&self) -> &[f64] {
        &self.cr
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }
}

/// Pixel share of each class over all `masks`.
pub fn compute_class_rates(masks: &[LabelMask], classes: usize) -> Result<ClassWeights> {
    if masks.is_empty() {
        return Err(Error::invalid("compute_class_rates", "no masks"));
    }
    let mut counts = vec![0usize; classes];
    let mut total = 0usize;
    for m in masks {
        m.check_classes(classes)?;
        for (c, n) in counts.iter_mut().zip(m.histogram(classes)) {
            *c += n;
        }
        total += m.len();
    }
    let cr = counts.iter().map(|&c| c as f64 / total as f64).collect();
    ClassWeights::from_rates(cr)
}

/// Loss of one pixel split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelLoss {
    pub total: f64,
    pub t1: f64,
    pub t2: f64,
}

/// Pixel loss from probabilities `p` (need not be normalized).
pub fn wme_pixel_loss(p: &[f64], true_class: usize, weights: &ClassWeights, params: &WmeParams) -> Result<PixelLoss> {
    if true_class >= p.len() || true_class >= weights.num_classes() {
        return Err(Error::ClassOutOfRange {
            value: true_class,
            classes: p.len().min(weights.num_classes()),
        });
    }
    if p.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("wme_pixel_loss", "probabilities must lie in [0, 1]"));
    }
    Ok(pixel_terms(p, true_class, weights.lambda()[true_class], params))
}

fn pixel_terms(p: &[f64], i: usize, lambda: f64, params: &WmeParams) -> PixelLoss {
    let others: f64 = p.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
    let t1 = lambda * params.beta1 * (-p[i]).exp();
    let t2 = params.beta2 * others.exp();
    PixelLoss { total: t1 + t2, t1, t2 }
}

/// Checks logits `[N, K, H, W]` against masks and returns (N, K, H·W).
fn check_batch(logits: &Tensor, masks: &[u8], classes: usize) -> Result<(usize, usize, usize)> {
    let &[n, k, h, w] = logits.shape() else {
        return Err(Error::invalid(
            "loss",
            format!("expected [N, K, H, W] logits, got {:?}", logits.shape()),
        ));
    };
    if k != classes {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: vec![classes],
            rhs: vec![k],
        });
    }
    if masks.len() != n * h * w {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![masks.len()],
        });
    }
    if let Some(&bad) = masks.iter().find(|&&l| l as usize >= k) {
        return Err(Error::ClassOutOfRange {
            value: bad as usize,
            classes: k,
        });
    }
    Ok((n, k, h * w))
}

/// Probabilities for one pixel at `base + c * stride`, written into `out`.
fn pixel_softmax(z: &[f64], base: usize, stride: usize, out: &mut [f64]) {
    let k = out.len();
    let max = (0..k).map(|c| z[base + c * stride]).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (c, o) in out.iter_mut().enumerate() {
        *o = (z[base + c * stride] - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn flatten_masks(masks: &[LabelMask]) -> Vec<u8> {
    masks.iter().flat_map(|m| m.labels().iter().copied()).collect()
}

struct WmeLoss {
    labels: Vec<u8>,
    lambda: Vec<f64>,
    params: WmeParams,
    reduction: Reduction,
}

impl Op for WmeLoss {
    fn name(&self) -> &'static str {
        "wme_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let z = inputs[0];
        let (n, k, hw) = check_batch(z, &self.labels, self.lambda.len())?;
        let mut p = vec![0.0; k];
        let mut total = 0.0;
        for ni in 0..n {
            for px in 0..hw {
                pixel_softmax(z.data(), ni * k * hw + px, hw, &mut p);
                let i = self.labels[ni * hw + px] as usize;
                total += pixel_terms(&p, i, self.lambda[i], &self.params).total;
            }
        }
        if self.reduction == Reduction::Mean {
            total /= (n * hw) as f64;
        }
        Ok(Tensor::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        let z = inputs[0];
        let (n, k, hw) = check_batch(z, &self.labels, self.lambda.len())?;
        let mut scale = g[0];
        if self.reduction == Reduction::Mean {
            scale /= (n * hw) as f64;
        }
        let WmeParams { beta1, beta2 } = self.params;
        let mut grad = vec![0.0; z.numel()];
        let mut p = vec![0.0; k];
        let mut dp = vec![0.0; k];
        for ni in 0..n {
            for px in 0..hw {
                let base = ni * k * hw + px;
                pixel_softmax(z.data(), base, hw, &mut p);
                let i = self.labels[ni * hw + px] as usize;
                let others: f64 = p.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
                // ∂L/∂p_i = −λ_i β₁ e^(−p_i); ∂L/∂p_j = β₂ e^(s) for j ≠ i.
                let d_other = beta2 * others.exp();
                for (j, d) in dp.iter_mut().enumerate() {
                    *d = if j == i {
                        -self.lambda[i] * beta1 * (-p[i]).exp()
                    } else {
                        d_other
                    };
                }
                let dot: f64 = dp.iter().zip(&p).map(|(d, q)| d * q).sum();
                for c in 0..k {
                    grad[base + c * hw] = scale * p[c] * (dp[c] - dot);
                }
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// WME loss of `[N, K, H, W]` logits against one mask per sample, with an
/// analytic backward rule.
pub fn wme_batch_loss(
    tape: &Tape,
    logits: Var,
    masks: &[LabelMask],
    weights: &ClassWeights,
    params: &WmeParams,
    reduction: Reduction,
) -> Result<Var> {
    tape.apply(
        WmeLoss {
            labels: flatten_masks(masks),
            lambda: weights.lambda().to_vec(),
            params: *params,
            reduction,
        },
        &[logits],
    )
}

/// The same loss assembled from generic tape operators. Slower; kept as an
/// independent cross-check of the analytic backward rule.
pub fn wme_batch_loss_composed(
    tape: &Tape,
    logits: Var,
    masks: &[LabelMask],
    weights: &ClassWeights,
    params: &WmeParams,
    reduction: Reduction,
) -> Result<Var> {
    let labels = flatten_masks(masks);
    let z = tape.value(logits)?.clone();
    let (n, k, hw) = check_batch(&z, &labels, weights.num_classes())?;
    let shape = z.shape().to_vec();
    drop(z);

    let mut onehot = vec![0.0; n * k * hw];
    let mut lambda_map = vec![0.0; n * hw];
    for ni in 0..n {
        for px in 0..hw {
            let i = labels[ni * hw + px] as usize;
            onehot[ni * k * hw + i * hw + px] = 1.0;
            lambda_map[ni * hw + px] = weights.lambda()[i] * params.beta1;
        }
    }
    let complement: Vec<f64> = onehot.iter().map(|v| 1.0 - v).collect();
    let pixel_shape = [n, shape[2], shape[3]];
    let onehot = tape.constant(Tensor::new(&shape, onehot)?);
    let complement = tape.constant(Tensor::new(&shape, complement)?);
    let lambda_map = tape.constant(Tensor::new(&pixel_shape, lambda_map)?);

    let p = softmax_channels(tape, logits)?;
    let p_true = tape.reduce(tape.mul(p, onehot)?, &[1], ReduceMode::Sum)?;
    let p_rest = tape.reduce(tape.mul(p, complement)?, &[1], ReduceMode::Sum)?;
    let t1 = tape.mul(tape.exp(tape.mul_scalar(p_true, -1.0)?)?, lambda_map)?;
    let t2 = tape.mul_scalar(tape.exp(p_rest)?, params.beta2)?;
    let per_pixel = tape.add(t1, t2)?;
    match reduction {
        Reduction::Sum => tape.sum(per_pixel),
        Reduction::Mean => tape.mean(per_pixel),
    }
}

struct CrossEntropy {
    labels: Vec<u8>,
    classes: usize,
    reduction: Reduction,
}

impl Op for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let z = inputs[0];
        let (n, k, hw) = check_batch(z, &self.labels, self.classes)?;
        let zd = z.data();
        let mut total = 0.0;
        for ni in 0..n {
            for px in 0..hw {
                let base = ni * k * hw + px;
                let max = (0..k).map(|c| zd[base + c * hw]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..k).map(|c| (zd[base + c * hw] - max).exp()).sum::<f64>().ln();
                let i = self.labels[ni * hw + px] as usize;
                total += lse - zd[base + i * hw];
            }
        }
        if self.reduction == Reduction::Mean {
            total /= (n * hw) as f64;
        }
        Ok(Tensor::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        let z = inputs[0];
        let (n, k, hw) = check_batch(z, &self.labels, self.classes)?;
        let mut scale = g[0];
        if self.reduction == Reduction::Mean {
            scale /= (n * hw) as f64;
        }
        let mut grad = vec![0.0; z.numel()];
        let mut p = vec![0.0; k];
        for ni in 0..n {
            for px in 0..hw {
                let base = ni * k * hw + px;
                pixel_softmax(z.data(), base, hw, &mut p);
                let i = self.labels[ni * hw + px] as usize;
                for c in 0..k {
                    let target = if c == i { 1.0 } else { 0.0 };
                    grad[base + c * hw] = scale * (p[c] - target);
                }
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// `−Σ log p_true` through a stable log-softmax.
pub fn cross_entropy_baseline(tape: &Tape, logits: Var, masks: &[LabelMask], reduction: Reduction) -> Result<Var> {
    let classes = tape.shape(logits)?.get(1).copied().unwrap_or(0);
    tape.apply(
        CrossEntropy {
            labels: flatten_masks(masks),
            classes,
            reduction,
        },
        &[logits],
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub p: f64,
    pub loss: f64,
    pub dloss: f64,
    pub d2loss: f64,
}

/// Loss of one pixel along `s = 1 − p`:
/// `L(p) = λ β₁ e^(−p) + β₂ e^(1−p)` with its first two derivatives.
pub fn loss_curve(lambda: f64, params: &WmeParams, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    if let Some(&bad) = grid.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::invalid("loss_curve", format!("grid point {bad} outside (0, 1)")));
    }
    Ok(grid
        .iter()
        .map(|&p| {
            let a = lambda * params.beta1 * (-p).exp();
            let b = params.beta2 * (1.0 - p).exp();
            CurvePoint {
                p,
                loss: a + b,
                dloss: -a - b,
                d2loss: a + b,
            }
        })
        .collect())
}

/// `n` evenly spaced interior points `1/(n+1), …, n/(n+1)`.
pub fn unit_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

pub const CURVE_HEADER: &str = "p,loss,dloss,d2loss";

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for pt in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            crate::fmt::sig(pt.p, 12),
            crate::fmt::sig(pt.loss, 12),
            crate::fmt::sig(pt.dloss, 12),
            crate::fmt::sig(pt.d2loss, 12)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn class_rates_degenerate_mask() {
        let m = LabelMask::filled(3, 3, 0).unwrap();
        let w = compute_class_rates(&[m], 4).unwrap();
        assert_eq!(w.cr(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(w.lambda(), &[(-1f64).exp(), 1.0, 1.0, 1.0]);
    }

    #[test]
    fn class_rates_small_mask() {
        let m = LabelMask::new(2, 2, vec![0, 0, 1, 2]).unwrap();
        let w = compute_class_rates(&[m], 4).unwrap();
        assert_eq!(w.cr(), &[0.5, 0.25, 0.25, 0.0]);
        let expect = [0.606530660, 0.778800783, 0.778800783, 1.0];
        for (l, e) in w.lambda().iter().zip(expect) {
            assert!(close(*l, e, 5e-10), "{l} vs {e}");
        }
    }

    #[test]
    fn class_rates_relabeling_permutes() {
        let a = LabelMask::new(2, 3, vec![0, 0, 0, 1, 2, 1]).unwrap();
        let perm = [2u8, 3, 0, 1];
        let b = LabelMask::new(2, 3, a.labels().iter().map(|&l| perm[l as usize]).collect()).unwrap();
        let wa = compute_class_rates(&[a], 4).unwrap();
        let wb = compute_class_rates(&[b], 4).unwrap();
        for (c, &d) in perm.iter().enumerate() {
            let d = d as usize;
            assert_eq!(wa.cr()[c], wb.cr()[d]);
            assert_eq!(wa.lambda()[c], wb.lambda()[d]);
        }
    }

    #[test]
    fn class_rates_errors() {
        assert!(compute_class_rates(&[], 4).is_err());
        let m = LabelMask::new(1, 1, vec![4]).unwrap();
        assert!(matches!(
            compute_class_rates(&[m], 4),
            Err(Error::ClassOutOfRange { value: 4, .. })
        ));
    }

    #[test]
    fn pixel_loss_worked_examples() {
        let unit = ClassWeights::unweighted(4);
        let params = WmeParams::default();
        let l = wme_pixel_loss(&[0.25; 4], 0, &unit, &params).unwrap();
        assert!(close(l.total, 3.674601583, 1e-9), "{}", l.total);
        assert!(close(l.t1, 1.557601566, 1e-9));
        assert!(close(l.t2, 2.117000017, 1e-9));

        let w = ClassWeights::from_rates(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let l = wme_pixel_loss(&[1.0, 0.0, 0.0, 0.0], 0, &w, &params).unwrap();
        assert!(close(l.total, 1.270670566, 1e-9), "{}", l.total);

        let zero = WmeParams { beta1: 0.0, beta2: 0.0 };
        let l = wme_pixel_loss(&[0.1, 0.2, 0.3, 0.4], 2, &w, &zero).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn pixel_loss_rejects_bad_class() {
        let w = ClassWeights::unweighted(4);
        assert!(wme_pixel_loss(&[0.25; 4], 4, &w, &WmeParams::default()).is_err());
    }

    #[test]
    fn doubling_beta1_scales_only_t1() {
        let w = ClassWeights::from_rates(vec![0.7, 0.1, 0.15, 0.05]).unwrap();
        let p = [0.1, 0.6, 0.2, 0.1];
        let base = WmeParams::default();
        let doubled = WmeParams {
            beta1: 2.0 * base.beta1,
            ..base
        };
        for i in 0..4 {
            let a = wme_pixel_loss(&p, i, &w, &base).unwrap();
            let b = wme_pixel_loss(&p, i, &w, &doubled).unwrap();
            assert_eq!(b.t1, 2.0 * a.t1);
            assert_eq!(b.t2.to_bits(), a.t2.to_bits());
        }
    }

    #[test]
    fn batch_loss_single_pixel_and_additivity() {
        let tape = Tape::new();
        let w = ClassWeights::unweighted(4);
        let m1 = LabelMask::filled(1, 1, 0).unwrap();
        let z = tape.constant(Tensor::full(&[1, 4, 1, 1], 0.7).unwrap());
        let l = wme_batch_loss(&tape, z, &[m1], &w, &WmeParams::default(), Reduction::Sum).unwrap();
        let single = tape.value(l).unwrap().item().unwrap();
        assert!(close(single, 3.674601583, 1e-9));

        let m2 = LabelMask::filled(1, 2, 0).unwrap();
        let z2 = tape.constant(Tensor::full(&[1, 4, 1, 2], 0.7).unwrap());
        let l2 = wme_batch_loss(&tape, z2, &[m2], &w, &WmeParams::default(), Reduction::Sum).unwrap();
        assert_eq!(tape.value(l2).unwrap().item().unwrap(), 2.0 * single);
    }

    #[test]
    fn batch_loss_rejects_class_count_mismatch() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 3, 1, 1]).unwrap());
        let m = LabelMask::filled(1, 1, 0).unwrap();
        let r = wme_batch_loss(
            &tape,
            z,
            &[m],
            &ClassWeights::unweighted(4),
            &WmeParams::default(),
            Reduction::Sum,
        );
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn fused_and_composed_agree() {
        let mut rng = Rng::new(8);
        let z = Tensor::randn(&[2, 4, 3, 3], &mut rng).unwrap();
        let masks: Vec<LabelMask> = (0..2)
            .map(|_| LabelMask::new(3, 3, (0..9).map(|_| rng.below(4) as u8).collect()).unwrap())
            .collect();
        let w = compute_class_rates(&masks, 4).unwrap();
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let tape = Tape::new();
            let zv = tape.param(z.clone());
            let a = wme_batch_loss(&tape, zv, &masks, &w, &WmeParams::default(), reduction).unwrap();
            tape.backward(a).unwrap();
            let ga = tape.grad(zv).unwrap().unwrap();
            let va = tape.value(a).unwrap().item().unwrap();

            let tape = Tape::new();
            let zv = tape.param(z.clone());
            let b = wme_batch_loss_composed(&tape, zv, &masks, &w, &WmeParams::default(), reduction).unwrap();
            tape.backward(b).unwrap();
            let gb = tape.grad(zv).unwrap().unwrap();
            let vb = tape.value(b).unwrap().item().unwrap();

            assert!(close(va, vb, 1e-12));
            for (x, y) in ga.data().iter().zip(gb.data()) {
                assert!(close(*x, *y, 1e-12));
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4, 1, 1]).unwrap());
        let m = LabelMask::filled(1, 1, 2).unwrap();
        let l = cross_entropy_baseline(&tape, z, std::slice::from_ref(&m), Reduction::Sum).unwrap();
        assert!(close(tape.value(l).unwrap().item().unwrap(), 1.386294361, 1e-9));

        let mut confident = vec![0.0; 4];
        confident[2] = 50.0;
        let z = tape.constant(Tensor::new(&[1, 4, 1, 1], confident).unwrap());
        let l = cross_entropy_baseline(&tape, z, &[m], Reduction::Sum).unwrap();
        assert!(tape.value(l).unwrap().item().unwrap() < 1e-20);
    }

    #[test]
    fn curve_shape() {
        let params = WmeParams::default();
        let pts = loss_curve(0.8, &params, &unit_grid(9)).unwrap();
        for pt in &pts {
            assert!(pt.d2loss > 0.0 && pt.dloss < 0.0);
        }
        let isolated = loss_curve(0.0, &params, &[0.3]).unwrap()[0];
        assert_eq!(isolated.loss, params.beta2 * 0.7f64.exp());
        assert!(loss_curve(1.0, &params, &[0.0]).is_err());
        assert!(loss_curve(1.0, &params, &[1.0]).is_err());
    }

    #[test]
    fn curve_csv_format() {
        let pts = loss_curve(1.0, &WmeParams::default(), &[0.5]).unwrap();
        let csv = curve_csv(&pts);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("p,loss,dloss,d2loss"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "0.5");
        let loss: f64 = row[1].parse().unwrap();
        assert!(close(loss, 2.0 * (-0.5f64).exp() + 0.5f64.exp(), 1e-11));
    }
}
