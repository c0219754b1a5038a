//! Named verification suites: finite-difference checks of every op, layer,
//! loss and the full model, plus the loss-curvature witness.

use crate::error::Result;
use crate::gradcheck::{check, project, Coverage, GradCheck, REL_TOL};
use crate::loss::{
    compute_class_rates, cross_entropy_baseline, loss_curve, unit_grid, wme_batch_loss, wme_batch_loss_composed,
    wme_pixel_loss, ClassWeights, Reduction, WmeParams,
};
use crate::mask::LabelMask;
use crate::model::{build_model, ModelConfig};
use crate::nn::{
    conv2d, global_avg_pool, group_norm, max_pool2d, relu, scale_channels, sigmoid_op, softmax, upsample_nearest,
    C2psa, C3k2, ChannelAttention, ConvGnRelu, SelfAttention, Sppf, GN_EPS,
};
use crate::ops::{BinaryKind, ReduceMode};
use crate::params::{ParamBuilder, ParameterStore};
use crate::rng::Rng;
use crate::tape::{InputGrads, Op, Tape, Var};
use crate::tensor::Tensor;

/// Absolute tolerance between numeric and analytic second derivatives.
pub const CURVATURE_TOL: f64 = 1e-8;

/// One verification result.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub suite: &'static str,
    pub name: String,
    /// Worst error seen (relative for gradients, absolute for curvature).
    pub worst: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

impl Outcome {
    fn from_grad(suite: &'static str, g: GradCheck) -> Self {
        Outcome {
            suite,
            passed: g.passed(),
            name: g.name,
            worst: g.worst,
            tolerance: REL_TOL,
            checked: g.checked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Loss,
    Model,
    All,
}

impl std::str::FromStr for Scope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ops" => Ok(Scope::Ops),
            "loss" => Ok(Scope::Loss),
            "model" => Ok(Scope::Model),
            "all" => Ok(Scope::All),
            _ => Err(format!("scope must be ops, loss, model or all, got {s:?}")),
        }
    }
}

pub fn run_scope(scope: Scope) -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        out.extend(ops_suite()?);
    }
    if matches!(scope, Scope::Loss | Scope::All) {
        out.extend(loss_suite()?);
    }
    if matches!(scope, Scope::Model | Scope::All) {
        out.extend(model_suite()?);
    }
    Ok(out)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut Rng::new(seed)).expect("valid shape")
}

/// Normal draws pushed at least 0.2 away from zero (clear of kinks and poles).
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = randn(shape, seed);
    t.data_mut().iter_mut().for_each(|v| *v += 0.2f64.copysign(*v));
    t
}

/// A shuffled ladder of values 0.05 apart, so max-style ops have no near ties.
fn distinct(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    let mut rng = Rng::new(seed);
    for i in (1..n).rev() {
        vals.swap(i, rng.below(i + 1));
    }
    Tensor::new(shape, vals).expect("valid shape")
}

fn all(name: &str, inputs: &[Tensor], f: impl Fn(&Tape, &[Var]) -> Result<Var>) -> Result<GradCheck> {
    let wrt = vec![true; inputs.len()];
    check(name, inputs, &wrt, Coverage::All, |t, v| {
        let y = f(t, v)?;
        project(t, y, 99)
    })
}

/// Gradient check of a parameterized block: every parameter and the input.
fn block<L>(
    name: &str,
    x: Tensor,
    build: impl FnOnce(&mut ParamBuilder<'_>) -> Result<L>,
    forward: impl Fn(&L, &Tape, &[Var], Var) -> Result<Var>,
    coverage: Coverage,
) -> Result<GradCheck> {
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(17);
    let layer = build(&mut ParamBuilder::new(&mut store, &mut rng))?;
    perturb_constants(&mut store, 23);
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.detached()).collect();
    let np = inputs.len();
    inputs.push(x);
    let wrt = vec![true; inputs.len()];
    check(name, &inputs, &wrt, coverage, |t, v| {
        let y = forward(&layer, t, &v[..np], v[np])?;
        project(t, y, 5)
    })
}

/// Moves constant-initialized tensors (norm scales, attention gains, biases)
/// off their initial values so no gradient path is trivially zero.
fn perturb_constants(store: &mut ParameterStore, seed: u64) {
    let mut rng = Rng::new(seed);
    for (_, t) in store.iter_mut() {
        let first = t.data()[0];
        if t.data().iter().all(|&v| v == first) {
            t.data_mut().iter_mut().for_each(|v| *v += 0.5 + 0.3 * rng.normal());
        }
    }
}

pub fn ops_suite() -> Result<Vec<Outcome>> {
    let s = [2, 3, 4];
    let mut r = vec![
        all("add", &[randn(&s, 1), randn(&s, 2)], |t, v| t.add(v[0], v[1]))?,
        all("sub", &[randn(&s, 1), randn(&s, 2)], |t, v| t.sub(v[0], v[1]))?,
        all("mul", &[randn(&s, 1), randn(&s, 2)], |t, v| t.mul(v[0], v[1]))?,
        all("div", &[randn(&s, 1), away_from_zero(&s, 2)], |t, v| t.div(v[0], v[1]))?,
    ];
    for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul, BinaryKind::Div] {
        let name = format!("{kind:?}_scalar").to_lowercase();
        r.push(all(&name, &[randn(&s, 3)], move |t, v| t.ew_scalar(kind, v[0], 1.7))?);
    }
    r.push(all("exp", &[randn(&s, 4)], |t, v| t.exp(v[0]))?);
    r.push(all("scale_by", &[randn(&s, 5), randn(&[1], 6)], |t, v| {
        t.scale_by(v[0], v[1])
    })?);
    for (mode, axes) in [
        (ReduceMode::Sum, vec![1]),
        (ReduceMode::Mean, vec![0, 2]),
        (ReduceMode::Max, vec![2]),
        (ReduceMode::Sum, vec![0, 1, 2]),
    ] {
        let name = format!("reduce_{mode:?}_{axes:?}").to_lowercase();
        r.push(all(&name, &[distinct(&s, 7)], move |t, v| t.reduce(v[0], &axes, mode))?);
    }
    r.push(all("reshape", &[randn(&s, 8)], |t, v| t.reshape(v[0], &[4, 6]))?);
    r.push(all("concat", &[randn(&s, 9), randn(&[2, 1, 4], 10)], |t, v| {
        t.concat(&[v[0], v[1]], 1)
    })?);
    r.push(all("slice", &[randn(&s, 11)], |t, v| t.slice(v[0], 2, 1, 2))?);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let name = format!("bmm_t{}{}", ta as u8, tb as u8);
        r.push(all(&name, &[randn(&a, 12), randn(&b, 13)], move |t, v| {
            t.bmm(v[0], v[1], ta, tb)
        })?);
    }
    let img = [2, 3, 5, 5];
    r.push(all("relu", &[away_from_zero(&img, 14)], |t, v| relu(t, v[0]))?);
    r.push(all("sigmoid", &[randn(&img, 15)], |t, v| sigmoid_op(t, v[0]))?);
    r.push(all("softmax", &[randn(&img, 16)], |t, v| softmax(t, v[0], 1))?);
    r.push(all("softmax_last_axis", &[randn(&s, 17)], |t, v| softmax(t, v[0], 2))?);
    for (k, stride) in [(3, 1), (3, 2), (1, 1), (1, 2)] {
        let name = format!("conv2d_k{k}_s{stride}");
        let inputs = [randn(&img, 18), randn(&[4, 3, k, k], 19), randn(&[4], 20)];
        r.push(all(&name, &inputs, move |t, v| conv2d(t, v[0], v[1], v[2], stride))?);
    }
    let gn_in = [2, 4, 3, 3];
    r.push(all(
        "group_norm",
        &[randn(&gn_in, 21), randn(&[4], 22), randn(&[4], 23)],
        |t, v| group_norm(t, v[0], v[1], v[2], 2, GN_EPS),
    )?);
    r.push(all("max_pool2d_k5_s1", &[distinct(&img, 24)], |t, v| {
        max_pool2d(t, v[0], 5, 1, 2)
    })?);
    r.push(all("max_pool2d_k3_s2", &[distinct(&[1, 2, 5, 5], 25)], |t, v| {
        max_pool2d(t, v[0], 3, 2, 1)
    })?);
    r.push(all("upsample_nearest", &[randn(&[1, 2, 3, 3], 26)], |t, v| {
        upsample_nearest(t, v[0], 2)
    })?);
    r.push(all(
        "scale_channels",
        &[randn(&img, 27), randn(&[2, 3], 28)],
        |t, v| scale_channels(t, v[0], v[1]),
    )?);
    r.push(all("global_avg_pool", &[randn(&img, 29)], |t, v| {
        global_avg_pool(t, v[0])
    })?);

    // Blocks built from the ops above.
    let x8 = || randn(&[2, 8, 6, 6], 30);
    r.push(block(
        "conv_gn_relu",
        x8(),
        |b| ConvGnRelu::build(b, "cgr", 8, 8, 3, 2, 4),
        |l, t, p, x| l.forward(t, p, x),
        Coverage::EveryInput { extra: 40, seed: 1 },
    )?);
    r.push(block(
        "channel_attention",
        x8(),
        |b| ChannelAttention::build(b, "ca", 8),
        |l, t, p, x| l.forward(t, p, x),
        Coverage::All,
    )?);
    r.push(block(
        "self_attention",
        randn(&[2, 8, 3, 3], 31),
        |b| SelfAttention::build(b, "sa", 8),
        |l, t, p, x| l.forward(t, p, x),
        Coverage::All,
    )?);
    r.push(block(
        "c3k2",
        x8(),
        |b| C3k2::build(b, "c3k2", 8, 8, 4),
        |l, t, p, x| l.forward(t, p, x),
        Coverage::EveryInput { extra: 40, seed: 2 },
    )?);
    r.push(block(
        "c2psa",
        x8(),
        |b| C2psa::build(b, "c2psa", 8),
        |l, t, p, x| l.forward(t, p, x),
        Coverage::EveryInput { extra: 40, seed: 3 },
    )?);
    r.push(block(
        "sppf",
        x8(),
        |b| Sppf::build(b, "sppf", 8),
        |l, t, p, x| l.forward(t, p, x),
        Coverage::EveryInput { extra: 40, seed: 4 },
    )?);
    Ok(r.into_iter().map(|g| Outcome::from_grad("ops", g)).collect())
}

fn random_masks(n: usize, h: usize, w: usize, k: usize, seed: u64) -> Vec<LabelMask> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| LabelMask::new(h, w, (0..h * w).map(|_| rng.below(k) as u8).collect()).expect("valid"))
        .collect()
}

/// Loss along the line `p_true = p`, the remaining mass spread evenly over
/// the other classes, evaluated through the per-pixel loss itself.
fn pixel_loss_on_line(p: f64, lambda: f64, params: &WmeParams) -> Result<f64> {
    let rest = (1.0 - p) / 3.0;
    let weights = ClassWeights::from_rates(vec![-lambda.ln(), 1.0 + lambda.ln(), 0.0, 0.0])?;
    Ok(wme_pixel_loss(&[p, rest, rest, rest], 0, &weights, params)?.total)
}

/// Second differences of the pixel loss on the 99-point grid: all strictly
/// positive, and (Richardson-extrapolated) equal to the analytic curvature.
pub fn curvature_witness(lambda: f64, params: &WmeParams) -> Result<Outcome> {
    let grid = unit_grid(99);
    let analytic = loss_curve(lambda, params, &grid)?;
    let h = 0.005;
    let second = |p: f64, h: f64| -> Result<f64> {
        let plus = pixel_loss_on_line(p + h, lambda, params)?;
        let mid = pixel_loss_on_line(p, lambda, params)?;
        let minus = pixel_loss_on_line(p - h, lambda, params)?;
        Ok((plus - 2.0 * mid + minus) / (h * h))
    };
    let mut worst: f64 = 0.0;
    let mut positive = true;
    for pt in &analytic {
        let coarse = second(pt.p, h)?;
        let fine = second(pt.p, h / 2.0)?;
        positive &= coarse > 0.0 && fine > 0.0;
        let extrapolated = (4.0 * fine - coarse) / 3.0;
        worst = worst.max((extrapolated - pt.d2loss).abs());
    }
    Ok(Outcome {
        suite: "loss",
        name: format!("curvature_lambda_{lambda:.6}"),
        passed: positive && worst < CURVATURE_TOL,
        worst,
        tolerance: CURVATURE_TOL,
        checked: grid.len(),
    })
}

pub fn loss_suite() -> Result<Vec<Outcome>> {
    let shape = [2, 4, 3, 3];
    let masks = random_masks(2, 3, 3, 4, 40);
    let weights = compute_class_rates(&masks, 4)?;
    let params = WmeParams::default();
    let mut r = Vec::new();
    for reduction in [Reduction::Sum, Reduction::Mean] {
        let (m, w) = (masks.clone(), weights.clone());
        r.push(check(
            &format!("wme_loss_{reduction:?}").to_lowercase(),
            &[randn(&shape, 41)],
            &[true],
            Coverage::All,
            move |t, v| wme_batch_loss(t, v[0], &m, &w, &params, reduction),
        )?);
    }
    {
        let (m, w) = (masks.clone(), weights.clone());
        r.push(check(
            "wme_loss_composed",
            &[randn(&shape, 42)],
            &[true],
            Coverage::All,
            move |t, v| wme_batch_loss_composed(t, v[0], &m, &w, &params, Reduction::Sum),
        )?);
    }
    {
        let m = masks.clone();
        r.push(check(
            "cross_entropy",
            &[randn(&shape, 43)],
            &[true],
            Coverage::All,
            move |t, v| cross_entropy_baseline(t, v[0], &m, Reduction::Sum),
        )?);
    }
    let mut out: Vec<Outcome> = r.into_iter().map(|g| Outcome::from_grad("loss", g)).collect();
    for lambda in [(-1f64).exp(), 0.8, 1.0] {
        out.push(curvature_witness(lambda, &params)?);
    }
    Ok(out)
}

/// Small model used by the end-to-end check.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        width: 0.125,
        input_size: 32,
        ..ModelConfig::default()
    }
}

/// End-to-end check: image → model → WME loss, against every parameter
/// tensor (one coordinate each plus a random extra set) and the input.
pub fn model_suite() -> Result<Vec<Outcome>> {
    let cfg = small_model_config();
    let (model, mut store) = build_model(&cfg, &mut Rng::new(1))?;
    perturb_constants(&mut store, 2);
    let s = cfg.input_size;
    let masks = random_masks(2, s, s, cfg.num_classes, 3);
    let weights = compute_class_rates(&masks, cfg.num_classes)?;
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.detached()).collect();
    let np = inputs.len();
    let mut rng = Rng::new(4);
    inputs.push(Tensor::uniform(&[2, 1, s, s], 0.0, 1.0, &mut rng)?);
    let wrt = vec![true; inputs.len()];
    let g = check(
        "model_end_to_end",
        &inputs,
        &wrt,
        Coverage::EveryInput { extra: 64, seed: 5 },
        |t, v| {
            let logits = model.forward(t, &v[..np], v[np])?;
            wme_batch_loss(t, logits, &masks, &weights, &WmeParams::default(), Reduction::Mean)
        },
    )?;
    Ok(vec![Outcome::from_grad("model", g)])
}

/// `x²` with a deliberately wrong derivative (`3x`), used to confirm the
/// checker catches a bad backward rule.
struct WrongSquare;

impl Op for WrongSquare {
    fn name(&self) -> &'static str {
        "wrong_square"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        Tensor::new(x.shape(), x.data().iter().map(|v| v * v).collect())
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Result<InputGrads> {
        Ok(vec![Some(
            inputs[0].data().iter().zip(g).map(|(x, g)| 3.0 * x * g).collect(),
        )])
    }
}

pub fn negative_control() -> Result<Outcome> {
    let g = all(
        "negative_control_wrong_square",
        &[away_from_zero(&[3, 3], 50)],
        |t, v| t.apply(WrongSquare, &[v[0]]),
    )?;
    Ok(Outcome::from_grad("ops", g))
}
