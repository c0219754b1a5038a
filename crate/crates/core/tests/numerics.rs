use proptest::prelude::*;
use ymwml_core::loss::{
    compute_class_rates, cross_entropy_baseline, lambda_for_rate, wme_batch_loss, wme_batch_loss_composed,
    wme_pixel_loss, ClassWeights, Reduction, WmeParams,
};
use ymwml_core::mask::LabelMask;
use ymwml_core::metrics::{confusion, dice, evaluate, iou};
use ymwml_core::optim::{AdamConfig, AdamState, PolySchedule};
use ymwml_core::params::{load_checkpoint, ParameterStore};
use ymwml_core::{Error, Rng, Tape, Tensor};

fn random_mask(rng: &mut Rng, h: usize, w: usize, k: usize) -> LabelMask {
    LabelMask::new(h, w, (0..h * w).map(|_| rng.below(k) as u8).collect()).unwrap()
}

fn simplex(rng: &mut Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_loss_is_positive_and_bounded(seed in any::<u64>(), class in 0usize..4) {
        let mut rng = Rng::new(seed);
        let p = simplex(&mut rng, 4);
        let w = ClassWeights::from_rates(simplex(&mut rng, 4)).unwrap();
        let params = WmeParams::default();
        let l = wme_pixel_loss(&p, class, &w, &params).unwrap();
        let lam = w.lambda()[class];
        // e^{-p} in [1/e, 1] and e^{1-p} in [1, e].
        prop_assert!(l.t1 >= lam * 2.0 / std::f64::consts::E - 1e-12 && l.t1 <= lam * 2.0 + 1e-12);
        prop_assert!(l.t2 >= 1.0 - 1e-12 && l.t2 <= std::f64::consts::E + 1e-12);
        prop_assert!((l.total - l.t1 - l.t2).abs() < 1e-12);
    }

    #[test]
    fn more_confidence_lowers_pixel_loss(seed in any::<u64>(), class in 0usize..4, shift in 0.01f64..0.5) {
        let mut rng = Rng::new(seed);
        let p = simplex(&mut rng, 4);
        let w = ClassWeights::unweighted(4);
        let params = WmeParams::default();
        let other = (class + 1) % 4;
        let moved = shift.min(p[other]);
        let mut q = p.clone();
        q[other] -= moved;
        q[class] += moved;
        let before = wme_pixel_loss(&p, class, &w, &params).unwrap().total;
        let after = wme_pixel_loss(&q, class, &w, &params).unwrap().total;
        prop_assert!(after <= before + 1e-12);
    }

    #[test]
    fn fused_and_composed_losses_agree(seed in any::<u64>(), mean in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let masks: Vec<_> = (0..2).map(|_| random_mask(&mut rng, 3, 4, 4)).collect();
        let w = compute_class_rates(&masks, 4).unwrap();
        let logits = Tensor::randn(&[2, 4, 3, 4], &mut rng).unwrap();
        let red = if mean { Reduction::Mean } else { Reduction::Sum };
        let tape = Tape::new();
        let z = tape.leaf(logits.clone());
        let fused = wme_batch_loss(&tape, z, &masks, &w, &WmeParams::default(), red).unwrap();
        let composed = wme_batch_loss_composed(&tape, z, &masks, &w, &WmeParams::default(), red).unwrap();
        let a = tape.value(fused).unwrap().item().unwrap();
        let b = tape.value(composed).unwrap().item().unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn dice_iou_identity_on_random_masks(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = Rng::new(seed);
        let p = random_mask(&mut rng, 5, 7, k);
        let g = random_mask(&mut rng, 5, 7, k);
        let c = confusion(&p, &g, k).unwrap();
        for class in 0..k {
            let (d, j) = (dice(&c, class), iou(&c, class));
            prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            prop_assert!(j <= d + 1e-15);
        }
        let perfect = evaluate(std::slice::from_ref(&g), std::slice::from_ref(&g), k).unwrap();
        prop_assert!(perfect.dice.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn class_rates_sum_to_one(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = Rng::new(seed);
        let masks: Vec<_> = (0..3).map(|_| random_mask(&mut rng, 4, 4, k)).collect();
        let w = compute_class_rates(&masks, k).unwrap();
        prop_assert!((w.cr().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (cr, lam) in w.cr().iter().zip(w.lambda()) {
            prop_assert_eq!(*lam, lambda_for_rate(*cr));
        }
    }
}

#[test]
fn lambda_law_on_dense_grid() {
    let vals: Vec<f64> = (0..1000).map(|i| lambda_for_rate(i as f64 / 999.0)).collect();
    assert_eq!(vals[0], 1.0);
    assert!(vals.windows(2).all(|w| w[1] < w[0]));
    assert!((vals[999] - (-1.0f64).exp()).abs() <= 1e-15);
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_k() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 4, 2, 2]).unwrap());
    let m = LabelMask::new(2, 2, vec![0, 1, 2, 3]).unwrap();
    let l = cross_entropy_baseline(&tape, z, &[m], Reduction::Mean).unwrap();
    assert!((tape.value(l).unwrap().item().unwrap() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn adam_reduces_a_quadratic() {
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(3);
    store
        .insert("w", Tensor::randn(&[10], &mut rng).unwrap().with_grad())
        .unwrap();
    let target = Tensor::randn(&[10], &mut rng).unwrap();
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(&store, cfg);
    let loss_of = |store: &mut ParameterStore, grads: bool| -> f64 {
        let tape = Tape::new();
        let p = store.bind(&tape, grads);
        let d = tape.sub(p[0], tape.constant(target.clone())).unwrap();
        let l = tape.sum(tape.mul(d, d).unwrap()).unwrap();
        let v = tape.value(l).unwrap().item().unwrap();
        if grads {
            tape.backward(l).unwrap();
            store.collect_grads(&tape, &p).unwrap();
        }
        v
    };
    let start = loss_of(&mut store, false);
    for _ in 0..100 {
        loss_of(&mut store, true);
        opt.step(&mut store, 0.05).unwrap();
    }
    let end = loss_of(&mut store, false);
    assert!(end < 0.1 * start, "{start} -> {end}");
    assert_eq!(opt.step_count(), 100);
}

#[test]
fn poly_schedule_dense_grid() {
    let s = PolySchedule::new(0.01, 0.9, 1000).unwrap();
    assert_eq!(s.lr(0).unwrap(), 0.01);
    assert_eq!(s.lr(1000).unwrap(), 0.0);
    for i in 0..1000u64 {
        let want = 0.01 * (1.0 - i as f64 / 1000.0).powf(0.9);
        assert!((s.lr(i).unwrap() - want).abs() < 1e-12);
        assert!(s.lr(i + 1).unwrap() < s.lr(i).unwrap());
    }
    assert!(s.lr(1001).is_err());
}

#[test]
fn checkpoint_corruptions() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParameterStore::new();
    store.insert("a", Tensor::full(&[2, 3], 1.5).unwrap()).unwrap();
    let bytes = store.to_bytes().unwrap();
    assert_eq!(ParameterStore::from_bytes(&bytes).unwrap().get("a"), store.get("a"));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(
        ParameterStore::from_bytes(&trailing),
        Err(Error::MalformedHeader(_))
    ));
    assert!(matches!(
        ParameterStore::from_bytes(&bytes[..5]),
        Err(Error::Truncated(_))
    ));
    assert!(matches!(
        ParameterStore::from_bytes(b"NOTACKPT\0\0\0\0"),
        Err(Error::BadMagic)
    ));
    assert!(matches!(
        load_checkpoint(&dir.path().join("none.ckpt")),
        Err(Error::Io { .. })
    ));

    let mut other = ParameterStore::new();
    other.insert("a", Tensor::full(&[3, 2], 0.0).unwrap()).unwrap();
    assert!(matches!(
        store.check_compatible(&other),
        Err(Error::ShapeDisagreement { .. })
    ));
    let mut same_a = ParameterStore::new();
    same_a.insert("a", Tensor::full(&[2, 3], 0.0).unwrap()).unwrap();
    same_a.insert("b", Tensor::full(&[1], 0.0).unwrap()).unwrap();
    assert!(matches!(store.check_compatible(&same_a), Err(Error::MissingTensor(n)) if n == "b"));

    let mut bad = ParameterStore::new();
    bad.insert("x", Tensor::full(&[1], 0.0).unwrap()).unwrap();
    bad.get_mut("x").unwrap().data_mut()[0] = f64::NAN;
    assert!(matches!(bad.to_bytes(), Err(Error::NonFinite { .. })));
}
