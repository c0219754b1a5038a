//! Dice and IoU from per-class confusion counts.
//!
//! A class absent from both prediction and ground truth scores 1.0. Dataset
//! scores average per-sample values, not pooled pixel counts.

use crate::error::{Error, Result};
use crate::mask::LabelMask;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }
}

pub fn confusion(pred: &LabelMask, gt: &LabelMask, classes: usize) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: vec![pred.height(), pred.width()],
            rhs: vec![gt.height(), gt.width()],
        });
    }
    pred.check_classes(classes)?;
    gt.check_classes(classes)?;
    let mut c = ConfusionCounts {
        tp: vec![0; classes],
        fp: vec![0; classes],
        fn_: vec![0; classes],
    };
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if p == g {
            c.tp[p as usize] += 1;
        } else {
            c.fp[p as usize] += 1;
            c.fn_[g as usize] += 1;
        }
    }
    Ok(c)
}

/// `2·TP / (2·TP + FP + FN)`.
pub fn dice(c: &ConfusionCounts, k: usize) -> f64 {
    let den = 2 * c.tp[k] + c.fp[k] + c.fn_[k];
    if den == 0 {
        1.0
    } else {
        (2 * c.tp[k]) as f64 / den as f64
    }
}

/// `TP / (TP + FP + FN)`.
pub fn iou(c: &ConfusionCounts, k: usize) -> f64 {
    let den = c.tp[k] + c.fp[k] + c.fn_[k];
    if den == 0 {
        1.0
    } else {
        c.tp[k] as f64 / den as f64
    }
}

fn check_foreground(classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::invalid(
            "mean_foreground_dice",
            format!("need at least 2 classes, got {classes}"),
        ));
    }
    Ok(())
}

/// Mean Dice over classes `1..K`.
pub fn mean_foreground_dice(c: &ConfusionCounts) -> Result<f64> {
    let k = c.num_classes();
    check_foreground(k)?;
    Ok((1..k).map(|i| dice(c, i)).sum::<f64>() / (k - 1) as f64)
}

pub fn mean_foreground_iou(c: &ConfusionCounts) -> Result<f64> {
    let k = c.num_classes();
    check_foreground(k)?;
    Ok((1..k).map(|i| iou(c, i)).sum::<f64>() / (k - 1) as f64)
}

/// Per-class scores averaged over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub mean_fg_dice: f64,
    pub mean_fg_iou: f64,
    pub samples: usize,
}

pub fn evaluate(preds: &[LabelMask], gts: &[LabelMask], classes: usize) -> Result<Report> {
    check_foreground(classes)?;
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} predictions for {} masks", preds.len(), gts.len()),
        ));
    }
    let mut d = vec![0.0; classes];
    let mut j = vec![0.0; classes];
    let (mut md, mut mj) = (0.0, 0.0);
    for (p, g) in preds.iter().zip(gts) {
        let c = confusion(p, g, classes)?;
        for k in 0..classes {
            d[k] += dice(&c, k);
            j[k] += iou(&c, k);
        }
        md += mean_foreground_dice(&c)?;
        mj += mean_foreground_iou(&c)?;
    }
    let n = preds.len() as f64;
    Ok(Report {
        dice: d.into_iter().map(|v| v / n).collect(),
        iou: j.into_iter().map(|v| v / n).collect(),
        mean_fg_dice: md / n,
        mean_fg_iou: mj / n,
        samples: preds.len(),
    })
}

impl Report {
    /// `class,dice,iou` rows then `mean_fg`, at 9 significant digits.
    pub fn to_csv(&self) -> String {
        use crate::fmt::sig;
        let mut s = String::from("class,dice,iou\n");
        for (k, (d, j)) in self.dice.iter().zip(&self.iou).enumerate() {
            s.push_str(&format!("{k},{},{}\n", sig(*d, 9), sig(*j, 9)));
        }
        s.push_str(&format!(
            "mean_fg,{},{}\n",
            sig(self.mean_fg_dice, 9),
            sig(self.mean_fg_iou, 9)
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn mask(w: usize, v: &[u8]) -> LabelMask {
        LabelMask::new(v.len() / w, w, v.to_vec()).unwrap()
    }

    #[test]
    fn identical_masks() {
        let m = mask(2, &[0, 1, 2, 2]);
        let c = confusion(&m, &m, 4).unwrap();
        assert!(c.fp.iter().chain(&c.fn_).all(|&x| x == 0));
        assert_eq!(mean_foreground_dice(&c).unwrap(), 1.0);
        assert_eq!(iou(&c, 3), 1.0);
    }

    #[test]
    fn total_confusion() {
        let c = confusion(&mask(2, &[0; 4]), &mask(2, &[1; 4]), 2).unwrap();
        assert_eq!(c.fp[0], 4);
        assert_eq!(c.fn_[1], 4);
        assert_eq!(dice(&c, 1), 0.0);
        assert_eq!(iou(&c, 0), 0.0);
    }

    #[test]
    fn formula_examples() {
        let c = ConfusionCounts {
            tp: vec![0, 3],
            fp: vec![0, 1],
            fn_: vec![0, 2],
        };
        assert!((dice(&c, 1) - 0.666666667).abs() < 5e-10);
        assert_eq!(iou(&c, 1), 0.5);
        let d = dice(&c, 1);
        assert!((d / (2.0 - d) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mean_over_foreground() {
        // per-class dice 1.0, 0.5, 0.75 via hand-built counts
        let c = ConfusionCounts {
            tp: vec![9, 1, 0, 3],
            fp: vec![5, 1, 0, 1],
            fn_: vec![5, 1, 0, 1],
        };
        assert_eq!(dice(&c, 2), 1.0);
        assert_eq!(mean_foreground_dice(&c).unwrap(), 0.75);
        let one = ConfusionCounts {
            tp: vec![1],
            fp: vec![0],
            fn_: vec![0],
        };
        assert!(mean_foreground_dice(&one).is_err());
    }

    #[test]
    fn background_errors_leave_mean_unchanged() {
        let gt = mask(3, &[0, 0, 1, 0, 2, 2]);
        let a = confusion(&gt, &gt, 4).unwrap();
        let mut swapped = a.clone();
        swapped.fp[0] += 7;
        swapped.fn_[0] += 7;
        assert_eq!(
            mean_foreground_dice(&a).unwrap(),
            mean_foreground_dice(&swapped).unwrap()
        );
    }

    #[test]
    fn random_case_matches_pixel_tally() {
        let mut rng = Rng::new(11);
        let p = mask(5, &(0..25).map(|_| rng.below(4) as u8).collect::<Vec<_>>());
        let g = mask(5, &(0..25).map(|_| rng.below(4) as u8).collect::<Vec<_>>());
        let c = confusion(&p, &g, 4).unwrap();
        for k in 0..4u8 {
            let pairs = p.labels().iter().zip(g.labels());
            let tp = pairs.clone().filter(|(&a, &b)| a == k && b == k).count() as u64;
            let fp = pairs.clone().filter(|(&a, &b)| a == k && b != k).count() as u64;
            let fn_ = pairs.filter(|(&a, &b)| a != k && b == k).count() as u64;
            assert_eq!((c.tp[k as usize], c.fp[k as usize], c.fn_[k as usize]), (tp, fp, fn_));
        }
        assert_eq!(
            c.tp.iter().sum::<u64>() as usize,
            p.labels().iter().zip(g.labels()).filter(|(a, b)| a == b).count()
        );
    }

    #[test]
    fn report_csv_layout() {
        let m = mask(2, &[0, 1, 2, 3]);
        let r = evaluate(std::slice::from_ref(&m), std::slice::from_ref(&m), 4).unwrap();
        assert_eq!(r.to_csv(), "class,dice,iou\n0,1,1\n1,1,1\n2,1,1\n3,1,1\nmean_fg,1,1\n");
        assert!(evaluate(&[], &[], 4).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_identity(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let p = mask(6, &(0..36).map(|_| rng.below(3) as u8).collect::<Vec<_>>());
            let g = mask(6, &(0..36).map(|_| rng.below(3) as u8).collect::<Vec<_>>());
            let a = confusion(&p, &g, 3).unwrap();
            let b = confusion(&g, &p, 3).unwrap();
            for k in 0..3 {
                prop_assert_eq!(dice(&a, k), dice(&b, k));
                let d = dice(&a, k);
                prop_assert!((iou(&a, k) - d / (2.0 - d)).abs() < 1e-12);
                prop_assert_eq!(a.tp[k] + a.fn_[k], g.histogram(3)[k] as u64);
            }
        }
    }
}
