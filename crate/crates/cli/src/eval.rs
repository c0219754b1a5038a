//! `ymwml eval`.

use std::path::Path;

use ymwml_core::data::{write_pgm, Gray, Split};
use ymwml_core::metrics::{evaluate, Report};
use ymwml_core::model::{build_model, load_checkpoint_for};
use ymwml_core::Rng;

use crate::config::TrainConfig;
use crate::error::CliError;
use crate::predict::predict_masks;
use crate::train::load_split;

/// Grey level per label in prediction dumps, spread over 0..=255.
fn label_gray(label: u8, classes: usize) -> u8 {
    let step = 255 / (classes.max(2) - 1);
    (label as usize * step).min(255) as u8
}

/// Scores `checkpoint` on one split, writes `report.csv` into `out`, and
/// optionally dumps `<id>_image.pgm`, `<id>_gt.pgm`, `<id>_pred.pgm`.
pub fn run_eval(cfg: &TrainConfig, checkpoint: &Path, split: &str, out: &Path, dump: bool) -> Result<Report, CliError> {
    let split = Split::parse(split).ok_or_else(|| CliError::Usage(format!("unknown split {split:?}")))?;
    let root = cfg
        .dataset_root
        .as_deref()
        .ok_or_else(|| CliError::Usage("dataset_root is required".into()))?;
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let store = load_checkpoint_for(&model_cfg, checkpoint).map_err(CliError::Data)?;
    let (model, _) = build_model(&model_cfg, &mut Rng::new(0))?;
    let samples = load_split(root, cfg.num_classes, split, cfg.input_size)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("split {split} is empty")));
    }
    let preds = predict_masks(&model, &store, &samples, cfg.batch_size)?;
    let gts: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    let report = evaluate(&preds, &gts, cfg.num_classes)?;

    std::fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    let path = out.join("report.csv");
    std::fs::write(&path, report.to_csv())
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;

    if dump {
        let dir = out.join("predictions");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        let k = cfg.num_classes;
        for (s, p) in samples.iter().zip(&preds) {
            let shade = |m: &ymwml_core::mask::LabelMask| Gray {
                width: m.width(),
                height: m.height(),
                pixels: m.labels().iter().map(|&l| label_gray(l, k)).collect(),
            };
            write_pgm(&s.image_gray(), &dir.join(format!("{}_image.pgm", s.id)))?;
            write_pgm(&shade(&s.mask), &dir.join(format!("{}_gt.pgm", s.id)))?;
            write_pgm(&shade(p), &dir.join(format!("{}_pred.pgm", s.id)))?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::label_gray;

    #[test]
    fn labels_spread_over_grey_levels() {
        let levels: Vec<u8> = (0..4).map(|l| label_gray(l, 4)).collect();
        assert_eq!(levels, [0, 85, 170, 255]);
        assert_eq!((label_gray(0, 2), label_gray(1, 2)), (0, 255));
    }
}
