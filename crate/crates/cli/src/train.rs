//! The training loop behind `ymwml train`.

use std::io::Write;
use std::path::Path;

use ymwml_core::data::{batch_iter, load_dataset, resize_nearest, Sample, Split};
use ymwml_core::fmt::sig;
use ymwml_core::loss::{compute_class_rates, wme_batch_loss, ClassWeights, Reduction};
use ymwml_core::mask::LabelMask;
use ymwml_core::metrics::evaluate;
use ymwml_core::model::{build_model, YmWml};
use ymwml_core::optim::{AdamState, PolySchedule};
use ymwml_core::params::{save_checkpoint, ParameterStore};
use ymwml_core::{Error, Rng, Tape};

use crate::config::{CrScope, TrainConfig};
use crate::error::CliError;
use crate::predict::predict_masks;

pub const TRAINING_CSV_HEADER: &str = "iter,lr,loss_sum,loss_per_pixel,val_mean_fg_dice";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub best_epoch: u64,
    pub best_val_dice: f64,
    pub final_loss_per_pixel: f64,
    /// Where validation scores came from (`val`, or `train` when val is empty).
    pub val_split: Split,
}

/// Loads one split resized to the model input size.
pub fn load_split(root: &Path, classes: usize, split: Split, size: usize) -> Result<Vec<Sample>, CliError> {
    let ds = load_dataset(root, classes).map_err(CliError::Data)?;
    ds.subset(split)
        .iter()
        .map(|s| {
            if s.height() == size && s.width() == size {
                Ok(s.clone())
            } else {
                resize_nearest(s, size).map_err(CliError::from)
            }
        })
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn masks_of(samples: &[Sample]) -> Vec<LabelMask> {
    samples.iter().map(|s| s.mask.clone()).collect()
}

fn weights_for(scope: CrScope, dataset: &ClassWeights, batch: &[LabelMask], k: usize) -> Result<ClassWeights, Error> {
    match scope {
        CrScope::Dataset => Ok(dataset.clone()),
        CrScope::Batch => compute_class_rates(batch, k),
        CrScope::Uniform => Ok(ClassWeights::unweighted(k)),
    }
}

/// Runs a full training job and writes its artifacts to `output_dir`.
pub fn run_train(cfg: &TrainConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let root = cfg.dataset_root.as_deref().expect("validated");
    let out = cfg.output_dir.as_deref().expect("validated");
    let epochs = cfg.epochs.expect("validated");
    let k = cfg.num_classes;

    let train = load_split(root, k, Split::Train, cfg.input_size)?;
    if train.is_empty() {
        return Err(CliError::Usage("training split is empty".into()));
    }
    let mut val = load_split(root, k, Split::Val, cfg.input_size)?;
    let val_split = if val.is_empty() {
        val = train.clone();
        Split::Train
    } else {
        Split::Val
    };

    std::fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join("config.resolved"), &cfg.resolved_text())?;

    let model_cfg = cfg.model_config();
    let (model, mut store) = build_model(&model_cfg, &mut Rng::new(cfg.seed).fork(0))?;
    let dataset_weights = match cfg.cr_scope {
        CrScope::Dataset => compute_class_rates(&masks_of(&train), k)?,
        _ => ClassWeights::unweighted(k),
    };
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let sched = PolySchedule::new(cfg.lr0, cfg.power, epochs * batches_per_epoch)?;
    let mut opt = AdamState::new(&store, cfg.adam_config());
    let shuffle_seed = Rng::new(cfg.seed).fork(1).next_u64();

    let mut csv = String::from(TRAINING_CSV_HEADER);
    csv.push('\n');
    let mut iter = 0u64;
    let mut best: Option<(u64, f64)> = None;
    let mut last_per_pixel = f64::NAN;
    for epoch in 0..epochs {
        let batches = batch_iter(&train, cfg.batch_size, shuffle_seed, epoch)?;
        let n_batches = batches.len();
        for (bi, batch) in batches.into_iter().enumerate() {
            let lr = sched.lr(iter)?;
            let weights = weights_for(cfg.cr_scope, &dataset_weights, &batch.masks, k)?;
            let pixels = (batch.masks.len() * cfg.input_size * cfg.input_size) as f64;
            let numeric = |source: Error| match source {
                Error::NonFinite { .. } => CliError::Numeric { iter, source },
                e => CliError::from(e),
            };
            let loss = train_step(
                &model,
                &mut store,
                &mut opt,
                &batch.images,
                &batch.masks,
                &weights,
                cfg,
                lr,
            )
            .map_err(numeric)?;
            let loss_sum = match cfg.reduction {
                Reduction::Sum => loss,
                Reduction::Mean => loss * pixels,
            };
            last_per_pixel = loss_sum / pixels;
            let val_cell = if bi + 1 == n_batches {
                let preds = predict_masks(&model, &store, &val, cfg.batch_size).map_err(numeric)?;
                let dice = evaluate(&preds, &masks_of(&val), k)?.mean_fg_dice;
                if best.is_none_or(|(_, d)| dice > d) {
                    best = Some((epoch, dice));
                    save_checkpoint(&store, &out.join("best.ckpt"))?;
                }
                eprintln!(
                    "epoch {}/{epochs} iter {} loss/px {} {val_split} mean fg dice {}",
                    epoch + 1,
                    iter + 1,
                    sig(last_per_pixel, 6),
                    sig(dice, 6)
                );
                sig(dice, 12)
            } else {
                String::new()
            };
            csv.push_str(&format!(
                "{iter},{},{},{},{val_cell}\n",
                sig(lr, 12),
                sig(loss_sum, 12),
                sig(last_per_pixel, 12)
            ));
            iter += 1;
        }
    }
    save_checkpoint(&store, &out.join("last.ckpt"))?;
    let mut f = std::fs::File::create(out.join("training.csv"))
        .map_err(|e| CliError::Usage(format!("cannot write training.csv: {e}")))?;
    f.write_all(csv.as_bytes())
        .map_err(|e| CliError::Usage(format!("cannot write training.csv: {e}")))?;

    let (best_epoch, best_val_dice) = best.expect("at least one epoch ran");
    Ok(TrainSummary {
        iterations: iter,
        best_epoch,
        best_val_dice,
        final_loss_per_pixel: last_per_pixel,
        val_split,
    })
}

/// Forward, loss, backward and one Adam update. Returns the loss value.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &YmWml,
    store: &mut ParameterStore,
    opt: &mut AdamState,
    images: &ymwml_core::Tensor,
    masks: &[LabelMask],
    weights: &ClassWeights,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64, Error> {
    let tape = Tape::new();
    let p = store.bind(&tape, true);
    let x = tape.constant(images.clone());
    let logits = model.forward(&tape, &p, x)?;
    let loss = wme_batch_loss(&tape, logits, masks, weights, &cfg.loss_params(), cfg.reduction)?;
    let value = tape.value(loss)?.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "wme_loss" });
    }
    tape.backward(loss)?;
    store.collect_grads(&tape, &p)?;
    opt.step(store, lr)?;
    Ok(value)
}
