//! Training configuration: built-in defaults, then a `key = value` file,
//! then command-line flags. The resolved result is echoed to
//! `config.resolved` in the output directory.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ymwml_core::loss::{Reduction, WmeParams};
use ymwml_core::model::ModelConfig;
use ymwml_core::optim::AdamConfig;

use crate::error::CliError;

/// Where the loss class weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrScope {
    /// Rates over the whole training split, computed once.
    Dataset,
    /// Rates recomputed from each batch's masks.
    Batch,
    /// Every weight fixed at 1 (ablation).
    Uniform,
}

impl FromStr for CrScope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dataset" => Ok(CrScope::Dataset),
            "batch" => Ok(CrScope::Batch),
            "uniform" => Ok(CrScope::Uniform),
            _ => Err(format!("cr_scope must be dataset, batch or uniform, got {s:?}")),
        }
    }
}

impl Display for CrScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CrScope::Dataset => "dataset",
            CrScope::Batch => "batch",
            CrScope::Uniform => "uniform",
        })
    }
}

pub fn parse_reduction(s: &str) -> Result<Reduction, String> {
    match s {
        "sum" => Ok(Reduction::Sum),
        "mean" => Ok(Reduction::Mean),
        _ => Err(format!("reduction must be sum or mean, got {s:?}")),
    }
}

pub fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Sum => "sum",
        Reduction::Mean => "mean",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset_root: Option<PathBuf>,
    pub epochs: Option<u64>,
    pub batch_size: usize,
    pub input_size: usize,
    pub width: f64,
    pub num_classes: usize,
    pub gn_groups: usize,
    pub lr0: f64,
    pub power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub cr_scope: CrScope,
    pub reduction: Reduction,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let loss = WmeParams::default();
        TrainConfig {
            dataset_root: None,
            epochs: None,
            batch_size: 8,
            input_size: model.input_size,
            width: model.width,
            num_classes: model.num_classes,
            gn_groups: model.gn_groups,
            lr0: 0.01,
            power: 0.9,
            weight_decay: AdamConfig::default().weight_decay,
            beta1: loss.beta1,
            beta2: loss.beta2,
            cr_scope: CrScope::Dataset,
            reduction: Reduction::Sum,
            seed: 0,
            output_dir: None,
        }
    }
}

pub const KEYS: [&str; 16] = [
    "dataset_root",
    "epochs",
    "batch_size",
    "input_size",
    "width",
    "num_classes",
    "gn_groups",
    "lr0",
    "power",
    "weight_decay",
    "beta1",
    "beta2",
    "cr_scope",
    "reduction",
    "seed",
    "output_dir",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("{key}: cannot parse {value:?}: {e}")))
}

impl TrainConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "dataset_root" | "epochs" | "output_dir" if value.is_empty() => match key {
                "dataset_root" => self.dataset_root = None,
                "epochs" => self.epochs = None,
                _ => self.output_dir = None,
            },
            "dataset_root" => self.dataset_root = Some(PathBuf::from(value)),
            "epochs" => self.epochs = Some(parse_value(key, value)?),
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "input_size" => self.input_size = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "num_classes" | "k" => self.num_classes = parse_value(key, value)?,
            "gn_groups" => self.gn_groups = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "power" => self.power = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "cr_scope" => self.cr_scope = value.parse().map_err(CliError::Usage)?,
            "reduction" => self.reduction = parse_reduction(value).map_err(CliError::Usage)?,
            "seed" => self.seed = parse_value(key, value)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file. `#` starts a comment; blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn get(&self, key: &str) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "dataset_root" => opt(&self.dataset_root),
            "epochs" => self.epochs.map(|e| e.to_string()).unwrap_or_default(),
            "batch_size" => self.batch_size.to_string(),
            "input_size" => self.input_size.to_string(),
            "width" => self.width.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "gn_groups" => self.gn_groups.to_string(),
            "lr0" => self.lr0.to_string(),
            "power" => self.power.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "cr_scope" => self.cr_scope.to_string(),
            "reduction" => reduction_name(self.reduction).to_string(),
            "seed" => self.seed.to_string(),
            "output_dir" => opt(&self.output_dir),
            _ => String::new(),
        }
    }

    /// Every field as `key = value`, in a fixed order. Parses back to `self`.
    pub fn resolved_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            num_classes: self.num_classes,
            input_size: self.input_size,
            width: self.width,
            gn_groups: self.gn_groups,
        }
    }

    pub fn loss_params(&self) -> WmeParams {
        WmeParams {
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Checks everything a training run needs.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.dataset_root.is_none() {
            return usage("dataset_root is required".into());
        }
        if self.output_dir.is_none() {
            return usage("output_dir is required".into());
        }
        match self.epochs {
            None => return usage("epochs is required (there is no default training length)".into()),
            Some(0) => return usage("epochs must be positive".into()),
            Some(_) => {}
        }
        if self.batch_size == 0 {
            return usage("batch_size must be positive".into());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) || !(self.power > 0.0 && self.power.is_finite()) {
            return usage(format!("invalid schedule lr0={} power={}", self.lr0, self.power));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return usage(format!("invalid weight_decay {}", self.weight_decay));
        }
        self.loss_params().validate()?;
        self.model_config().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.input_size, c.num_classes), (8, 256, 4));
        assert_eq!((c.lr0, c.power, c.weight_decay), (0.01, 0.9, 1e-4));
        assert_eq!((c.beta1, c.beta2, c.width), (2.0, 1.0, 1.0));
        assert_eq!(c.epochs, None);
    }

    #[test]
    fn file_then_flag_precedence() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\nbatch_size = 4\nwidth=0.25 # trailing\n\ncr_scope = batch\n")
            .unwrap();
        assert_eq!((c.batch_size, c.width, c.cr_scope), (4, 0.25, CrScope::Batch));
        c.set("batch_size", "2").unwrap();
        assert_eq!(c.batch_size, 2);
    }

    #[test]
    fn resolved_round_trips() {
        let mut c = TrainConfig::default();
        c.apply_text("dataset_root = d\noutput_dir = o\nepochs = 3\nreduction = mean\nwidth = 0.125")
            .unwrap();
        let mut back = TrainConfig::default();
        back.apply_text(&c.resolved_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_input_is_usage_error() {
        let mut c = TrainConfig::default();
        assert!(matches!(c.apply_text("nope = 1"), Err(CliError::Usage(_))));
        assert!(matches!(c.apply_text("batch_size 4"), Err(CliError::Usage(_))));
        assert!(matches!(c.apply_text("batch_size = x"), Err(CliError::Usage(_))));
        assert!(matches!(c.validate(), Err(CliError::Usage(_))));
    }
}
