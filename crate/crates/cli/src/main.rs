use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ymwml_cli::config::TrainConfig;
use ymwml_cli::error::{CliError, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "ymwml", version, about = "Cardiac segmentation with the WME loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus training.csv.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Write the class-weight table and loss curves.
    InspectLoss(InspectLossArgs),
}

/// Flags override values from `--config`, which override built-in defaults.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_root: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    input_size: Option<String>,
    #[arg(long)]
    width: Option<String>,
    /// Number of classes including background.
    #[arg(long, alias = "k")]
    num_classes: Option<String>,
    #[arg(long)]
    gn_groups: Option<String>,
    #[arg(long)]
    lr0: Option<String>,
    #[arg(long)]
    power: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    /// dataset, batch or uniform.
    #[arg(long)]
    cr_scope: Option<String>,
    /// sum or mean.
    #[arg(long)]
    reduction: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
}

impl ConfigFlags {
    fn entries(&self) -> [(&'static str, &Option<String>); 16] {
        [
            ("dataset_root", &self.dataset_root),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("input_size", &self.input_size),
            ("width", &self.width),
            ("num_classes", &self.num_classes),
            ("gn_groups", &self.gn_groups),
            ("lr0", &self.lr0),
            ("power", &self.power),
            ("weight_decay", &self.weight_decay),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("cr_scope", &self.cr_scope),
            ("reduction", &self.reduction),
            ("seed", &self.seed),
            ("output_dir", &self.output_dir),
        ]
    }

    /// Applies the config file, then the individual flags, onto `cfg`.
    fn apply(&self, cfg: &mut TrainConfig) -> Result<(), CliError> {
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (key, value) in self.entries() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Where report.csv goes. Defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write image, ground truth and prediction PGMs per sample.
    #[arg(long)]
    dump_predictions: bool,
    /// Model settings; `config.resolved` next to the checkpoint is read first
    /// when present.
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// ops, loss, model or all.
    #[arg(long, default_value = "all")]
    scope: String,
    /// Include a deliberately wrong backward rule (self-test of the checker).
    #[arg(long, hide = true)]
    negative_control: bool,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// train,val,test fractions.
    #[arg(long, default_value = "0.6,0.1,0.3")]
    split: String,
}

#[derive(Args, Debug)]
struct InspectLossArgs {
    #[arg(long, default_value_t = 2.0)]
    beta1: f64,
    #[arg(long, default_value_t = 1.0)]
    beta2: f64,
    /// Comma-separated class rates summing to 1.
    #[arg(long, default_value = "0.25,0.25,0.25,0.25")]
    cr: String,
    /// Number of interior points on the probability grid.
    #[arg(long, default_value_t = 99)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("bad number {v:?}: {e}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = TrainConfig::default();
            a.flags.apply(&mut cfg)?;
            let s = ymwml_cli::train::run_train(&cfg)?;
            println!(
                "trained {} iterations; best {} mean fg dice {} at epoch {}",
                s.iterations,
                s.val_split,
                s.best_val_dice,
                s.best_epoch + 1
            );
            Ok(())
        }
        Command::Eval(a) => {
            let mut cfg = TrainConfig::default();
            if let Some(resolved) = a.checkpoint.parent().map(|d| d.join("config.resolved")) {
                if resolved.exists() {
                    cfg.apply_file(&resolved)?;
                }
            }
            a.flags.apply(&mut cfg)?;
            let out = match a.out {
                Some(o) => o,
                None => a.checkpoint.parent().map(PathBuf::from).unwrap_or_default(),
            };
            let r = ymwml_cli::eval::run_eval(&cfg, &a.checkpoint, &a.split, &out, a.dump_predictions)?;
            print!("{}", r.to_csv());
            Ok(())
        }
        Command::Gradcheck(a) => ymwml_cli::checks::run_gradcheck(&a.scope, a.negative_control),
        Command::GenData(a) => {
            let fr = parse_list(&a.split)?;
            let fracs: [f64; 3] = fr
                .try_into()
                .map_err(|_| CliError::Usage("--split needs three fractions".into()))?;
            let split = ymwml_cli::gen::run_gen_data(&a.out, a.n, a.size, a.seed, fracs)?;
            let (tr, va, te) = split.counts();
            println!(
                "wrote {} samples to {} (train {tr}, val {va}, test {te})",
                a.n,
                a.out.display()
            );
            Ok(())
        }
        Command::InspectLoss(a) => {
            let cr = parse_list(&a.cr)?;
            let lambda = ymwml_cli::inspect::run_inspect_loss(a.beta1, a.beta2, cr, a.points, &a.out)?;
            let shown: Vec<String> = lambda.iter().map(|l| ymwml_core::fmt::sig(*l, 9)).collect();
            println!("lambda = [{}]; curves written to {}", shown.join(", "), a.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors; anything else is a
            // usage error with the documented exit code.
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
