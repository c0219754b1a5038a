//! `ymwml inspect-loss`: the λ table and per-class loss curves.

use std::path::Path;

use ymwml_core::fmt::sig;
use ymwml_core::loss::{curve_csv, loss_curve, unit_grid, ClassWeights, WmeParams};

use crate::error::CliError;

pub const LAMBDA_HEADER: &str = "class,cr,lambda";
pub const TERMS_HEADER: &str = "p,t1,t2";

/// Writes `lambda.csv`, and for each class `curve_class<k>.csv` plus
/// `terms_class<k>.csv` (the two loss terms separately), into `out`.
/// Returns the λ values.
pub fn run_inspect_loss(beta1: f64, beta2: f64, cr: Vec<f64>, points: usize, out: &Path) -> Result<Vec<f64>, CliError> {
    // Zero scales are allowed here: they show how each term drops out.
    if !(beta1 >= 0.0 && beta2 >= 0.0 && beta1.is_finite() && beta2.is_finite()) {
        return Err(CliError::Usage(format!(
            "loss scales must be non-negative, got {beta1}, {beta2}"
        )));
    }
    if points == 0 {
        return Err(CliError::Usage("points must be at least 1".into()));
    }
    let weights = ClassWeights::from_rates(cr).map_err(|e| CliError::Usage(e.to_string()))?;
    let params = WmeParams { beta1, beta2 };
    std::fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    let write = |name: String, text: String| {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
    };

    let mut table = format!("{LAMBDA_HEADER}\n");
    for (k, (c, l)) in weights.cr().iter().zip(weights.lambda()).enumerate() {
        table.push_str(&format!("{k},{},{}\n", sig(*c, 12), sig(*l, 9)));
    }
    write("lambda.csv".into(), table)?;

    let grid = unit_grid(points);
    for (k, &lambda) in weights.lambda().iter().enumerate() {
        let curve = loss_curve(lambda, &params, &grid)?;
        write(format!("curve_class{k}.csv"), curve_csv(&curve))?;
        let mut terms = format!("{TERMS_HEADER}\n");
        for &p in &grid {
            let t1 = lambda * beta1 * (-p).exp();
            let t2 = beta2 * (1.0 - p).exp();
            terms.push_str(&format!("{},{},{}\n", sig(p, 12), sig(t1, 12), sig(t2, 12)));
        }
        write(format!("terms_class{k}.csv"), terms)?;
    }
    Ok(weights.lambda().to_vec())
}
