//! `ymwml gradcheck`.

use ymwml_core::checks::{negative_control, run_scope, Outcome, Scope};
use ymwml_core::fmt::sig;

use crate::error::CliError;

pub fn format_outcome(o: &Outcome) -> String {
    format!(
        "{} {:<5} {:<32} worst {:<12} tol {} ({} checked)",
        if o.passed { "PASS" } else { "FAIL" },
        o.suite,
        o.name,
        sig(o.worst, 4),
        sig(o.tolerance, 2),
        o.checked
    )
}

/// Runs the suites for `scope`, printing one line per check. Any failure
/// is reported as a verification error.
pub fn run_gradcheck(scope: &str, with_negative_control: bool) -> Result<(), CliError> {
    let scope: Scope = scope.parse().map_err(CliError::Usage)?;
    let mut outcomes = run_scope(scope)?;
    if with_negative_control {
        outcomes.push(negative_control()?);
    }
    for o in &outcomes {
        println!("{}", format_outcome(o));
    }
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.clone()).collect();
    println!("{} of {} checks passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed))
    }
}
