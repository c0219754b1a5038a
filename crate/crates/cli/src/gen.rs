//! `ymwml gen-data`.

use std::path::Path;

use ymwml_core::data::{write_phantom_dataset, DatasetSplit};

use crate::error::CliError;

pub fn run_gen_data(out: &Path, n: usize, size: usize, seed: u64, fracs: [f64; 3]) -> Result<DatasetSplit, CliError> {
    if n == 0 {
        return Err(CliError::Usage("n must be at least 1".into()));
    }
    Ok(write_phantom_dataset(out, n, size, seed, fracs)?)
}
