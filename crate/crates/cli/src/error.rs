use ymwml_core::Error as CoreError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("data: {0}")]
    Data(#[source] CoreError),

    #[error("non-finite value at iteration {iter}: {source}")]
    Numeric {
        iter: u64,
        #[source]
        source: CoreError,
    },

    #[error("verification failed: {}", .0.join(", "))]
    Verification(Vec<String>),

    #[error("{0}")]
    Internal(#[source] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric { .. } => EXIT_NUMERIC,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Internal(_) => EXIT_USAGE,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => CliError::Usage(m),
            e if e.is_data_error() => CliError::Data(e),
            e => CliError::Internal(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let code = |e: CoreError| CliError::from(e).exit_code();
        assert_eq!(code(CoreError::Config("x".into())), EXIT_USAGE);
        assert_eq!(code(CoreError::BadMagic), EXIT_DATA);
        assert_eq!(code(CoreError::MissingMask("a".into())), EXIT_DATA);
        assert_eq!(code(CoreError::MissingGradient("w".into())), EXIT_USAGE);
        let numeric = CliError::Numeric {
            iter: 4,
            source: CoreError::NonFinite { op: "exp" },
        };
        assert_eq!(numeric.exit_code(), EXIT_NUMERIC);
        assert!(numeric.to_string().contains("iteration 4"));
        assert_eq!(CliError::Verification(vec!["relu".into()]).exit_code(), EXIT_VERIFY);
    }
}
