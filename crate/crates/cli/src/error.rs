use mc3::Mc3Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Mc3Error),

    #[error("gradient check failed: max error {max:e} is not below {tol:e}")]
    GradCheckFailed { max: f64, tol: f64 },
}

impl CliError {
    /// 2 config, 3 IO, 4 numeric, 5 validation.
    pub fn exit_code(&self) -> u8 {
        use Mc3Error::*;
        let e = match self {
            CliError::GradCheckFailed { .. } => return 5,
            CliError::Core(e) => e.root(),
        };
        match e {
            InvalidConfig { .. } | OutOfRange { .. } | InvalidDims(_) => 2,
            Io { .. } | Parse { .. } | BadMagic { .. } | TruncatedFile { .. } | DanglingReference { .. } => 3,
            CorruptCheckpoint(_) => 3,
            NonFinite(_) | NonFiniteGradient | DegenerateNorm(_) => 4,
            ShapeMismatch { .. }
            | VersionMismatch(_)
            | MissingLabel(_)
            | DegenerateLabels(_)
            | EmptyPools
            | TooFewPoints { .. } => 5,
            AtStep { .. } => unreachable!("root() unwraps step context"),
        }
    }
}
