//! Process exit codes and the mapping from library errors onto them.

use std::fmt;

use cbd::checkpoint::CheckpointError;
use cbd::data::DataError;
use cbd::distill::DistillError;
use cbd::eval::EvalError;
use cbd::surgery::SurgeryError;
use cbd::transformer::ModelError;

pub const USAGE: u8 = 2;
pub const TRAINING: u8 = 3;
pub const NUMERIC: u8 = 4;
pub const EVALUATION: u8 = 5;

/// An error carrying the exit code the process should end with.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Failure::new(USAGE, anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exit {}: {:#}", self.code, self.error)
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Config parsing and argument validation.
impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: USAGE, error }
    }
}

pub fn surgery_code(e: &SurgeryError) -> u8 {
    match e {
        SurgeryError::AlphaOutOfRange(_) | SurgeryError::DegenerateAnchors(_) => NUMERIC,
        _ => USAGE,
    }
}

pub fn distill_code(e: &DistillError) -> u8 {
    match e {
        DistillError::InvalidConfig(_) | DistillError::VocabMismatch(_) => USAGE,
        DistillError::Surgery(SurgeryError::NotNested(_) | SurgeryError::ConfigMismatch(_)) => {
            USAGE
        }
        _ => TRAINING,
    }
}

pub fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::ConfigMismatch(_) | EvalError::VocabMismatch { .. } => USAGE,
        EvalError::Surgery(s) => surgery_code(s),
        EvalError::Distill(d) => distill_code(d),
        _ => EVALUATION,
    }
}

impl From<SurgeryError> for Failure {
    fn from(e: SurgeryError) -> Self {
        Failure::new(surgery_code(&e), e)
    }
}

impl From<DistillError> for Failure {
    fn from(e: DistillError) -> Self {
        Failure::new(distill_code(&e), e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::new(eval_code(&e), e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::new(USAGE, e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::new(USAGE, e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::new(USAGE, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(USAGE, e)
    }
}
