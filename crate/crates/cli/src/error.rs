use std::fmt;
use std::process::ExitCode;

use airid::autograd::CheckpointError;
use airid::retrieval::EvalError;
use airid::synthdata::DataError;
use airid::training::TrainError;

/// Failure classes, one per process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numeric => 3,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: Kind::Usage,
            error: e.into(),
        }
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: Kind::Data,
            error: e.into(),
        }
    }

    pub fn context(self, c: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self {
            kind: self.kind,
            error: self.error.context(c),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind.code())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let kind = if e.is_numeric() {
            Kind::Numeric
        } else if matches!(e, TrainError::Config(_)) {
            Kind::Usage
        } else {
            Kind::Data
        };
        Self {
            kind,
            error: e.into(),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Self::data(e)
            }
        }
    )*};
}

data_errors!(
    DataError,
    EvalError,
    CheckpointError,
    std::io::Error,
    csv::Error
);

/// Attaches context to any error convertible into a [`Failure`].
pub trait Context<T> {
    fn ctx(self, c: impl fmt::Display + Send + Sync + 'static) -> CliResult<T>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn ctx(self, c: impl fmt::Display + Send + Sync + 'static) -> CliResult<T> {
        self.map_err(|e| e.into().context(c))
    }
}
