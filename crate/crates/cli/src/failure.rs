//! Exit-code classification.

use std::fmt;

pub const USAGE: u8 = 2;
pub const ENVIRONMENT: u8 = 3;
pub const INTERNAL: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: USAGE,
            error: error.into(),
        }
    }

    pub fn environment(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: ENVIRONMENT,
            error: error.into(),
        }
    }

    pub fn internal(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: INTERNAL,
            error: error.into(),
        }
    }

    pub fn context(mut self, what: impl fmt::Display + Send + Sync + 'static) -> Self {
        self.error = self.error.context(what);
        self
    }
}

/// Bad input is the caller's problem; anything else that fails inside a
/// training stage is ours.
impl From<csicl_core::Error> for Failure {
    fn from(e: csicl_core::Error) -> Self {
        use csicl_core::Error as E;
        match e {
            E::Parse { .. }
            | E::Config(_)
            | E::Schedule(_)
            | E::EmptyData(_)
            | E::UnrecoverableColumn { .. }
            | E::Dimension { .. }
            | E::Io(_) => Failure::usage(e),
            _ => Failure::internal(e),
        }
    }
}

/// Writes an output file; failures here are environmental.
pub fn write_output(path: &std::path::Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents)
        .map_err(|e| Failure::environment(e).context(format!("writing {}", path.display())))
}

pub fn create_dir(path: &std::path::Path) -> CliResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Failure::environment(e).context(format!("creating {}", path.display())))
}
