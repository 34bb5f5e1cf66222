use std::fmt;

/// Exit status for input and validation failures.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for numerical failures detected during a run.
pub const EXIT_NUMERICAL: i32 = 3;

/// A failure reported as `error[code]: message` with a fixed exit status.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub exit: i32,
}

impl CliError {
    pub fn new(code: &str, message: impl Into<String>, exit: i32) -> Self {
        CliError { code: code.to_string(), message: message.into(), exit }
    }

    pub fn config(path: &str, line: Option<usize>, message: &str) -> Self {
        CliError::new("invalid-config", format!("{}: {message}", location(path, line)), EXIT_VALIDATION)
    }

    pub fn core_at(path: &str, line: Option<usize>, e: ersatz_core::Error) -> Self {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", location(path, line), err.message);
        err
    }

    pub fn io(what: &str, e: std::io::Error) -> Self {
        CliError::new("io-error", format!("{what}: {e}"), EXIT_VALIDATION)
    }
}

fn location(path: &str, line: Option<usize>) -> String {
    match line {
        Some(l) => format!("{path}:{l}"),
        None => path.to_string(),
    }
}

impl From<ersatz_core::Error> for CliError {
    fn from(e: ersatz_core::Error) -> Self {
        let exit = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION };
        CliError::new(e.code(), e.to_string(), exit)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new("io-error", e.to_string(), EXIT_VALIDATION)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}
