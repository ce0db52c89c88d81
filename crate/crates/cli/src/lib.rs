//! Experiment runner for `rwre-core`: configuration, execution and report
//! files.

mod config;
mod run;

pub use config::{ExperimentConfig, Kind, Overrides, Params};
pub use run::{run_experiment, Summary};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] rwre_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for resource budgets, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use rwre_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Resource { .. }) => 3,
            CliError::Core(E::Io(_) | E::Csv(_) | E::Json(_)) | CliError::Io(_) => 1,
            CliError::Core(_) => 2,
        }
    }

    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "resource",
            _ => "runtime",
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.category(),
            "code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}
