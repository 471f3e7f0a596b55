//! Pipeline subcommands behind the `counsel` binary. Each subcommand reads
//! and writes named artifacts in one run directory.

pub mod config;
pub mod pipeline;
pub mod run;

use std::path::Path;

pub use config::PipelineConfig;
pub use run::Run;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing artifact {artifact}; run `counsel {producer}` first")]
    MissingArtifact { artifact: String, producer: String },
    #[error("config: {0}")]
    Config(String),
    #[error("run directory was set up with a different config: {0}")]
    ConfigMismatch(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{0}")]
    Compute(String),
    #[error("service: {0}")]
    Service(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::MissingArtifact { .. } => "missing_artifact",
            Self::Config(_) => "config",
            Self::ConfigMismatch(_) => "config_mismatch",
            Self::Io { .. } => "io",
            Self::Input(_) => "invalid_input",
            Self::Compute(_) => "compute",
            Self::Service(_) => "service",
        }
    }

    /// The error as a single JSON object for machine consumption.
    pub fn to_json(&self) -> serde_json::Value {
        let mut e = serde_json::json!({ "code": self.code(), "message": self.to_string() });
        if let Self::MissingArtifact { artifact, producer } = self {
            e["artifact"] = artifact.clone().into();
            e["producer"] = producer.clone().into();
        }
        serde_json::json!({ "error": e })
    }
}

macro_rules! compute_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Compute(e.to_string())
            }
        }
    )*};
}

compute_error!(
    counsel_core::corpus::CorpusError,
    counsel_core::session_graph::GraphError,
    counsel_core::hgt::HgtError,
    counsel_core::generator::GeneratorError,
    counsel_core::evaluation::EvalError,
    counsel_core::numerics::NumericsError
);

impl From<counsel_service::ServiceError> for CliError {
    fn from(e: counsel_service::ServiceError) -> Self {
        Self::Service(e.to_string())
    }
}
