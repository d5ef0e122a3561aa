use thiserror::Error;

use crate::graph::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("type error: {0}")]
    Type(String),

    #[error("verification failed: {}", format_diagnostics(.0))]
    Verify(Vec<Diagnostic>),

    #[error("pass `{pass}` broke the function: {}", format_diagnostics(.diagnostics))]
    Pass {
        pass: String,
        diagnostics: Vec<Diagnostic>,
    },

    #[error("graph contains a cycle through node {0}")]
    Cycle(String),

    #[error("no gradient rule for node {0}")]
    UnsupportedGradient(String),

    #[error("differentiation error: {0}")]
    Gradient(String),

    #[error("lowering error: {0}")]
    Lowering(String),

    #[error("profile error: {0}")]
    Profile(String),

    #[error("missing profile entry for tensor `{0}`")]
    MissingProfile(String),

    #[error("binding error: {0}")]
    Binding(String),

    #[error("ir error: {0}")]
    Ir(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("execution error: {0}")]
    Exec(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error("cannot partition: {0}")]
    Unpartitionable(String),

    #[error("provisioning failed on device {device}: {msg}")]
    Provision { device: usize, msg: String },

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
