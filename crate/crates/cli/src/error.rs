//! Failures carry the pipeline stage they arose in; `main` serializes them
//! as one JSON object on stderr.

use std::fmt;

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub stage: String,
    pub message: String,
}

impl CliError {
    pub fn new(stage: impl Into<String>, message: impl fmt::Display) -> Self {
        CliError {
            stage: stage.into(),
            message: message.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "stage": self.stage, "message": self.message } })
            .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Attach a stage name to any error on the way out.
pub trait StageCtx<T> {
    fn stage(self, name: &str) -> CliResult<T>;
}

impl<T, E: fmt::Display> StageCtx<T> for Result<T, E> {
    fn stage(self, name: &str) -> CliResult<T> {
        self.map_err(|e| CliError::new(name, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_json_has_stage_and_message() {
        let e = CliError::new("prune", "ratio 1.5 out of range");
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["error"]["stage"], "prune");
        assert_eq!(v["error"]["message"], "ratio 1.5 out of range");
    }
}
