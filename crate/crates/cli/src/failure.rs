use serde::Serialize;
use std::process::ExitCode;

/// Why a command failed, and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    kind: Kind,
    message: String,
    step: Option<usize>,
    pub residuals: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Invalid,
    Unsolved(&'static str),
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: &'static str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    primal_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dual_residual: Option<f64>,
}

impl Failure {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Invalid,
            message: message.into(),
            step: None,
            residuals: None,
        }
    }

    pub fn unsolved(what: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Unsolved(what),
            message: message.into(),
            step: None,
            residuals: None,
        }
    }

    pub fn at_step(mut self, step: usize) -> Self {
        self.step = Some(step);
        if self.kind == Kind::Invalid {
            self.message = format!("step {step}: {}", self.message);
        }
        self
    }

    /// Prints the failure and returns 1 for invalid input, 2 for problems
    /// that could not be solved (with a JSON diagnostic on stderr).
    pub fn report(&self) -> ExitCode {
        match self.kind {
            Kind::Invalid => {
                eprintln!("error: {}", self.message);
                ExitCode::from(1)
            }
            Kind::Unsolved(error) => {
                let d = Diagnostic {
                    error,
                    message: &self.message,
                    step: self.step,
                    primal_residual: self.residuals.map(|r| r.0),
                    dual_residual: self.residuals.map(|r| r.1),
                };
                eprintln!("{}", serde_json::to_string(&d).expect("diagnostic serializes"));
                ExitCode::from(2)
            }
        }
    }
}
