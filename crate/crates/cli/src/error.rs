use std::fmt;

use serde::Serialize;

/// Failure of a command or request, with a stable machine-readable kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AppError {
    pub kind: String,
    pub message: String,
    #[serde(skip)]
    pub class: ErrorClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorClass {
    /// Malformed input: bad flags, files or request bodies.
    #[default]
    Invalid,
    NotFound,
    Conflict,
    Unavailable,
    Internal,
}

impl AppError {
    pub fn new(class: ErrorClass, kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.to_string(),
            message: message.into(),
            class,
        }
    }

    pub fn invalid(kind: &str, message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Invalid, kind, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::NotFound, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Conflict, "conflict", message)
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Unavailable, "store_unavailable", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Internal, "internal", message)
    }

    /// Single-line JSON for the diagnostic stream.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }

    pub fn exit_code(&self) -> i32 {
        match self.class {
            ErrorClass::Invalid | ErrorClass::NotFound => 2,
            _ => 1,
        }
    }

    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for AppError {}

fn class_of(e: &ionlds_core::Error) -> ErrorClass {
    use ionlds_core::Error as E;
    match e {
        E::Numerical(_) | E::Factorization { .. } | E::Propagation { .. } | E::InvalidProjection(_) => {
            ErrorClass::Internal
        }
        E::AtTime { source, .. } => class_of(source),
        _ => ErrorClass::Invalid,
    }
}

impl From<ionlds_core::Error> for AppError {
    fn from(e: ionlds_core::Error) -> Self {
        Self::new(class_of(&e), e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        Self::invalid("io", e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        Self::invalid("json", e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;
