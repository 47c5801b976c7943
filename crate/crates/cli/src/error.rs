use std::fmt;

use serde_json::{json, Value};

/// Process exit codes. These are part of the CLI contract.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const AUTH: u8 = 2;
    pub const TRANSPORT: u8 = 3;
    pub const LOCK: u8 = 4;
    pub const VALIDATION: u8 = 5;
    pub const USAGE: u8 = 64;
}

/// A failed command. `code` is either a server error code or one of the
/// client-side codes (`CONNECT_FAILURE`, `CORRUPT_DOWNLOAD`, `USAGE`, ...).
#[derive(Debug, Clone)]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub details: Box<Value>,
    pub violations: Vec<Value>,
    pub hint: Option<String>,
}

impl CliError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        CliError {
            code: code.to_string(),
            message: message.into(),
            details: Box::new(Value::Null),
            violations: Vec::new(),
            hint: None,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("USAGE", message)
    }

    pub fn transport(message: impl Into<String>) -> Self {
        Self::new("CONNECT_FAILURE", message)
    }

    pub fn io(context: &str, e: std::io::Error) -> Self {
        Self::new("IO_ERROR", format!("{context}: {e}"))
    }

    pub fn with_hint(mut self, hint: impl Into<String>) -> Self {
        self.hint = Some(hint.into());
        self
    }

    /// Builds an error from a server error envelope.
    pub fn from_envelope(status: u16, body: &Value) -> Self {
        let err = &body["error"];
        let code = err["code"].as_str().unwrap_or("HTTP_ERROR");
        let message = err["message"]
            .as_str()
            .map(str::to_string)
            .unwrap_or_else(|| format!("server answered HTTP {status}"));
        CliError {
            code: code.to_string(),
            message,
            details: Box::new(err["details"].clone()),
            violations: err["violations"].as_array().cloned().unwrap_or_default(),
            hint: None,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.code.as_str() {
            "UNAUTHENTICATED" | "INVALID_CREDENTIALS" | "FORBIDDEN" | "NOT_LOGGED_IN" => exit::AUTH,
            "CONNECT_FAILURE" => exit::TRANSPORT,
            "LOCK_HELD" | "LOCK_EXPIRED" | "NOT_HOLDER" | "UNKNOWN_LOCK" | "WRONG_BLOCK"
            | "STALE_BASE" | "LOCK_RELEASED" => exit::LOCK,
            "VALIDATION_FAILED" | "STRUCTURAL_INVALID" | "CORRUPT_DOWNLOAD" | "HASH_MISMATCH"
            | "UNKNOWN_KIND" | "BLOB_TOO_LARGE" => exit::VALIDATION,
            "USAGE" => exit::USAGE,
            _ => exit::OTHER,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut err = json!({
            "code": self.code,
            "message": self.message,
            "exit_code": self.exit_code(),
        });
        if !self.details.is_null() {
            err["details"] = (*self.details).clone();
        }
        if !self.violations.is_empty() {
            err["violations"] = Value::Array(self.violations.clone());
        }
        if let Some(h) = &self.hint {
            err["hint"] = Value::String(h.clone());
        }
        json!({ "error": err })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)?;
        if self.code == "LOCK_HELD" {
            if let (Some(holder), Some(until)) =
                (self.details["holder"].as_str(), self.details["expires_at"].as_str())
            {
                write!(f, " (held by {holder} until {until})")?;
            }
        }
        for v in &self.violations {
            write!(
                f,
                "\n  {}: {}",
                v["code"].as_str().unwrap_or("?"),
                v["detail"].as_str().unwrap_or("")
            )?;
            if let Some(locus) = v["locus"].as_str() {
                write!(f, " [{locus}]")?;
            }
        }
        if let Some(h) = &self.hint {
            write!(f, "\nhint: {h}")?;
        }
        Ok(())
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;
