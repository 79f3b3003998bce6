//! JSON report assembly.
//!
//! Reports are serialised through `serde_json::Value`, whose maps keep keys
//! sorted, so output is stable across runs. The `digest` field is the SHA-256
//! of the compact report without its `digest` and `run` members; `run` holds
//! the wall-clock fields that legitimately change between runs.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::sha256_hex;
use crate::CliError;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RunInfo {
    pub timestamp_unix_s: u64,
    pub elapsed_seconds: f64,
    /// Planner time, when the command ran the planner.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve_seconds: Option<f64>,
}

impl RunInfo {
    pub fn new(elapsed_seconds: f64, solve_seconds: Option<f64>) -> Self {
        let timestamp_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        RunInfo { timestamp_unix_s, elapsed_seconds, solve_seconds }
    }
}

/// Digest of a report body, ignoring `digest` and `run`.
pub fn body_digest(report: &Value) -> String {
    let mut body = report.clone();
    if let Some(map) = body.as_object_mut() {
        map.remove("digest");
        map.remove("run");
    }
    sha256_hex(body.to_string().as_bytes())
}

/// Adds the version, digest and run members to a report body.
pub fn finalize(body: impl Serialize, run: RunInfo) -> Result<Value, CliError> {
    let mut value = serde_json::to_value(body).map_err(|e| CliError::Internal(e.to_string()))?;
    let map = value.as_object_mut().ok_or_else(|| CliError::Internal("report is not an object".into()))?;
    map.insert("report_version".into(), json!(REPORT_VERSION));
    let digest = body_digest(&value);
    let map = value.as_object_mut().expect("object");
    map.insert("digest".into(), json!(digest));
    map.insert("run".into(), serde_json::to_value(run).map_err(|e| CliError::Internal(e.to_string()))?);
    Ok(value)
}

pub fn render(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("values always serialise");
    s.push('\n');
    s
}

/// Machine-readable error object printed on failure.
pub fn error_object(err: &CliError) -> Value {
    json!({
        "error": {
            "kind": err.kind(),
            "message": err.to_string(),
            "exit_code": err.exit_code(),
        }
    })
}

/// `a / b`, or zero when `b` is zero.
pub fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Fixed-width text table, one row per entry.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
