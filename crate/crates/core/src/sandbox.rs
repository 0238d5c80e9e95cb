//! Client side of the code-execution sandbox protocol.
//!
//! The sandbox is a separate executable: it reads one JSON request on stdin
//! and writes one JSON response on stdout, exiting 0 whenever it produced a
//! well-formed response. Its results feed the `c` of pass@k.

use std::process::Stdio;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;
use tokio::process::Command;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxRequest {
    pub candidate: String,
    pub tests: String,
    pub entry_point: String,
    pub timeout_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Pass,
    Fail,
    Timeout,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecutionStatus,
    #[serde(default)]
    pub stderr_tail: String,
    #[serde(default)]
    pub duration_s: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("sandbox command is empty")]
    NoCommand,
    #[error("sandbox harness failed: {0}")]
    HarnessFailure(String),
}

/// Extra wall-clock allowance on top of the job timeout before the harness
/// itself is considered hung.
const HARNESS_GRACE: Duration = Duration::from_secs(5);

/// Runs one job through the sandbox executable `command` (program + args).
pub async fn execute(
    command: &[String],
    req: &SandboxRequest,
) -> Result<ExecutionResult, SandboxError> {
    let (program, args) = command.split_first().ok_or(SandboxError::NoCommand)?;
    let harness = |m: String| SandboxError::HarnessFailure(m);
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .kill_on_drop(true)
        .spawn()
        .map_err(|e| harness(format!("spawn {program}: {e}")))?;

    let body = serde_json::to_vec(req).map_err(|e| harness(e.to_string()))?;
    let mut stdin = child.stdin.take().expect("stdin is piped");
    stdin
        .write_all(&body)
        .await
        .map_err(|e| harness(format!("write request: {e}")))?;
    drop(stdin);

    let limit = Duration::from_secs_f64(req.timeout_s.max(0.0)) + HARNESS_GRACE;
    let output = tokio::time::timeout(limit, child.wait_with_output())
        .await
        .map_err(|_| harness(format!("no response within {limit:?}")))?
        .map_err(|e| harness(e.to_string()))?;
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        return Err(harness(format!(
            "exit {}: {}",
            output.status,
            tail(&stderr, 400)
        )));
    }
    serde_json::from_slice(&output.stdout).map_err(|e| harness(format!("bad response: {e}")))
}

fn tail(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut start = s.len() - max;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    &s[start..]
}

pub fn count_passes(results: &[ExecutionResult]) -> usize {
    results
        .iter()
        .filter(|r| r.status == ExecutionStatus::Pass)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(status: ExecutionStatus) -> ExecutionResult {
        ExecutionResult {
            status,
            stderr_tail: String::new(),
            duration_s: 0.0,
        }
    }

    #[test]
    fn counts() {
        use ExecutionStatus::*;
        assert_eq!(count_passes(&[result(Pass), result(Fail), result(Pass)]), 2);
        assert_eq!(count_passes(&[]), 0);
        assert_eq!(count_passes(&[result(Timeout)]), 0);
    }

    #[test]
    fn wire_shapes() {
        let req = SandboxRequest {
            candidate: "def f(): return 1".into(),
            tests: "assert f() == 1".into(),
            entry_point: "f".into(),
            timeout_s: 3.0,
        };
        assert_eq!(
            serde_json::to_value(&req).unwrap(),
            serde_json::json!({"candidate": "def f(): return 1", "tests": "assert f() == 1", "entry_point": "f", "timeout_s": 3.0})
        );
        let resp: ExecutionResult =
            serde_json::from_str(r#"{"status":"timeout","stderr_tail":"","duration_s":1.02}"#)
                .unwrap();
        assert_eq!(resp.status, ExecutionStatus::Timeout);
    }

    #[test]
    fn tail_respects_char_boundaries() {
        assert_eq!(tail("héllo", 4), "llo");
        assert_eq!(tail("abc", 10), "abc");
    }
}
