#![allow(dead_code)]

use std::path::{Path, PathBuf};

use evalkit::mockserver::MockScript;
use evalkit::runner::{canonicalize_records, RunConfig, RECORDS_FILE};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(name)
}

pub fn golden_task() -> PathBuf {
    data_dir().join("tasks/mc_mini/task.json")
}

pub fn echo_task() -> PathBuf {
    data_dir().join("tasks/echo/task.json")
}

pub fn golden_script() -> MockScript {
    let path = data_dir().join("tasks/mc_mini/mock_script.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn config(endpoint: &str, tasks: &[PathBuf], out: &Path) -> RunConfig {
    let mut c = RunConfig::new(
        endpoint,
        tasks.iter().map(|t| t.display().to_string()).collect(),
        out.display().to_string(),
    );
    c.retry.backoff_base_ms = 1.0;
    c.retry.backoff_cap_ms = 5.0;
    c
}

/// Records file of one task with latency fields removed.
pub fn canonical_records(out: &Path, model: &str, task: &str) -> String {
    let body = std::fs::read_to_string(out.join(model).join(task).join(RECORDS_FILE)).unwrap();
    canonicalize_records(&body).unwrap()
}
