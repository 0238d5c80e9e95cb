use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::RunError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    #[serde(default)]
    pub capability: String,
    pub instances: usize,
    pub failed: usize,
    /// Aggregate per metric id.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTask {
    pub task: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub tasks: Vec<TaskReport>,
    #[serde(default)]
    pub skipped: Vec<SkippedTask>,
    pub config: RunConfig,
    pub wall_time_ms: f64,
    /// Tokenizer used by ROUGE and length-normalized scoring.
    pub tokenizer: String,
    /// How `f1` was computed.
    pub f1_pooling: String,
}

impl RunReport {
    pub fn is_complete(&self) -> bool {
        self.skipped.is_empty()
    }

    pub fn task(&self, name: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == name)
    }

    pub fn score(&self, task: &str, metric: &str) -> Option<f64> {
        self.task(task).and_then(|t| t.metrics.get(metric).copied())
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let body = std::fs::read_to_string(path)?;
        serde_json::from_str(&body)
            .map_err(|e| RunError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Scores only, with timing and config removed.
    pub fn scores(&self) -> BTreeMap<(String, String), f64> {
        self.tasks
            .iter()
            .flat_map(|t| {
                t.metrics
                    .iter()
                    .map(move |(m, v)| ((t.task.clone(), m.clone()), *v))
            })
            .collect()
    }
}

/// Benchmark x model table built from any number of run reports.
///
/// Rows are `task/metric` pairs (or just the task when a row label is
/// given by the caller), columns are model labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `cells[row][column]`, as a fraction in [0, 1].
    pub cells: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ScoreGrid {
    pub fn insert(&mut self, row: &str, column: &str, value: f64) {
        if !self.rows.iter().any(|r| r == row) {
            self.rows.push(row.to_string());
        }
        if !self.columns.iter().any(|c| c == column) {
            self.columns.push(column.to_string());
        }
        self.cells
            .entry(row.to_string())
            .or_default()
            .insert(column.to_string(), value);
    }

    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        self.cells.get(row)?.get(column).copied()
    }

    /// One row per (task, metric), one column per report's model.
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a RunReport>) -> Self {
        let mut grid = Self::default();
        for report in reports {
            for t in &report.tasks {
                for (metric, value) in &t.metrics {
                    grid.insert(&format!("{}/{}", t.task, metric), &report.model, *value);
                }
            }
        }
        grid
    }

    /// Markdown table with values shown as percentages, one decimal.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Benchmark |");
        for c in &self.columns {
            let _ = write!(out, " {c} |");
        }
        out.push_str("\n|---|");
        for _ in &self.columns {
            out.push_str("---:|");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "| {r} |");
            for c in &self.columns {
                match self.get(r, c) {
                    Some(v) => {
                        let _ = write!(out, " {:.1} |", v * 100.0);
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width plain text table.
    pub fn to_table(&self) -> String {
        let first = self
            .rows
            .iter()
            .map(String::len)
            .chain(std::iter::once("benchmark".len()))
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = self.columns.iter().map(|c| c.len().max(6)).collect();
        let mut out = format!("{:<first$}", "benchmark");
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{r:<first$}");
            for (c, w) in self.columns.iter().zip(&widths) {
                let cell = self
                    .get(r, c)
                    .map_or_else(|| "-".to_string(), |v| format!("{:.1}", v * 100.0));
                let _ = write!(out, "  {cell:>w$}");
            }
            out.push('\n');
        }
        out
    }
}
