use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gateway::{GenerationParams, RetryPolicy};
use crate::metrics::NormalizationSpec;
use crate::prompting::{EvalMode, DEFAULT_TEMPLATE_ID};

use super::RunError;

/// Declarative task definition, loaded from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    #[serde(default)]
    pub capability: String,
    #[serde(default)]
    pub eval_mode: EvalMode,
    #[serde(default = "default_template")]
    pub template_id: String,
    #[serde(default)]
    pub fewshot_k: usize,
    /// Items moved out of the evaluation set into the exemplar pool.
    #[serde(default)]
    pub fewshot_pool_size: usize,
    #[serde(default)]
    pub cot: bool,
    #[serde(default)]
    pub postproc_chain: Vec<String>,
    pub metrics: Vec<String>,
    pub data_path: String,
    #[serde(default = "default_schema")]
    pub schema_id: String,
    #[serde(default)]
    pub normalization: NormalizationSpec,
    /// Generations per instance; pass@k needs at least k.
    #[serde(default = "one")]
    pub samples: u32,
    /// Label treated as the positive class by `f1`.
    #[serde(default = "default_positive")]
    pub positive_label: String,
    #[serde(default)]
    pub judge_rubric: Option<String>,
    #[serde(default = "default_sandbox_timeout")]
    pub sandbox_timeout_s: f64,
    /// Prepend the question (e.g. a function signature) to each candidate
    /// before execution.
    #[serde(default)]
    pub prepend_question_to_candidate: bool,
}

fn default_template() -> String {
    DEFAULT_TEMPLATE_ID.into()
}
fn default_schema() -> String {
    "docitem".into()
}
fn one() -> u32 {
    1
}
fn default_positive() -> String {
    "yes".into()
}
fn default_sandbox_timeout() -> f64 {
    10.0
}

impl TaskSpec {
    /// Reads a task file; `data_path` is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let body = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut spec: TaskSpec =
            serde_json::from_str(&body).map_err(|e| format!("{}: {e}", path.display()))?;
        spec.data_path = resolve(path.parent(), &spec.data_path);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.name.is_empty() {
            return Err("task name is empty".into());
        }
        if self.metrics.is_empty() {
            return Err(format!("task {} lists no metrics", self.name));
        }
        if self.fewshot_k > 0 && self.fewshot_pool_size == 0 {
            return Err(format!(
                "task {} asks for {} exemplars but configures no few-shot pool",
                self.name, self.fewshot_k
            ));
        }
        if self.samples == 0 {
            return Err(format!("task {} needs at least one sample", self.name));
        }
        for id in &self.metrics {
            let metric = MetricKind::parse(id)?;
            metric.check_compatible(self)?;
        }
        Ok(())
    }
}

/// A metric id as it appears in task files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    ExactMatch,
    InMatch,
    PrefixMatch,
    Accuracy,
    AccuracyNorm,
    F1,
    Rouge(usize),
    RougeL,
    PassAtK(u32),
    Judge,
}

impl MetricKind {
    pub fn parse(id: &str) -> Result<Self, String> {
        Ok(match id {
            "exact_match" => Self::ExactMatch,
            "in_match" => Self::InMatch,
            "prefix_match" => Self::PrefixMatch,
            "accuracy" => Self::Accuracy,
            "accuracy_norm" => Self::AccuracyNorm,
            "f1" => Self::F1,
            "rougeL" => Self::RougeL,
            "judge" => Self::Judge,
            _ => {
                if let Some(n) = id.strip_prefix("rouge").and_then(|n| n.parse().ok()) {
                    if n >= 1 {
                        return Ok(Self::Rouge(n));
                    }
                }
                if let Some(k) = id.strip_prefix("pass@").and_then(|k| k.parse().ok()) {
                    if k >= 1 {
                        return Ok(Self::PassAtK(k));
                    }
                }
                return Err(format!("unknown metric {id:?}"));
            }
        })
    }

    fn check_compatible(&self, task: &TaskSpec) -> Result<(), String> {
        match (task.eval_mode, self) {
            (EvalMode::Loglikelihood, Self::Accuracy | Self::AccuracyNorm) => Ok(()),
            (EvalMode::Loglikelihood, _) => Err(format!(
                "metric {self} needs generated text but task {} is loglikelihood",
                task.name
            )),
            (EvalMode::Generation, Self::AccuracyNorm) => Err(format!(
                "metric accuracy_norm needs loglikelihood scoring (task {})",
                task.name
            )),
            (EvalMode::Generation, Self::PassAtK(k)) if *k > task.samples => Err(format!(
                "pass@{k} needs at least {k} samples, task {} draws {}",
                task.name, task.samples
            )),
            _ => Ok(()),
        }
    }

    /// Corpus-level metrics pool counts instead of averaging instances.
    pub fn is_pooled(&self) -> bool {
        matches!(self, Self::F1)
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::ExactMatch => f.write_str("exact_match"),
            Self::InMatch => f.write_str("in_match"),
            Self::PrefixMatch => f.write_str("prefix_match"),
            Self::Accuracy => f.write_str("accuracy"),
            Self::AccuracyNorm => f.write_str("accuracy_norm"),
            Self::F1 => f.write_str("f1"),
            Self::Rouge(n) => write!(f, "rouge{n}"),
            Self::RougeL => f.write_str("rougeL"),
            Self::PassAtK(k) => write!(f, "pass@{k}"),
            Self::Judge => f.write_str("judge"),
        }
    }
}

/// Everything one run needs. Relative paths in a config file are resolved
/// against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model_endpoint: String,
    /// Paths to task files.
    pub tasks: Vec<String>,
    #[serde(default)]
    pub params: GenerationParams,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    pub output_dir: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default = "default_timeout")]
    pub request_timeout_s: f64,
    #[serde(default)]
    pub judge_endpoint: Option<String>,
    /// Sandbox executable and arguments, for pass@k.
    #[serde(default)]
    pub sandbox_command: Vec<String>,
    #[serde(default)]
    pub template_dirs: Vec<String>,
}

fn default_concurrency() -> usize {
    8
}
fn default_timeout() -> f64 {
    120.0
}

impl RunConfig {
    pub fn new(
        model_endpoint: impl Into<String>,
        tasks: Vec<String>,
        output_dir: impl Into<String>,
    ) -> Self {
        Self {
            model_endpoint: model_endpoint.into(),
            tasks,
            params: GenerationParams::default(),
            concurrency: default_concurrency(),
            retry: RetryPolicy::default(),
            output_dir: output_dir.into(),
            seed: 0,
            limit: None,
            request_timeout_s: default_timeout(),
            judge_endpoint: None,
            sandbox_command: Vec::new(),
            template_dirs: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let body = std::fs::read_to_string(path)?;
        let mut config: RunConfig = serde_json::from_str(&body)
            .map_err(|e| RunError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent();
        config.tasks = config.tasks.iter().map(|t| resolve(base, t)).collect();
        config.output_dir = resolve(base, &config.output_dir);
        config.template_dirs = config
            .template_dirs
            .iter()
            .map(|t| resolve(base, t))
            .collect();
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let invalid = |m: String| Err(RunError::InvalidConfig(m));
        if self.model_endpoint.is_empty() {
            return invalid("model_endpoint is empty".into());
        }
        if self.concurrency == 0 {
            return invalid("concurrency must be at least 1".into());
        }
        if self.limit == Some(0) {
            return invalid("limit must be at least 1 when present".into());
        }
        if self.retry.max_attempts == 0 {
            return invalid("retry.max_attempts must be positive".into());
        }
        if self.request_timeout_s.is_nan() || self.request_timeout_s <= 0.0 {
            return invalid("request_timeout_s must be positive".into());
        }
        self.params.validate().map_err(RunError::InvalidConfig)
    }

    /// Names of the fields that change what gets evaluated, where `self`
    /// and `other` disagree.
    pub fn semantic_diff(&self, other: &RunConfig) -> Vec<&'static str> {
        let mut diff = Vec::new();
        if self.tasks != other.tasks {
            diff.push("tasks");
        }
        if self.params != other.params {
            diff.push("params");
        }
        if self.seed != other.seed {
            diff.push("seed");
        }
        if self.limit != other.limit {
            diff.push("limit");
        }
        diff
    }
}

fn resolve(base: Option<&Path>, p: &str) -> String {
    let path = PathBuf::from(p);
    match base {
        Some(b) if path.is_relative() && !b.as_os_str().is_empty() => {
            b.join(path).display().to_string()
        }
        _ => p.to_string(),
    }
}
