use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::gateway::{GenerationParams, GenerationRequest, GenerationResponse};
use crate::metrics::BinaryCounts;

use super::config::MetricKind;
use super::RunError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RawOutput {
    Generation {
        texts: Vec<String>,
    },
    Loglikelihood {
        logprob_sums: Vec<f64>,
        token_counts: Vec<u32>,
    },
    Failed,
}

/// Predicted and gold class of one binary-classification instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryLabel {
    pub pred: bool,
    pub gold: bool,
}

/// Audit trail for one evaluated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub instance_id: String,
    pub prompt_text: String,
    pub gold: String,
    pub raw_output: RawOutput,
    /// One entry per generated sample, after the task's rule chain.
    pub processed_output: Vec<String>,
    pub scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<BinaryLabel>,
    /// Set when the instance could not be scored at all; every metric is 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Per-metric failures (judge, sandbox) that zeroed a single score.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metric_errors: BTreeMap<String, String>,
    pub attempts: u32,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum AggregateError {
    #[error("no records to aggregate")]
    EmptyRecords,
    #[error("record {instance_id} has no score for {metric}")]
    MissingMetric { metric: String, instance_id: String },
}

/// Mean of per-instance scores, or pooled counts for corpus-level metrics.
pub fn aggregate(records: &[EvalRecord], metric_id: &str) -> Result<f64, AggregateError> {
    if records.is_empty() {
        return Err(AggregateError::EmptyRecords);
    }
    let missing = |r: &EvalRecord| AggregateError::MissingMetric {
        metric: metric_id.to_string(),
        instance_id: r.instance_id.clone(),
    };
    if MetricKind::parse(metric_id).is_ok_and(|m| m.is_pooled()) {
        let mut counts = BinaryCounts::default();
        for r in records {
            let label = r.label.ok_or_else(|| missing(r))?;
            counts.add(label.pred, label.gold);
        }
        return Ok(counts.prf().f1);
    }
    let mut sum = 0.0;
    for r in records {
        sum += r.scores.get(metric_id).ok_or_else(|| missing(r))?;
    }
    Ok(sum / records.len() as f64)
}

/// Hash of everything that determines a response: task, request id,
/// prompt, continuations and sampling parameters.
pub fn cache_key(task: &str, req: &GenerationRequest) -> String {
    let material = serde_json::json!([
        task,
        req.instance_id,
        req.prompt,
        req.mode,
        req.continuations,
        req.params
    ]);
    hex::encode(Sha256::digest(material.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub cache_key: String,
    pub response: GenerationResponse,
    pub attempts: u32,
    pub latency_ms: f64,
}

impl CacheEntry {
    pub fn new(cache_key: String, response: GenerationResponse) -> Self {
        Self {
            cache_key,
            attempts: response.attempts,
            latency_ms: response.latency_ms,
            response,
        }
    }

    pub fn into_response(self) -> GenerationResponse {
        let mut r = self.response;
        r.attempts = self.attempts;
        r.latency_ms = self.latency_ms;
        r
    }
}

/// Reads successful cache entries keyed by cache key. Any unreadable line
/// makes the whole cache suspect.
pub fn read_cache(path: &Path) -> Result<BTreeMap<String, CacheEntry>, RunError> {
    let mut out = BTreeMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CacheEntry =
            serde_json::from_str(&line).map_err(|e| RunError::CorruptCache {
                path: path.display().to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        if !entry.response.is_error() {
            out.insert(entry.cache_key.clone(), entry);
        }
    }
    Ok(out)
}

/// Append-only response log, flushed per entry.
pub struct CacheWriter {
    out: BufWriter<File>,
}

impl CacheWriter {
    pub fn open(path: &Path, truncate: bool) -> Result<Self, RunError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!truncate)
            .truncate(truncate)
            .open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, entry: &CacheEntry) -> Result<(), RunError> {
        serde_json::to_writer(&mut self.out, entry).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<(), RunError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, RunError> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| RunError::CorruptCache {
                path: path.display().to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Records JSONL with latency fields removed, for run-to-run comparison.
pub fn canonicalize_records(jsonl: &str) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let mut v: Value = serde_json::from_str(line)?;
        strip_latency(&mut v);
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}

fn strip_latency(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("latency_ms");
            map.remove("wall_time_ms");
            map.values_mut().for_each(strip_latency);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_latency),
        _ => {}
    }
}

/// Parameters for sample `j` of a multi-sample instance.
pub fn sample_params(base: &GenerationParams, run_seed: u64, j: u32) -> GenerationParams {
    GenerationParams {
        seed: Some(base.seed.unwrap_or(run_seed).wrapping_add(u64::from(j))),
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, metric: &str, score: f64) -> EvalRecord {
        EvalRecord {
            task: "t".into(),
            instance_id: id.into(),
            prompt_text: String::new(),
            gold: String::new(),
            raw_output: RawOutput::Failed,
            processed_output: vec![],
            scores: [(metric.to_string(), score)].into_iter().collect(),
            label: None,
            error: None,
            metric_errors: BTreeMap::new(),
            attempts: 1,
            latency_ms: 3.5,
        }
    }

    #[test]
    fn mean_aggregation() {
        let rs: Vec<_> = [1.0, 0.0, 1.0, 1.0]
            .iter()
            .enumerate()
            .map(|(i, s)| rec(&i.to_string(), "exact_match", *s))
            .collect();
        assert_eq!(aggregate(&rs, "exact_match"), Ok(0.75));
        assert_eq!(aggregate(&[rec("a", "rougeL", 0.4)], "rougeL"), Ok(0.4));
        assert_eq!(aggregate(&[], "rougeL"), Err(AggregateError::EmptyRecords));
        assert!(matches!(
            aggregate(&[rec("a", "rougeL", 0.4)], "exact_match"),
            Err(AggregateError::MissingMetric { .. })
        ));
    }

    #[test]
    fn f1_is_pooled() {
        // instance 1 is a true positive (instance F1 = 1), instance 2 a false
        // positive (instance F1 = 0). Mean of instance F1 is 0.5; pooled
        // counts give P = 1/2, R = 1/1, F1 = 2/3.
        let mut tp = rec("a", "f1", 1.0);
        tp.label = Some(BinaryLabel {
            pred: true,
            gold: true,
        });
        let mut fp = rec("b", "f1", 0.0);
        fp.label = Some(BinaryLabel {
            pred: true,
            gold: false,
        });
        let pooled = aggregate(&[tp.clone(), fp.clone()], "f1").unwrap();
        assert!((pooled - 2.0 / 3.0).abs() < 1e-12);
        let mean = (tp.scores["f1"] + fp.scores["f1"]) / 2.0;
        assert_eq!(mean, 0.5);
        assert_ne!(pooled, mean);
    }

    #[test]
    fn canonical_form_drops_latency() {
        let a = serde_json::to_string(&rec("a", "m", 1.0)).unwrap();
        let mut other = rec("a", "m", 1.0);
        other.latency_ms = 99.0;
        let b = serde_json::to_string(&other).unwrap();
        assert_ne!(a, b);
        assert_eq!(
            canonicalize_records(&a).unwrap(),
            canonicalize_records(&b).unwrap()
        );
    }

    #[test]
    fn cache_key_tracks_prompt_and_params() {
        let req = GenerationRequest::generation("i", "p", GenerationParams::default());
        let base = cache_key("t", &req);
        assert_eq!(base, cache_key("t", &req.clone()));
        let mut edited = req.clone();
        edited.prompt.push(' ');
        assert_ne!(base, cache_key("t", &edited));
        let mut hotter = req.clone();
        hotter.params.temperature = 0.5;
        assert_ne!(base, cache_key("t", &hotter));
        assert_ne!(base, cache_key("t2", &req));
    }

    #[test]
    fn corrupt_cache_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("responses.jsonl");
        let mut w = CacheWriter::open(&path, true).unwrap();
        w.append(&CacheEntry::new(
            "k".into(),
            GenerationResponse::text("i", "x", crate::gateway::FinishReason::Stop),
        ))
        .unwrap();
        drop(w);
        assert_eq!(read_cache(&path).unwrap().len(), 1);
        std::fs::write(
            &path,
            format!("{}{{truncated\n", std::fs::read_to_string(&path).unwrap()),
        )
        .unwrap();
        assert!(matches!(
            read_cache(&path),
            Err(RunError::CorruptCache { line: 2, .. })
        ));
    }
}
