//! Run orchestration: load tasks, render prompts, dispatch, cache,
//! post-process, score, and write records and reports.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.snapshot.json
//! <model>/report.json
//! <model>/<task>/responses.jsonl   raw responses, appended as they arrive
//! <model>/<task>/records.jsonl     scored records, in dataset order
//! <model>/<task>/report.json
//! ```

pub mod config;
pub mod record;
pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};

use crate::corpus::{load_dataset_as, split_fewshot_pool, DocItem, SchemaRegistry};
use crate::gateway::{
    GatewayClient, GatewayConfig, GenerationRequest, GenerationResponse, API_KEY_ENV,
};
use crate::judge::{judge, DEFAULT_RUBRIC};
use crate::metrics::{
    exact_match, in_match, mc_accuracy, normalize, pass_at_k, prefix_match, rouge_l, rouge_n,
    BinaryCounts, PassAtKInput,
};
use crate::postproc::{RuleChain, RuleContext, RuleRegistry};
use crate::prompting::{continuations, render_prompt, EvalMode, PromptOptions, TemplateStore};
use crate::sandbox::{self, count_passes, SandboxRequest};

pub use config::{MetricKind, RunConfig, TaskSpec};
pub use record::{
    aggregate, canonicalize_records, read_records, AggregateError, BinaryLabel, EvalRecord,
    RawOutput,
};
pub use report::{RunReport, ScoreGrid, SkippedTask, TaskReport};

pub const SNAPSHOT_FILE: &str = "config.snapshot.json";
pub const REPORT_FILE: &str = "report.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const RESPONSES_FILE: &str = "responses.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("endpoint {0} is not ready")]
    EndpointDown(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no run snapshot found in {0}")]
    MissingSnapshot(String),
    #[error("cache {path} is corrupt at line {line} ({message}); inspect or remove it manually before resuming")]
    CorruptCache {
        path: String,
        line: usize,
        message: String,
    },
    #[error("supplied config differs from the cached run in: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),
    #[error("run interrupted after {dispatched} requests; resume from {output_dir}")]
    Interrupted {
        dispatched: usize,
        output_dir: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// External control over a run in progress.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    /// Stop after dispatching this many requests across all tasks.
    pub dispatch_budget: Option<usize>,
    /// Stop taking new requests once set. In-flight ones still complete
    /// and are cached.
    pub cancel: Arc<AtomicBool>,
}

/// Holds the registries a run resolves names against.
#[derive(Debug, Clone, Default)]
pub struct Runner {
    pub schemas: SchemaRegistry,
    pub rules: RuleRegistry,
    pub templates: TemplateStore,
}

pub async fn run(config: &RunConfig) -> Result<RunReport, RunError> {
    Runner::default().run(config).await
}

pub async fn resume(
    output_dir: &Path,
    supplied: Option<&RunConfig>,
) -> Result<RunReport, RunError> {
    Runner::default().resume(output_dir, supplied).await
}

pub fn read_snapshot(output_dir: &Path) -> Result<RunConfig, RunError> {
    let path = output_dir.join(SNAPSHOT_FILE);
    let body = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RunError::MissingSnapshot(output_dir.display().to_string()),
        _ => RunError::Io(e),
    })?;
    serde_json::from_str(&body)
        .map_err(|e| RunError::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Every run report at most two levels below `dir`.
pub fn find_reports(dir: &Path) -> Result<Vec<RunReport>, RunError> {
    fn visit(dir: &Path, depth: usize, out: &mut Vec<RunReport>) -> std::io::Result<()> {
        let candidate = dir.join(REPORT_FILE);
        if candidate.is_file() {
            if let Ok(report) = RunReport::load(&candidate) {
                out.push(report);
                return Ok(());
            }
        }
        if depth == 0 {
            return Ok(());
        }
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            visit(&sub, depth - 1, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    visit(dir, 2, &mut out)?;
    Ok(out)
}

fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() || s.chars().all(|c| c == '.') {
        "model".into()
    } else {
        s
    }
}

/// Shared dispatch bookkeeping across the tasks of one run.
struct DispatchState {
    remaining_budget: Option<usize>,
    dispatched: usize,
    cancel: Arc<AtomicBool>,
}

struct Instance {
    item: DocItem,
    prompt_text: String,
    /// `(request, cache key)`, one per sample.
    requests: Vec<(GenerationRequest, String)>,
}

struct PreparedTask {
    spec: TaskSpec,
    metrics: Vec<MetricKind>,
    chain: RuleChain,
    instances: Vec<Instance>,
}

struct ScoringContext<'a> {
    spec: &'a TaskSpec,
    metrics: &'a [MetricKind],
    chain: &'a RuleChain,
    judge: Option<&'a GatewayClient>,
    config: &'a RunConfig,
}

impl Runner {
    pub async fn run(&self, config: &RunConfig) -> Result<RunReport, RunError> {
        self.run_with(config, &RunControl::default()).await
    }

    pub async fn run_with(
        &self,
        config: &RunConfig,
        control: &RunControl,
    ) -> Result<RunReport, RunError> {
        self.execute(config, false, control).await
    }

    /// Continues the run cached in `output_dir`. Cached responses are
    /// reused; only missing ones are dispatched. When `supplied` is given
    /// it must agree with the cached config on everything that affects
    /// results; its endpoint and dispatch settings are used.
    pub async fn resume(
        &self,
        output_dir: &Path,
        supplied: Option<&RunConfig>,
    ) -> Result<RunReport, RunError> {
        self.resume_with(output_dir, supplied, &RunControl::default())
            .await
    }

    pub async fn resume_with(
        &self,
        output_dir: &Path,
        supplied: Option<&RunConfig>,
        control: &RunControl,
    ) -> Result<RunReport, RunError> {
        let cached = read_snapshot(output_dir)?;
        let mut config = match supplied {
            Some(s) => {
                let diff = cached.semantic_diff(s);
                if !diff.is_empty() {
                    return Err(RunError::ConfigMismatch(
                        diff.into_iter().map(String::from).collect(),
                    ));
                }
                s.clone()
            }
            None => cached,
        };
        config.output_dir = output_dir.display().to_string();
        self.execute(&config, true, control).await
    }

    async fn execute(
        &self,
        config: &RunConfig,
        reuse_cache: bool,
        control: &RunControl,
    ) -> Result<RunReport, RunError> {
        config.validate()?;
        let started = Instant::now();
        let gateway_config = GatewayConfig {
            request_timeout: Duration::from_secs_f64(config.request_timeout_s),
            bearer_token: std::env::var(API_KEY_ENV).ok(),
            ..GatewayConfig::default()
        };
        let client = GatewayClient::with_config(&config.model_endpoint, gateway_config.clone());
        let health = client.probe_health().await;
        if !health.ready {
            return Err(RunError::EndpointDown(config.model_endpoint.clone()));
        }
        let model = if health.model_name.is_empty() {
            "model".to_string()
        } else {
            health.model_name.clone()
        };
        let judge_client = config
            .judge_endpoint
            .as_deref()
            .map(|e| GatewayClient::with_config(e, gateway_config.clone()));

        let output_dir = PathBuf::from(&config.output_dir);
        std::fs::create_dir_all(&output_dir)?;
        std::fs::write(
            output_dir.join(SNAPSHOT_FILE),
            serde_json::to_string_pretty(config).map_err(std::io::Error::from)?,
        )?;
        let model_dir = output_dir.join(sanitize(&model));
        std::fs::create_dir_all(&model_dir)?;

        let mut templates = self.templates.clone();
        for dir in &config.template_dirs {
            templates
                .load_dir(Path::new(dir))
                .map_err(|e| RunError::InvalidConfig(e.to_string()))?;
        }

        let mut state = DispatchState {
            remaining_budget: control.dispatch_budget,
            dispatched: 0,
            cancel: Arc::clone(&control.cancel),
        };
        let mut tasks = Vec::new();
        let mut skipped = Vec::new();
        for task_path in &config.tasks {
            let prepared = match self.prepare_task(Path::new(task_path), config, &model, &templates)
            {
                Ok(p) => p,
                Err(error) => {
                    tracing::warn!(task = %task_path, %error, "skipping task");
                    skipped.push(SkippedTask {
                        task: task_path.clone(),
                        error,
                    });
                    continue;
                }
            };
            let task_dir = model_dir.join(sanitize(&prepared.spec.name));
            std::fs::create_dir_all(&task_dir)?;
            let responses = self
                .dispatch_task(
                    &client,
                    &prepared,
                    config,
                    &task_dir,
                    reuse_cache,
                    &mut state,
                )
                .await?;
            let ctx = ScoringContext {
                spec: &prepared.spec,
                metrics: &prepared.metrics,
                chain: &prepared.chain,
                judge: judge_client.as_ref(),
                config,
            };
            let records = score_task(&ctx, &prepared.instances, &responses).await;
            record::write_records(&task_dir.join(RECORDS_FILE), &records)?;
            let report = task_report(&prepared, &records);
            std::fs::write(
                task_dir.join(REPORT_FILE),
                serde_json::to_string_pretty(&report).map_err(std::io::Error::from)?,
            )?;
            tracing::info!(task = %report.task, metrics = ?report.metrics, "task done");
            tasks.push(report);
        }

        let report = RunReport {
            model,
            tasks,
            skipped,
            config: config.clone(),
            wall_time_ms: started.elapsed().as_secs_f64() * 1000.0,
            tokenizer: "whitespace".into(),
            f1_pooling: "corpus".into(),
        };
        std::fs::write(
            model_dir.join(REPORT_FILE),
            serde_json::to_string_pretty(&report).map_err(std::io::Error::from)?,
        )?;
        Ok(report)
    }

    fn prepare_task(
        &self,
        path: &Path,
        config: &RunConfig,
        model: &str,
        templates: &TemplateStore,
    ) -> Result<PreparedTask, String> {
        let spec = TaskSpec::load(path)?;
        let metrics = spec
            .metrics
            .iter()
            .map(|m| MetricKind::parse(m))
            .collect::<Result<Vec<_>, _>>()?;
        let chain = self
            .rules
            .build_chain(&spec.postproc_chain, &spec.name, model)
            .map_err(|e| e.to_string())?;
        let template = templates
            .get(&spec.template_id)
            .map_err(|e| e.to_string())?;

        let items: Vec<DocItem> =
            load_dataset_as(&self.schemas, &spec.data_path, &spec.schema_id, &spec.name)
                .map_err(|e| format!("{}: {e}", spec.data_path))?
                .collect::<Result<_, _>>()
                .map_err(|e| format!("{}: {e}", spec.data_path))?;
        if items.is_empty() {
            return Err(format!("{}: dataset is empty", spec.data_path));
        }
        let (pool, mut eval_set) = if spec.fewshot_pool_size > 0 {
            split_fewshot_pool(items, spec.fewshot_pool_size, config.seed)
                .map_err(|e| e.to_string())?
        } else {
            (Vec::new(), items)
        };
        if let Some(limit) = config.limit {
            eval_set.truncate(limit);
        }
        if spec.eval_mode == EvalMode::Loglikelihood {
            if let Some(bad) = eval_set.iter().find(|i| i.target_scores.is_empty()) {
                return Err(format!(
                    "loglikelihood task {} needs choices, instance {} has none",
                    spec.name, bad.id
                ));
            }
        }

        let opts = PromptOptions {
            fewshot_k: spec.fewshot_k,
            seed: config.seed,
            cot: spec.cot && spec.eval_mode == EvalMode::Generation,
            mode: spec.eval_mode,
        };
        let mut instances = Vec::with_capacity(eval_set.len());
        for item in eval_set {
            let rendered =
                render_prompt(&item, &pool, &opts, template).map_err(|e| e.to_string())?;
            let requests: Vec<GenerationRequest> = match spec.eval_mode {
                EvalMode::Loglikelihood => vec![GenerationRequest::loglikelihood(
                    &item.id,
                    &rendered.text,
                    continuations(&item, template),
                    config.params.clone(),
                )],
                EvalMode::Generation if spec.samples == 1 => vec![GenerationRequest::generation(
                    &item.id,
                    &rendered.text,
                    config.params.clone(),
                )],
                EvalMode::Generation => (0..spec.samples)
                    .map(|j| {
                        GenerationRequest::generation(
                            format!("{}#{j}", item.id),
                            &rendered.text,
                            record::sample_params(&config.params, config.seed, j),
                        )
                    })
                    .collect(),
            };
            instances.push(Instance {
                requests: requests
                    .into_iter()
                    .map(|r| {
                        let key = record::cache_key(&spec.name, &r);
                        (r, key)
                    })
                    .collect(),
                prompt_text: rendered.text,
                item,
            });
        }
        Ok(PreparedTask {
            spec,
            metrics,
            chain,
            instances,
        })
    }

    /// Returns one response per request id, from cache or the backend.
    async fn dispatch_task(
        &self,
        client: &GatewayClient,
        task: &PreparedTask,
        config: &RunConfig,
        task_dir: &Path,
        reuse_cache: bool,
        state: &mut DispatchState,
    ) -> Result<HashMap<String, GenerationResponse>, RunError> {
        let cache_path = task_dir.join(RESPONSES_FILE);
        let mut cached = if reuse_cache {
            record::read_cache(&cache_path)?
        } else {
            BTreeMap::new()
        };
        let mut writer = record::CacheWriter::open(&cache_path, !reuse_cache)?;

        let mut responses = HashMap::new();
        let mut pending = Vec::new();
        let mut keys = HashMap::new();
        for (req, key) in task.instances.iter().flat_map(|i| &i.requests) {
            match cached.remove(key) {
                Some(entry) => {
                    responses.insert(req.instance_id.clone(), entry.into_response());
                }
                None => {
                    keys.insert(req.instance_id.clone(), key.clone());
                    pending.push(req.clone());
                }
            }
        }
        tracing::info!(task = %task.spec.name, cached = responses.len(), pending = pending.len(), "dispatching");

        let total_pending = pending.len();
        let allowed = state
            .remaining_budget
            .map_or(total_pending, |b| b.min(total_pending));
        let cancel = Arc::clone(&state.cancel);
        let reqs = stream::iter(pending.into_iter().take(allowed))
            .take_while(move |_| futures::future::ready(!cancel.load(Ordering::SeqCst)));
        let mut stream =
            Box::pin(client.dispatch_batch(reqs, config.concurrency, config.retry.clone()));
        let mut received = 0usize;
        while let Some(resp) = stream.next().await {
            let key = keys.get(&resp.instance_id).cloned().unwrap_or_default();
            writer.append(&record::CacheEntry::new(key, resp.clone()))?;
            responses.insert(resp.instance_id.clone(), resp);
            received += 1;
        }
        state.dispatched += received;
        if let Some(b) = state.remaining_budget.as_mut() {
            *b -= received.min(*b);
        }
        if received < total_pending {
            return Err(RunError::Interrupted {
                dispatched: state.dispatched,
                output_dir: config.output_dir.clone(),
            });
        }
        Ok(responses)
    }
}

/// The gold letter for multiple-choice items, else the free-form answer.
fn gold_text(item: &DocItem) -> String {
    item.gold_letter()
        .map(String::from)
        .unwrap_or_else(|| item.answer.clone())
}

async fn score_task(
    ctx: &ScoringContext<'_>,
    instances: &[Instance],
    responses: &HashMap<String, GenerationResponse>,
) -> Vec<EvalRecord> {
    stream::iter(instances)
        .map(|inst| score_instance(ctx, inst, responses))
        .buffered(ctx.config.concurrency.max(1))
        .collect()
        .await
}

async fn score_instance(
    ctx: &ScoringContext<'_>,
    inst: &Instance,
    responses: &HashMap<String, GenerationResponse>,
) -> EvalRecord {
    let item = &inst.item;
    let resps: Vec<&GenerationResponse> = inst
        .requests
        .iter()
        .filter_map(|(r, _)| responses.get(&r.instance_id))
        .collect();
    let gold = gold_text(item);
    let mut record = EvalRecord {
        task: ctx.spec.name.clone(),
        instance_id: item.id.clone(),
        prompt_text: inst.prompt_text.clone(),
        gold: gold.clone(),
        raw_output: RawOutput::Failed,
        processed_output: Vec::new(),
        scores: BTreeMap::new(),
        label: None,
        error: None,
        metric_errors: BTreeMap::new(),
        attempts: resps.iter().map(|r| r.attempts).sum(),
        latency_ms: resps.iter().map(|r| r.latency_ms).sum(),
    };
    let norm = &ctx.spec.normalization;
    let positive = normalize(&ctx.spec.positive_label, norm);
    let gold_positive = normalize(&gold, norm) == positive;

    let failure = if resps.len() < inst.requests.len() {
        Some("response missing".to_string())
    } else {
        resps.iter().find(|r| r.is_error()).map(|r| {
            r.error
                .clone()
                .unwrap_or_else(|| "backend reported an error".into())
        })
    };
    if let Some(err) = failure {
        record.error = Some(err);
        for m in ctx.metrics {
            record.scores.insert(m.to_string(), 0.0);
        }
        if ctx.metrics.contains(&MetricKind::F1) {
            record.label = Some(BinaryLabel {
                pred: false,
                gold: gold_positive,
            });
        }
        return record;
    }

    match ctx.spec.eval_mode {
        EvalMode::Loglikelihood => {
            let resp = resps[0];
            let sums = resp.logprob_sums.clone().unwrap_or_default();
            let counts = resp.token_counts.clone().unwrap_or_default();
            for m in ctx.metrics {
                let normalize_len = *m == MetricKind::AccuracyNorm;
                let score = match mc_accuracy(&sums, &counts, &item.target_scores, normalize_len) {
                    Ok(s) => f64::from(s),
                    Err(e) => {
                        record.metric_errors.insert(m.to_string(), e.to_string());
                        0.0
                    }
                };
                record.scores.insert(m.to_string(), score);
            }
            record.raw_output = RawOutput::Loglikelihood {
                logprob_sums: sums,
                token_counts: counts,
            };
        }
        EvalMode::Generation => {
            let texts: Vec<String> = resps
                .iter()
                .map(|r| r.text.clone().unwrap_or_default())
                .collect();
            let rule_ctx = RuleContext {
                entry_point: item.metadata.get("entry_point").cloned(),
                num_choices: (!item.target_scores.is_empty()).then(|| item.target_scores.len()),
            };
            let processed: Vec<String> = texts
                .iter()
                .map(|t| ctx.chain.apply(t, &rule_ctx))
                .collect();
            let first = processed.first().cloned().unwrap_or_default();
            let mut passes: Option<Result<u64, String>> = None;
            for m in ctx.metrics {
                let score = match m {
                    MetricKind::ExactMatch | MetricKind::Accuracy => {
                        f64::from(exact_match(&first, &gold, norm))
                    }
                    MetricKind::InMatch => f64::from(in_match(&first, &gold, norm)),
                    MetricKind::PrefixMatch => f64::from(prefix_match(&first, &gold, norm)),
                    MetricKind::F1 => {
                        let label = BinaryLabel {
                            pred: normalize(&first, norm) == positive,
                            gold: gold_positive,
                        };
                        record.label = Some(label);
                        let mut counts = BinaryCounts::default();
                        counts.add(label.pred, label.gold);
                        counts.prf().f1
                    }
                    MetricKind::Rouge(n) => {
                        rouge_n(&normalize(&first, norm), &normalize(&gold, norm), *n).f1
                    }
                    MetricKind::RougeL => {
                        rouge_l(&normalize(&first, norm), &normalize(&gold, norm)).f1
                    }
                    MetricKind::PassAtK(k) => {
                        if passes.is_none() {
                            passes = Some(run_sandbox(ctx, item, &processed).await);
                        }
                        match passes.as_ref().expect("filled above") {
                            Ok(c) => pass_at_k(PassAtKInput {
                                n: processed.len() as u64,
                                c: *c,
                                k: u64::from(*k),
                            })
                            .unwrap_or(0.0),
                            Err(e) => {
                                record.metric_errors.insert(m.to_string(), e.clone());
                                0.0
                            }
                        }
                    }
                    MetricKind::Judge => match ctx.judge {
                        Some(client) => {
                            let rubric = ctx.spec.judge_rubric.as_deref().unwrap_or(DEFAULT_RUBRIC);
                            let judge_id = format!("judge:{}", item.id);
                            match judge(client, &judge_id, &first, &gold, rubric, &ctx.config.retry)
                                .await
                            {
                                Ok(j) => j.verdict.as_score(),
                                Err(e) => {
                                    record.metric_errors.insert(m.to_string(), e.to_string());
                                    0.0
                                }
                            }
                        }
                        None => {
                            record
                                .metric_errors
                                .insert(m.to_string(), "no judge_endpoint configured".into());
                            0.0
                        }
                    },
                    MetricKind::AccuracyNorm => unreachable!("rejected for generation tasks"),
                };
                record.scores.insert(m.to_string(), score);
            }
            record.raw_output = RawOutput::Generation { texts };
            record.processed_output = processed;
        }
    }
    record
}

async fn run_sandbox(
    ctx: &ScoringContext<'_>,
    item: &DocItem,
    candidates: &[String],
) -> Result<u64, String> {
    if ctx.config.sandbox_command.is_empty() {
        return Err("no sandbox_command configured".into());
    }
    let tests = item
        .metadata
        .get("test")
        .ok_or_else(|| format!("instance {} has no `test` metadata", item.id))?;
    let entry_point = item
        .metadata
        .get("entry_point")
        .cloned()
        .unwrap_or_default();
    let mut results = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let candidate = if ctx.spec.prepend_question_to_candidate {
            format!("{}{}", item.question, candidate)
        } else {
            candidate.clone()
        };
        let req = SandboxRequest {
            candidate,
            tests: tests.clone(),
            entry_point: entry_point.clone(),
            timeout_s: ctx.spec.sandbox_timeout_s,
        };
        results.push(
            sandbox::execute(&ctx.config.sandbox_command, &req)
                .await
                .map_err(|e| e.to_string())?,
        );
    }
    Ok(count_passes(&results) as u64)
}

fn task_report(task: &PreparedTask, records: &[EvalRecord]) -> TaskReport {
    let metrics = task
        .spec
        .metrics
        .iter()
        .map(|m| (m.clone(), aggregate(records, m).unwrap_or(0.0)))
        .collect();
    TaskReport {
        task: task.spec.name.clone(),
        capability: task.spec.capability.clone(),
        instances: records.len(),
        failed: records.iter().filter(|r| r.error.is_some()).count(),
        metrics,
    }
}
