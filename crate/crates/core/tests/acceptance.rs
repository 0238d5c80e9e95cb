//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run with `cargo test -p evalkit-core --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::future::Future;
use std::time::{Duration, Instant};

use evalkit::corpus::DocItem;
use evalkit::gateway::{GatewayClient, GenerationParams, GenerationRequest, RetryPolicy};
use evalkit::metrics::{pass_at_k, rouge_l_tokens, PassAtKInput};
use evalkit::mockserver::{serve, Fault, MockScript};
use evalkit::postproc::strip_after_docstring_tests;
use evalkit::prompting::{render_mc, PromptTemplate};
use evalkit::runner::{
    read_records, RunControl, RunError, RunReport, Runner, ScoreGrid, TaskReport, RECORDS_FILE,
};
use futures::StreamExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// pass@k against exhaustive enumeration of k-subsets of n samples.

fn pass_at_k_oracle() -> Outcome {
    let started = Instant::now();
    let mut cases = 0;
    for n in 1..=12u32 {
        for c in 0..=n {
            // samples 0..c pass
            let passing: u32 = (1u32 << c) - 1;
            for k in 1..=n {
                let (mut total, mut hit) = (0u64, 0u64);
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() == k {
                        total += 1;
                        if mask & passing != 0 {
                            hit += 1;
                        }
                    }
                }
                let want = hit as f64 / total as f64;
                let got = pass_at_k(PassAtKInput {
                    n: n.into(),
                    c: c.into(),
                    k: k.into(),
                })
                .map_err(|e| e.to_string())?;
                ensure((got - want).abs() <= 1e-12, || {
                    format!("n={n} c={c} k={k}: got {got}, exhaustive {want}")
                })?;
                cases += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("{cases} (n, c, k) triples in {elapsed:.2?}"))
}

// ROUGE-L against a full-table LCS.

fn lcs_table(a: &[u8], b: &[u8]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn rouge_l_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..500 {
        let pred: Vec<u8> = (0..rng.gen_range(0..=40))
            .map(|_| rng.gen_range(0..5))
            .collect();
        let gold: Vec<u8> = (0..rng.gen_range(0..=40))
            .map(|_| rng.gen_range(0..5))
            .collect();
        let l = lcs_table(&pred, &gold) as f64;
        let p = if pred.is_empty() {
            0.0
        } else {
            l / pred.len() as f64
        };
        let r = if gold.is_empty() {
            0.0
        } else {
            l / gold.len() as f64
        };
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        let got = rouge_l_tokens(&pred, &gold);
        ensure(got.precision == p && got.recall == r && got.f1 == f, || {
            format!("case {case}: got {got:?}, oracle p={p} r={r} f={f}")
        })?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("500 pairs in {elapsed:.2?}"))
}

// Multiple-choice prompt against the fixture rendered by the reference template.

fn prompt_golden() -> Outcome {
    let item: DocItem =
        serde_json::from_str(&std::fs::read_to_string(common::fixture("mc_item.json")).unwrap())
            .map_err(|e| e.to_string())?;
    let want = std::fs::read_to_string(common::fixture("mc_prompt.txt")).unwrap();
    let got = render_mc(&item, &PromptTemplate::default()).map_err(|e| e.to_string())?;
    ensure(got == want, || {
        format!("rendered {got:?}, fixture {want:?}")
    })?;
    let required = "Requirement:\nChoose and respond with the letter of the correct answer, including the parentheses.\n";
    ensure(
        got.starts_with("Question:\n") && got.contains(required) && got.ends_with("Answer:\n"),
        || "fixture is missing the required blocks".into(),
    )?;
    Ok(format!("{} bytes identical", got.len()))
}

// Docstring-test stripping against a literal char-index transcription.

fn is_py_space(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

fn py_strip(chars: &[char]) -> String {
    let start = chars
        .iter()
        .position(|c| !is_py_space(*c))
        .unwrap_or(chars.len());
    let end = chars
        .iter()
        .rposition(|c| !is_py_space(*c))
        .map_or(start, |e| e + 1);
    chars[start..end.max(start)].iter().collect()
}

fn process_text_transcribed(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let quote = ['"', '"', '"'];
    let idx: Vec<usize> = (0..chars.len())
        .filter(|&i| chars[i..].starts_with(&quote))
        .collect();
    let contains_def = |from: usize| chars[from..].windows(3).any(|w| w == ['d', 'e', 'f']);
    if idx.len().is_multiple_of(2) {
        let mut i = 0;
        while i < idx.len() {
            if contains_def(idx[i + 1]) {
                return py_strip(&chars[..idx[i]]);
            }
            i += 2;
        }
        py_strip(&chars)
    } else {
        py_strip(&chars[..idx[0]])
    }
}

fn docstring_conformance() -> Outcome {
    let frags = [
        "def f(x):\n",
        "\"\"\"",
        "\"\"\"\"",
        "Doc.",
        "\n",
        "    ",
        "return x\n",
        "assert f(1) == 1\n",
        " ",
        "def",
        "\t",
        "\u{a0}",
        "\u{1c}",
        "é",
        "ΔΣ",
        "undefined",
        "'''",
        "\"",
        ">>> f(2)\n",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..200 {
        let text: String = (0..rng.gen_range(0..=14))
            .map(|_| frags[rng.gen_range(0..frags.len())])
            .collect();
        let (got, want) = (
            strip_after_docstring_tests(&text),
            process_text_transcribed(&text),
        );
        ensure(got == want, || {
            format!("synthetic case {case} {text:?}: got {got:?}, want {want:?}")
        })?;
    }
    // Outputs recorded from the reference Python function.
    let recorded = std::fs::read_to_string(common::fixture("docstring_cases.jsonl")).unwrap();
    let mut n = 0;
    for line in recorded.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let (input, want) = (
            v["input"].as_str().unwrap(),
            v["expected"].as_str().unwrap(),
        );
        let got = strip_after_docstring_tests(input);
        ensure(got == want, || {
            format!("recorded case {n} {input:?}: got {got:?}, want {want:?}")
        })?;
        n += 1;
    }
    Ok(format!("200 synthetic + {n} recorded cases agree"))
}

// End-to-end golden run and rerun determinism.

async fn golden_run() -> Outcome {
    let mock = serve(common::golden_script(), 0)
        .await
        .map_err(|e| e.to_string())?;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let task = common::golden_task();
    let first = Runner::default()
        .run(&common::config(
            &mock.endpoint(),
            std::slice::from_ref(&task),
            a.path(),
        ))
        .await
        .map_err(|e| e.to_string())?;
    let accuracy = first.score("mc_mini", "accuracy");
    ensure(accuracy == Some(0.65), || format!("accuracy {accuracy:?}"))?;
    let second = Runner::default()
        .run(&common::config(&mock.endpoint(), &[task], b.path()))
        .await
        .map_err(|e| e.to_string())?;
    ensure(first.scores() == second.scores(), || {
        "report scores differ".into()
    })?;
    let (ra, rb) = (
        common::canonical_records(a.path(), &first.model, "mc_mini"),
        common::canonical_records(b.path(), &second.model, "mc_mini"),
    );
    ensure(ra == rb, || "records differ between runs".into())?;
    ensure(ra.lines().count() == 20, || {
        format!("{} records", ra.lines().count())
    })?;
    Ok("accuracy 0.65, rerun records identical modulo latency".into())
}

// Dispatch throughput against a mock with fixed service time.

async fn timed_batch(
    client: &GatewayClient,
    concurrency: usize,
    tag: &str,
) -> Result<Duration, String> {
    let reqs: Vec<GenerationRequest> = (0..200)
        .map(|i| {
            GenerationRequest::generation(format!("{tag}{i}"), "ping", GenerationParams::default())
        })
        .collect();
    let started = Instant::now();
    let responses: Vec<_> = client
        .dispatch_batch(
            futures::stream::iter(reqs),
            concurrency,
            RetryPolicy::default(),
        )
        .collect()
        .await;
    let elapsed = started.elapsed();
    let failed = responses.iter().filter(|r| r.is_error()).count();
    ensure(responses.len() == 200 && failed == 0, || {
        format!("{failed} failed of {}", responses.len())
    })?;
    Ok(elapsed)
}

async fn concurrency_efficiency() -> Outcome {
    let script = MockScript {
        service_time_ms: 10.0,
        workers: 32,
        ..MockScript::echo()
    };
    let mock = serve(script, 0).await.map_err(|e| e.to_string())?;
    let client = GatewayClient::new(&mock.endpoint());
    ensure(client.probe_health().await.ready, || {
        "mock not ready".into()
    })?;
    // warm the connection pool
    timed_batch(&client, 32, "warm").await?;
    let parallel = timed_batch(&client, 32, "par").await?;
    let serial = timed_batch(&client, 1, "ser").await?;
    let speedup = serial.as_secs_f64() / parallel.as_secs_f64();
    ensure(parallel <= Duration::from_millis(250), || {
        format!("concurrency 32 took {parallel:?}")
    })?;
    ensure(serial >= Duration::from_secs(2), || {
        format!("serial took only {serial:?}")
    })?;
    ensure(speedup >= 8.0, || format!("speedup {speedup:.1}x"))?;
    Ok(format!(
        "parallel {parallel:.0?}, serial {serial:.2?}, speedup {speedup:.1}x"
    ))
}

// Retryable faults on 20% of instances.

async fn fault_tolerance() -> Outcome {
    let mut script = common::golden_script();
    let faulty: Vec<String> = [2, 7, 11, 16]
        .iter()
        .map(|i| format!("mc_mini:{i:06}"))
        .collect();
    script.faults = faulty
        .iter()
        .map(|id| Fault {
            instance_id: id.clone(),
            attempt: 1,
            status: 503,
        })
        .collect();
    let mock = serve(script, 0).await.map_err(|e| e.to_string())?;
    let out = tempfile::tempdir().unwrap();
    let report = Runner::default()
        .run(&common::config(
            &mock.endpoint(),
            &[common::golden_task()],
            out.path(),
        ))
        .await
        .map_err(|e| e.to_string())?;
    let records = read_records(
        &out.path()
            .join(&report.model)
            .join("mc_mini")
            .join(RECORDS_FILE),
    )
    .map_err(|e| e.to_string())?;
    let mut seen = BTreeMap::new();
    for r in &records {
        *seen.entry(r.instance_id.clone()).or_insert(0) += 1;
        ensure(r.error.is_none(), || {
            format!("{} failed: {:?}", r.instance_id, r.error)
        })?;
        let want = if faulty.contains(&r.instance_id) {
            2
        } else {
            1
        };
        ensure(r.attempts == want, || {
            format!("{} recorded {} attempts", r.instance_id, r.attempts)
        })?;
    }
    ensure(seen.len() == 20 && seen.values().all(|n| *n == 1), || {
        "instances not scored exactly once".into()
    })?;
    let stats = mock.stats();
    for (id, n) in &stats.attempts {
        let want = if faulty.contains(id) { 2 } else { 1 };
        ensure(*n == want, || format!("mock saw {n} attempts for {id}"))?;
    }
    ensure(stats.attempts.len() == 20, || {
        format!("mock saw {} ids", stats.attempts.len())
    })?;
    ensure(report.score("mc_mini", "accuracy") == Some(0.65), || {
        "accuracy changed under faults".into()
    })?;
    Ok(format!(
        "4/20 faulted once, {} total attempts",
        stats.total_requests()
    ))
}

// Interrupt after 10 of 20, then resume.

async fn resume_soundness() -> Outcome {
    let mock = serve(common::golden_script(), 0)
        .await
        .map_err(|e| e.to_string())?;
    let (fresh, partial) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let task = common::golden_task();
    let reference = Runner::default()
        .run(&common::config(
            &mock.endpoint(),
            std::slice::from_ref(&task),
            fresh.path(),
        ))
        .await
        .map_err(|e| e.to_string())?;
    let before = mock.stats().total_requests();

    let control = RunControl {
        dispatch_budget: Some(10),
        ..RunControl::default()
    };
    let cfg = common::config(&mock.endpoint(), &[task], partial.path());
    match Runner::default().run_with(&cfg, &control).await {
        Err(RunError::Interrupted { dispatched: 10, .. }) => {}
        other => return Err(format!("expected interruption after 10, got {other:?}")),
    }
    let after_interrupt = mock.stats().total_requests();
    let resumed = Runner::default()
        .resume(partial.path(), None)
        .await
        .map_err(|e| e.to_string())?;
    let after_resume = mock.stats().total_requests();
    let new_requests = after_resume - after_interrupt;
    ensure(after_interrupt - before == 10, || {
        format!("{} dispatched before interrupt", after_interrupt - before)
    })?;
    ensure(new_requests == 10, || {
        format!("resume dispatched {new_requests}")
    })?;
    ensure(resumed.scores() == reference.scores(), || {
        "resumed report differs".into()
    })?;
    let (a, b) = (
        common::canonical_records(fresh.path(), &reference.model, "mc_mini"),
        common::canonical_records(partial.path(), &resumed.model, "mc_mini"),
    );
    ensure(a == b, || {
        "resumed records differ from the uninterrupted run".into()
    })?;
    Ok("10 + 10 requests, report equal to uninterrupted run".into())
}

// The report format can hold a model x benchmark grid of published scores.

const PUBLISHED: &[(&str, [f64; 6])] = &[
    ("ARC-C", [45.9, 43.2, 45.9, 47.4, 55.5, 50.8]),
    ("HellaSwag", [77.2, 75.6, 80.7, 79.1, 81.3, 80.4]),
    ("BBH", [32.6, 32.8, 39.4, 39.2, 38.0, 40.4]),
    ("MATH", [2.5, 2.8, 3.9, 4.8, 13.1, 10.2]),
    ("GSM8K", [14.6, 14.8, 28.7, 22.6, 52.1, 31.9]),
    ("HumanEval", [12.8, 12.8, 18.3, 17.1, 30.5, 26.8]),
    ("MBPP", [20.8, 20.8, 30.6, 29.0, 47.5, 47.3]),
    ("MMLU", [45.3, 45.1, 54.8, 55.2, 60.1, 63.1]),
];

fn score_grid_schema() -> Outcome {
    let columns = [
        "Llama2-7B official",
        "Llama2-7B reproduced",
        "Llama2-13B official",
        "Llama2-13B reproduced",
        "Mistral-7B official",
        "Mistral-7B reproduced",
    ];
    let template: serde_json::Value = serde_json::json!({
        "model": "", "tasks": [], "config": {"tasks": [], "output_dir": "out"},
        "wall_time_ms": 0.0, "tokenizer": "whitespace", "f1_pooling": "corpus"
    });
    let mut reports = Vec::new();
    for (col, model) in columns.iter().enumerate() {
        let mut report: RunReport =
            serde_json::from_value(template.clone()).map_err(|e| e.to_string())?;
        report.model = model.to_string();
        report.tasks = PUBLISHED
            .iter()
            .map(|(bench, row)| TaskReport {
                task: bench.to_string(),
                capability: String::new(),
                instances: 0,
                failed: 0,
                metrics: [("score".to_string(), row[col] / 100.0)]
                    .into_iter()
                    .collect(),
            })
            .collect();
        let json = serde_json::to_string(&report).map_err(|e| e.to_string())?;
        let back: RunReport = serde_json::from_str(&json).map_err(|e| e.to_string())?;
        ensure(back == report, || {
            format!("{model} report does not round-trip")
        })?;
        reports.push(back);
    }
    let grid = ScoreGrid::from_reports(&reports);
    ensure(grid.rows.len() == 8 && grid.columns.len() == 6, || {
        format!("grid is {}x{}", grid.rows.len(), grid.columns.len())
    })?;
    ensure(
        grid.get("MMLU/score", "Llama2-7B reproduced") == Some(0.451),
        || "MMLU cell".into(),
    )?;
    let md = grid.to_markdown();
    for (bench, row) in PUBLISHED {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.1}")).collect();
        let line = format!("| {bench}/score | {} |", cells.join(" | "));
        ensure(md.contains(&line), || format!("markdown lacks {line:?}"))?;
    }
    let back: ScoreGrid =
        serde_json::from_str(&serde_json::to_string(&grid).unwrap()).map_err(|e| e.to_string())?;
    ensure(back == grid, || "grid does not round-trip".into())?;
    Ok("8 benchmarks x 6 model columns, e.g. Llama2-7B MMLU 45.1".into())
}

fn check<F: FnOnce() -> Outcome>(failures: &mut usize, name: &str, f: F) {
    match f() {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(why) => {
            *failures += 1;
            println!("FAIL  {name}: {why}");
        }
    }
}

fn check_async<Fut: Future<Output = Outcome>>(
    rt: &tokio::runtime::Runtime,
    failures: &mut usize,
    name: &str,
    fut: Fut,
) {
    check(failures, name, || rt.block_on(fut));
}

fn main() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let mut failures = 0;
    check(
        &mut failures,
        "pass@k matches exhaustive subset enumeration",
        pass_at_k_oracle,
    );
    check(
        &mut failures,
        "ROUGE-L matches full-table LCS",
        rouge_l_oracle,
    );
    check(
        &mut failures,
        "multiple-choice prompt is byte-exact",
        prompt_golden,
    );
    check(
        &mut failures,
        "docstring-test stripping matches reference",
        docstring_conformance,
    );
    check_async(
        &rt,
        &mut failures,
        "golden run accuracy and determinism",
        golden_run(),
    );
    check_async(
        &rt,
        &mut failures,
        "concurrent dispatch throughput",
        concurrency_efficiency(),
    );
    check_async(
        &rt,
        &mut failures,
        "retryable faults are absorbed",
        fault_tolerance(),
    );
    check_async(
        &rt,
        &mut failures,
        "resume dispatches only missing work",
        resume_soundness(),
    );
    check(
        &mut failures,
        "report grid holds published score table",
        score_grid_schema,
    );
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
