use evalkit::gateway::{
    FinishReason, GatewayClient, GatewayError, GenerationParams, GenerationRequest, RetryPolicy,
};
use evalkit::mockserver::{serve, Fault, MockError, MockScript};
use futures::StreamExt;

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        backoff_base_ms: 1.0,
        backoff_cap_ms: 5.0,
        ..RetryPolicy::default()
    }
}

fn gen(id: &str, prompt: &str) -> GenerationRequest {
    GenerationRequest::generation(id, prompt, GenerationParams::default())
}

#[tokio::test]
async fn echo_returns_prompt() {
    let mock = serve(MockScript::echo(), 0).await.unwrap();
    let resp = GatewayClient::new(&mock.endpoint())
        .generate(&gen("q1", "2+2="))
        .await
        .unwrap();
    assert_eq!(resp.instance_id, "q1");
    assert_eq!(resp.text.as_deref(), Some("2+2="));
    assert_eq!(resp.finish_reason, FinishReason::Stop);
    assert_eq!(resp.attempts, 1);
}

#[tokio::test]
async fn scripted_answer_and_stop_sequence() {
    let mock = serve(MockScript::scripted([("q7", "(B)")]), 0)
        .await
        .unwrap();
    let client = GatewayClient::new(&mock.endpoint());
    let resp = client.generate(&gen("q7", "whatever")).await.unwrap();
    assert_eq!(resp.text.as_deref(), Some("(B)"));
    let resp = client.generate(&gen("q8", "whatever")).await.unwrap();
    assert_eq!(resp.text.as_deref(), Some(evalkit::mockserver::UNSCRIPTED));

    let echo = serve(MockScript::echo(), 0).await.unwrap();
    let mut req = gen("q9", "first line\nsecond line");
    req.params.stop = vec!["\n".into()];
    let resp = GatewayClient::new(&echo.endpoint())
        .generate(&req)
        .await
        .unwrap();
    assert_eq!(resp.text.as_deref(), Some("first line"));
}

#[tokio::test]
async fn max_new_tokens_truncates() {
    let mock = serve(MockScript::echo(), 0).await.unwrap();
    let mut req = gen("q", "one two three four five");
    req.params.max_new_tokens = 2;
    let resp = GatewayClient::new(&mock.endpoint())
        .generate(&req)
        .await
        .unwrap();
    assert_eq!(resp.finish_reason, FinishReason::Length);
    assert_eq!(resp.text.as_deref(), Some("one two"));
}

#[tokio::test]
async fn loglikelihood_shape() {
    let mock = serve(MockScript::scripted([("q", "(B)")]), 0)
        .await
        .unwrap();
    let req = GenerationRequest::loglikelihood(
        "q",
        "Answer:\n",
        vec![" (A)".into(), " (B)".into(), " (C) long".into()],
        GenerationParams::default(),
    );
    let resp = GatewayClient::new(&mock.endpoint())
        .generate(&req)
        .await
        .unwrap();
    let sums = resp.logprob_sums.unwrap();
    let counts = resp.token_counts.unwrap();
    assert_eq!(sums.len(), 3);
    assert_eq!(counts, vec![1, 1, 2]);
    assert!(resp.text.is_none());
    let best = sums
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert_eq!(best, 1);
}

#[tokio::test]
async fn retries_transient_failures() {
    let mut script = MockScript::scripted([("q", "ok")]);
    script.faults = vec![
        Fault {
            instance_id: "q".into(),
            attempt: 1,
            status: 503,
        },
        Fault {
            instance_id: "q".into(),
            attempt: 2,
            status: 502,
        },
    ];
    let mock = serve(script, 0).await.unwrap();
    let resp = GatewayClient::new(&mock.endpoint())
        .generate_with_retry(&gen("q", "p"), &fast_retry())
        .await;
    assert!(!resp.is_error(), "{:?}", resp.error);
    assert_eq!(resp.text.as_deref(), Some("ok"));
    assert_eq!(resp.attempts, 3);
    assert_eq!(mock.stats().attempts["q"], 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let mut script = MockScript::echo();
    script.faults = vec![Fault {
        instance_id: "bad".into(),
        attempt: 1,
        status: 400,
    }];
    let mock = serve(script, 0).await.unwrap();
    let client = GatewayClient::new(&mock.endpoint());
    let resp = client
        .generate_with_retry(&gen("bad", "p"), &fast_retry())
        .await;
    assert!(resp.is_error());
    assert_eq!(resp.finish_reason, FinishReason::Error);
    assert_eq!(resp.attempts, 1);
    assert_eq!(mock.stats().attempts["bad"], 1);

    let mut single = MockScript::echo();
    single.faults = vec![Fault {
        instance_id: "x".into(),
        attempt: 1,
        status: 500,
    }];
    let mock = serve(single, 0).await.unwrap();
    let err = GatewayClient::new(&mock.endpoint())
        .generate(&gen("x", "p"))
        .await;
    assert!(matches!(
        err,
        Err(GatewayError::Backend { status: 500, .. })
    ));
}

#[tokio::test]
async fn exhausted_retries_yield_failed_response() {
    let mut script = MockScript::echo();
    script.faults = (1..=3)
        .map(|attempt| Fault {
            instance_id: "q".into(),
            attempt,
            status: 503,
        })
        .collect();
    let mock = serve(script, 0).await.unwrap();
    let resp = GatewayClient::new(&mock.endpoint())
        .generate_with_retry(&gen("q", "p"), &fast_retry())
        .await;
    assert!(resp.is_error());
    assert_eq!(resp.attempts, 3);
}

#[tokio::test]
async fn health_probe() {
    let mock = serve(MockScript::echo(), 0).await.unwrap();
    let health = GatewayClient::new(&mock.endpoint()).probe_health().await;
    assert!(health.ready);
    assert_eq!(health.model_name, "mock-echo");

    let endpoint = mock.endpoint();
    mock.stop().await;
    let health = GatewayClient::new(&endpoint).probe_health().await;
    assert!(!health.ready);
}

#[tokio::test]
async fn port_in_use() {
    let mock = serve(MockScript::echo(), 0).await.unwrap();
    let port = mock.addr().port();
    assert!(
        matches!(serve(MockScript::echo(), port).await, Err(MockError::PortInUse(p)) if p == port)
    );
}

async fn max_inflight_at(concurrency: usize) -> (usize, usize) {
    let script = MockScript {
        service_time_ms: 5.0,
        workers: 64,
        ..MockScript::echo()
    };
    let mock = serve(script, 0).await.unwrap();
    let reqs: Vec<_> = (0..64).map(|i| gen(&format!("r{i}"), "p")).collect();
    let out: Vec<_> = GatewayClient::new(&mock.endpoint())
        .dispatch_batch(
            futures::stream::iter(reqs),
            concurrency,
            RetryPolicy::default(),
        )
        .collect()
        .await;
    (out.len(), mock.stats().max_inflight)
}

#[tokio::test]
async fn dispatch_respects_concurrency_bound() {
    for c in [1, 4, 32] {
        let (n, peak) = max_inflight_at(c).await;
        assert_eq!(n, 64);
        assert!(peak <= c, "concurrency {c} reached {peak} in flight");
        assert!(peak >= 1);
    }
}

#[tokio::test]
async fn batch_yields_one_response_per_request() {
    let mock = serve(MockScript::echo(), 0).await.unwrap();
    let reqs: Vec<_> = (0..50)
        .map(|i| gen(&format!("id{i}"), &format!("p{i}")))
        .collect();
    let mut out: Vec<_> =
        evalkit::gateway::dispatch_batch(&mock.endpoint(), reqs, 8, RetryPolicy::default())
            .collect()
            .await;
    out.sort_by_key(|r| r.instance_id[2..].parse::<u32>().unwrap());
    assert_eq!(out.len(), 50);
    for (i, r) in out.iter().enumerate() {
        assert_eq!(r.instance_id, format!("id{i}"));
        assert_eq!(r.text.as_deref(), Some(format!("p{i}").as_str()));
    }
}
