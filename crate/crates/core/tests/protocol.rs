//! Wire-protocol conformance against golden fixtures and a mock backend.

mod common;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use citereward::scorer::{WireRequest, WireResponse};
use citereward::{
    scoring_prompt, HttpScorer, HttpScorerConfig, ScoreError, ScoreRequest, Scorer, SegmentedContext,
};
use common::{MockServer, Reply};
use serde::Deserialize;

#[derive(Deserialize)]
struct RequestCase {
    name: String,
    sentences: Vec<String>,
    retained: Vec<usize>,
    query: String,
    history: String,
    target: String,
    request: serde_json::Value,
    request_bytes: String,
    rendered: String,
    prompt: String,
}

#[derive(Deserialize)]
struct ResponseCase {
    name: String,
    status: u16,
    body: String,
    expect: serde_json::Value,
}

fn request_cases() -> Vec<RequestCase> {
    serde_json::from_str(include_str!("fixtures/protocol/requests.json")).unwrap()
}

fn response_cases() -> Vec<ResponseCase> {
    serde_json::from_str(include_str!("fixtures/protocol/responses.json")).unwrap()
}

/// Server-side rendering, written independently of the library.
fn server_prompt(req: &WireRequest) -> String {
    let rendered: Vec<String> = req
        .sentences
        .iter()
        .map(|s| format!("<C{}>{}", s.id, s.text))
        .collect();
    format!("{}\n\n{}\n\n{}<statement>", rendered.join(" "), req.query, req.history)
}

/// Add-one unigram model over the prompt's whitespace tokens.
fn toy_logprob(prompt: &str, target: &str) -> f64 {
    let ctx: Vec<&str> = prompt.split_whitespace().collect();
    let denom = ctx.len() as f64 + 1000.0;
    target
        .split_whitespace()
        .map(|t| ((ctx.iter().filter(|c| **c == t).count() as f64 + 1.0) / denom).ln())
        .sum()
}

fn toy_server() -> MockServer {
    MockServer::start(|req| {
        if req.method != "POST" || req.path != "/v1/logprob" {
            return Reply::json(404, "{}");
        }
        let Ok(body) = serde_json::from_slice::<WireRequest>(&req.body) else {
            return Reply::json(400, r#"{"error":"schema"}"#);
        };
        if body.target.is_empty() {
            return Reply::json(400, r#"{"error":"empty target"}"#);
        }
        let lp = toy_logprob(&server_prompt(&body), &body.target);
        Reply::json(200, serde_json::to_string(&WireResponse { logprob: lp }).unwrap())
    })
}

fn fast_cfg(url: &str) -> HttpScorerConfig {
    let mut cfg = HttpScorerConfig::new(url);
    cfg.initial_backoff = Duration::from_millis(5);
    cfg.timeout = Duration::from_secs(5);
    cfg
}

#[test]
fn golden_request_bodies() {
    for case in request_cases() {
        let ctx = SegmentedContext::from_texts(&case.sentences).unwrap();
        let retained: BTreeSet<usize> = case.retained.iter().copied().collect();
        let req = ScoreRequest::new(&ctx, retained, &case.query, &case.history, &case.target).unwrap();
        let body = req.wire_body();
        assert_eq!(serde_json::to_value(&body).unwrap(), case.request, "{}", case.name);
        assert_eq!(serde_json::to_string(&body).unwrap(), case.request_bytes, "{}", case.name);
        assert_eq!(req.rendered_context(), case.rendered, "{}", case.name);
        assert_eq!(req.prompt(), case.prompt, "{}", case.name);
    }
}

#[test]
fn rendering_parity_with_server_side_reconstruction() {
    for case in request_cases() {
        let wire: WireRequest = serde_json::from_value(case.request.clone()).unwrap();
        assert_eq!(server_prompt(&wire), case.prompt, "{}", case.name);
        assert_eq!(scoring_prompt(&case.rendered, &case.query, &case.history), case.prompt);
    }
}

#[test]
fn golden_responses_map_to_outcomes() {
    for case in response_cases() {
        let (status, body) = (case.status, case.body.clone());
        let server = MockServer::start(move |_| Reply::json(status, body.clone()));
        let mut cfg = fast_cfg(&server.url);
        cfg.max_retries = 0;
        let scorer = HttpScorer::new(cfg);
        let ctx = SegmentedContext::from_texts(&["a."]).unwrap();
        let req = ScoreRequest::new(&ctx, [0].into(), "q", "", "t").unwrap();
        let got = scorer.score(&req);
        match case.expect.get("logprob").and_then(|v| v.as_f64()) {
            Some(lp) => assert_eq!(got.unwrap().value(), lp, "{}", case.name),
            None => {
                let kind = case.expect["error"].as_str().unwrap();
                let ok = match kind {
                    "invalid_request" => matches!(got, Err(ScoreError::InvalidRequest(_))),
                    "backend_unavailable" => matches!(got, Err(ScoreError::BackendUnavailable(_))),
                    other => panic!("unknown expectation {other}"),
                };
                assert!(ok, "{}: got {got:?}", case.name);
            }
        }
    }
}

#[test]
fn two_sentence_logprob_matches_backend_sum() {
    let server = toy_server();
    let scorer = HttpScorer::new(fast_cfg(&server.url));
    let ctx = SegmentedContext::from_texts(&["The sky is blue.", "Grass is green."]).unwrap();
    for retained in [vec![], vec![0], vec![1], vec![0, 1]] {
        let req = ScoreRequest::new(
            &ctx,
            retained.iter().copied().collect(),
            "What color is the sky?",
            "",
            "The sky is blue.",
        )
        .unwrap();
        let direct = toy_logprob(&req.prompt(), "The sky is blue.");
        let got = scorer.score(&req).unwrap().value();
        assert!((got - direct).abs() <= 1e-4, "{retained:?}: {got} vs {direct}");
    }
}

#[test]
fn scorer_is_pure() {
    let server = toy_server();
    let scorer = HttpScorer::new(fast_cfg(&server.url));
    let ctx = SegmentedContext::from_texts(&["x y.", "y z."]).unwrap();
    let req = ScoreRequest::new(&ctx, [1].into(), "q", "", "y").unwrap();
    assert_eq!(scorer.score(&req).unwrap(), scorer.score(&req).unwrap());
}

#[test]
fn retries_503_then_succeeds() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = MockServer::start(move |_| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            Reply::json(503, "{}")
        } else {
            Reply::json(200, r#"{"logprob": -2.0}"#)
        }
    });
    let scorer = HttpScorer::new(fast_cfg(&server.url));
    let ctx = SegmentedContext::from_texts(&["a."]).unwrap();
    let req = ScoreRequest::new(&ctx, [0].into(), "q", "", "t").unwrap();
    assert_eq!(scorer.score(&req).unwrap().value(), -2.0);
    assert_eq!(server.hits(), 3);
}

#[test]
fn gives_up_after_max_retries() {
    let server = MockServer::start(|_| Reply::json(503, "{}"));
    let mut cfg = fast_cfg(&server.url);
    cfg.max_retries = 2;
    let scorer = HttpScorer::new(cfg);
    let ctx = SegmentedContext::from_texts(&["a."]).unwrap();
    let req = ScoreRequest::new(&ctx, [0].into(), "q", "", "t").unwrap();
    assert!(matches!(scorer.score(&req), Err(ScoreError::BackendUnavailable(_))));
    assert_eq!(server.hits(), 3);
}

#[test]
fn bad_request_is_not_retried() {
    let server = MockServer::start(|_| Reply::json(400, r#"{"error":"bad"}"#));
    let scorer = HttpScorer::new(fast_cfg(&server.url));
    let ctx = SegmentedContext::from_texts(&["a."]).unwrap();
    let req = ScoreRequest::new(&ctx, [0].into(), "q", "", "t").unwrap();
    assert!(matches!(scorer.score(&req), Err(ScoreError::InvalidRequest(_))));
    assert_eq!(server.hits(), 1);
}

#[test]
fn timeout_is_retryable_and_reported() {
    let server = MockServer::start(|_| {
        thread::sleep(Duration::from_millis(400));
        Reply::json(200, r#"{"logprob": -1.0}"#)
    });
    let mut cfg = fast_cfg(&server.url);
    cfg.timeout = Duration::from_millis(100);
    cfg.max_retries = 1;
    let scorer = HttpScorer::new(cfg);
    let ctx = SegmentedContext::from_texts(&["a."]).unwrap();
    let req = ScoreRequest::new(&ctx, [0].into(), "q", "", "t").unwrap();
    let err = scorer.score(&req).unwrap_err();
    assert!(matches!(err, ScoreError::BackendTimeout(_)), "{err:?}");
    assert!(err.is_retryable());
    assert_eq!(server.hits(), 2);
}

#[test]
fn sends_bearer_token() {
    let seen = Arc::new(Mutex::new(None));
    let s = seen.clone();
    let server = MockServer::start(move |req| {
        *s.lock().unwrap() = req.header("authorization").map(String::from);
        Reply::json(200, r#"{"logprob": 0.0}"#)
    });
    let mut cfg = fast_cfg(&server.url);
    cfg.auth_token = Some("tok".into());
    let scorer = HttpScorer::new(cfg);
    let ctx = SegmentedContext::from_texts(&["a."]).unwrap();
    let req = ScoreRequest::new(&ctx, [0].into(), "q", "", "t").unwrap();
    scorer.score(&req).unwrap();
    assert_eq!(seen.lock().unwrap().as_deref(), Some("Bearer tok"));
}

#[test]
fn in_flight_limit_is_respected() {
    let current = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (c, p) = (current.clone(), peak.clone());
    let server = MockServer::start(move |_| {
        let now = c.fetch_add(1, Ordering::SeqCst) + 1;
        p.fetch_max(now, Ordering::SeqCst);
        thread::sleep(Duration::from_millis(40));
        c.fetch_sub(1, Ordering::SeqCst);
        Reply::json(200, r#"{"logprob": 0.0}"#)
    });
    let mut cfg = fast_cfg(&server.url);
    cfg.max_in_flight = 2;
    let scorer = Arc::new(HttpScorer::new(cfg));
    let ctx = Arc::new(SegmentedContext::from_texts(&["a."]).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (scorer, ctx) = (scorer.clone(), ctx.clone());
            thread::spawn(move || {
                let req = ScoreRequest::new(&ctx, [0].into(), "q", "", "t").unwrap();
                scorer.score(&req).unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(server.hits(), 8);
    assert!(peak.load(Ordering::SeqCst) <= 2);
}
