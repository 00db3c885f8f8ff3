//! The language-model scoring boundary.
//!
//! Every probability the crate needs goes through [`Scorer::score`]: the log
//! probability of a target statement given a (possibly ablated) context, the
//! query and the verbatim response history. Two implementations ship here:
//!
//! * [`SupportOracle`], a deterministic test double with
//!   `log p = -alpha * (weight of support sentences missing from the context)`.
//! * [`HttpScorer`], a blocking client for the `POST /v1/logprob` protocol.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmenter::SegmentedContext;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend timed out: {0}")]
    BackendTimeout(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no support entry for statement `{0}`")]
    UnknownStatement(String),
}

impl ScoreError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::BackendUnavailable(_) | Self::BackendTimeout(_))
    }
}

/// Sum of target-token log probabilities.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogProb(f64);

impl LogProb {
    pub fn new(value: f64) -> Result<Self, ScoreError> {
        if value.is_finite() {
            Ok(Self(value))
        } else {
            Err(ScoreError::InvalidRequest(format!(
                "non-finite log probability {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// One scoring query. `retained` holds the sentence ids kept in the context;
/// they are rendered in original order with their original `<C{id}>` tags.
#[derive(Debug, Clone)]
pub struct ScoreRequest<'a> {
    ctx: &'a SegmentedContext,
    retained: BTreeSet<usize>,
    pub query: &'a str,
    pub history: &'a str,
    pub target: &'a str,
}

impl<'a> ScoreRequest<'a> {
    pub fn new(
        ctx: &'a SegmentedContext,
        retained: BTreeSet<usize>,
        query: &'a str,
        history: &'a str,
        target: &'a str,
    ) -> Result<Self, ScoreError> {
        if target.is_empty() {
            return Err(ScoreError::InvalidRequest("empty target".into()));
        }
        if let Some(&bad) = retained.iter().find(|&&id| id >= ctx.len()) {
            return Err(ScoreError::InvalidRequest(format!(
                "retained id {bad} outside a {}-sentence context",
                ctx.len()
            )));
        }
        Ok(Self {
            ctx,
            retained,
            query,
            history,
            target,
        })
    }

    pub fn ctx(&self) -> &SegmentedContext {
        self.ctx
    }

    pub fn retained(&self) -> &BTreeSet<usize> {
        &self.retained
    }

    /// The rendered conditioning context.
    pub fn rendered_context(&self) -> String {
        crate::segmenter::render_retained(self.ctx, self.retained.iter().copied())
    }

    /// The exact string a language-model backend conditions on; the target
    /// is scored as its immediate continuation.
    pub fn prompt(&self) -> String {
        scoring_prompt(&self.rendered_context(), self.query, self.history)
    }

    pub fn wire_body(&self) -> WireRequest {
        WireRequest {
            sentences: self
                .retained
                .iter()
                .map(|&id| WireSentence {
                    id,
                    text: self.ctx.sentences()[id].text.clone(),
                })
                .collect(),
            query: self.query.to_string(),
            history: self.history.to_string(),
            target: self.target.to_string(),
        }
    }
}

/// Prompt framing shared by scoring backends and candidate sampling:
/// rendered context, blank line, query, blank line, verbatim history, then an
/// opening `<statement>` tag.
pub fn scoring_prompt(rendered_context: &str, query: &str, history: &str) -> String {
    format!("{rendered_context}\n\n{query}\n\n{history}<statement>")
}

/// Anything that can assign a log probability to a target.
pub trait Scorer: Send + Sync {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<LogProb, ScoreError>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<LogProb, ScoreError> {
        (**self).score(req)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<LogProb, ScoreError> {
        (**self).score(req)
    }
}

impl<S: Scorer + ?Sized> Scorer for std::sync::Arc<S> {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<LogProb, ScoreError> {
        (**self).score(req)
    }
}

// ---------------------------------------------------------------------------
// support oracle

/// Support for one statement: either a plain id list (each weight 1) or an
/// explicit id → weight map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SupportEntry {
    Ids(BTreeSet<usize>),
    /// Keys are sentence ids written as JSON object keys.
    Weighted(BTreeMap<String, f64>),
}

impl SupportEntry {
    pub fn weights(&self) -> Result<BTreeMap<usize, f64>, OracleSpecError> {
        match self {
            Self::Ids(ids) => Ok(ids.iter().map(|&i| (i, 1.0)).collect()),
            Self::Weighted(w) => w
                .iter()
                .map(|(k, &v)| {
                    k.trim()
                        .parse()
                        .map(|id| (id, v))
                        .map_err(|_| OracleSpecError::SentenceId(k.clone()))
                })
                .collect(),
        }
    }
}

/// Serialized form of a [`SupportOracle`]: statement text → support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportOracleSpec {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub support: HashMap<String, SupportEntry>,
}

fn default_alpha() -> f64 {
    1.0
}

impl SupportOracleSpec {
    pub fn from_path(path: &Path) -> Result<Self, OracleSpecError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Error)]
pub enum OracleSpecError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("alpha must be positive and finite, got {0}")]
    Alpha(f64),
    #[error("support weight for `{0}` must be finite and non-negative")]
    Weight(String),
    #[error("`{0}` is not a sentence id")]
    SentenceId(String),
}

/// `score = -alpha * sum(w_j for j in support(target) \ retained)`.
///
/// Rewards under this scorer are analytic: with unit weights,
/// `reward(E) = alpha * (2|S ∩ E| - |S|)`.
#[derive(Debug, Clone)]
pub struct SupportOracle {
    alpha: f64,
    support: HashMap<String, BTreeMap<usize, f64>>,
}

impl SupportOracle {
    pub fn new(spec: SupportOracleSpec) -> Result<Self, OracleSpecError> {
        if !(spec.alpha.is_finite() && spec.alpha > 0.0) {
            return Err(OracleSpecError::Alpha(spec.alpha));
        }
        let mut support = HashMap::with_capacity(spec.support.len());
        for (key, entry) in spec.support {
            let weights = entry.weights()?;
            if weights.values().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(OracleSpecError::Weight(key));
            }
            support.insert(key, weights);
        }
        Ok(Self {
            alpha: spec.alpha,
            support,
        })
    }

    /// Unit-weight oracle from `(statement, support ids)` pairs.
    pub fn from_sets<I, K, S>(alpha: f64, entries: I) -> Result<Self, OracleSpecError>
    where
        I: IntoIterator<Item = (K, S)>,
        K: Into<String>,
        S: IntoIterator<Item = usize>,
    {
        let support = entries
            .into_iter()
            .map(|(k, s)| (k.into(), SupportEntry::Ids(s.into_iter().collect())))
            .collect();
        Self::new(SupportOracleSpec { alpha, support })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn support(&self, statement: &str) -> Option<&BTreeMap<usize, f64>> {
        self.support.get(statement)
    }
}

pub fn oracle_scorer(spec: SupportOracleSpec) -> Result<SupportOracle, OracleSpecError> {
    SupportOracle::new(spec)
}

impl Scorer for SupportOracle {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<LogProb, ScoreError> {
        let support = self
            .support
            .get(req.target)
            .ok_or_else(|| ScoreError::UnknownStatement(req.target.to_string()))?;
        if let Some((&bad, _)) = support.range(req.ctx().len()..).next() {
            return Err(ScoreError::InvalidRequest(format!(
                "support id {bad} outside a {}-sentence context",
                req.ctx().len()
            )));
        }
        let missing: f64 = support
            .iter()
            .filter(|(id, _)| !req.retained().contains(id))
            .map(|(_, w)| w)
            .sum();
        LogProb::new(-self.alpha * missing)
    }
}

// ---------------------------------------------------------------------------
// HTTP client

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSentence {
    pub id: usize,
    pub text: String,
}

/// Body of `POST /v1/logprob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub sentences: Vec<WireSentence>,
    pub query: String,
    pub history: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub logprob: f64,
}

#[derive(Debug, Clone)]
pub struct HttpScorerConfig {
    /// Base URL; `/v1/logprob` is appended unless already present.
    pub endpoint: String,
    pub auth_token: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First backoff delay; doubles on every retry.
    pub initial_backoff: Duration,
    pub max_in_flight: usize,
}

impl HttpScorerConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            auth_token: None,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            initial_backoff: Duration::from_millis(200),
            max_in_flight: 8,
        }
    }
}

/// Client for the logprob wire protocol. Retries on timeouts, connection
/// failures and `503`; `400` maps to [`ScoreError::InvalidRequest`].
pub struct HttpScorer {
    agent: ureq::Agent,
    url: String,
    cfg: HttpScorerConfig,
    in_flight: Semaphore,
}

impl HttpScorer {
    pub fn new(cfg: HttpScorerConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let base = cfg.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/v1/logprob") {
            base.to_string()
        } else {
            format!("{base}/v1/logprob")
        };
        Self {
            agent,
            url,
            in_flight: Semaphore::new(cfg.max_in_flight.max(1)),
            cfg,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn attempt(&self, body: &WireRequest) -> Result<LogProb, ScoreError> {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.cfg.auth_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(map_transport)?;
        let status = resp.status().as_u16();
        match status {
            200 => {
                let parsed: WireResponse = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| ScoreError::BackendUnavailable(format!("bad response body: {e}")))?;
                LogProb::new(parsed.logprob)
                    .map_err(|_| ScoreError::BackendUnavailable("non-finite logprob".into()))
            }
            400 => {
                let msg = resp.body_mut().read_to_string().unwrap_or_default();
                Err(ScoreError::InvalidRequest(msg))
            }
            503 => Err(ScoreError::BackendUnavailable("503 busy".into())),
            other => Err(ScoreError::BackendUnavailable(format!("HTTP {other}"))),
        }
    }
}

fn map_transport(e: ureq::Error) -> ScoreError {
    match e {
        ureq::Error::Timeout(t) => ScoreError::BackendTimeout(t.to_string()),
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => {
            ScoreError::BackendTimeout(io.to_string())
        }
        ureq::Error::BadUri(u) => ScoreError::InvalidRequest(format!("bad endpoint {u}")),
        other => ScoreError::BackendUnavailable(other.to_string()),
    }
}

pub fn http_scorer(cfg: HttpScorerConfig) -> HttpScorer {
    HttpScorer::new(cfg)
}

impl Scorer for HttpScorer {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<LogProb, ScoreError> {
        let body = req.wire_body();
        let _permit = self.in_flight.acquire();
        let mut backoff = self.cfg.initial_backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if e.is_retryable() && attempt < self.cfg.max_retries => {
                    debug!("retrying {} after {e} (attempt {attempt})", self.url);
                    thread::sleep(backoff);
                    backoff = backoff.saturating_mul(2);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.cv.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut p = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *p += 1;
        self.0.cv.notify_one();
    }
}
