//! Best-of-N citation reranking.
//!
//! For each statement the original citation plus up to `n` resampled
//! candidates are parsed, length-filtered, de-duplicated by cited-id set and
//! scored; the highest-scoring valid candidate replaces the original. If no
//! candidate survives, the original citation is kept unchanged.

use std::collections::BTreeSet;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::citation::{CitationSequence, Statement, StructuredResponse};
use crate::reward::{count_cited_tokens, RewardBreakdown, StatementRewarder, Tokenizer};
use crate::scorer::{scoring_prompt, ScoreError, ScoreRequest, Scorer};
use crate::segmenter::{render_prompt_context, SegmentedContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    None,
    OverLength,
    Malformed,
    /// Same cited-id set as an earlier candidate.
    Duplicate,
    ScoringFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    FirstSeen,
}

/// What a candidate is ranked by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// `log p(r | E) - log p(r | C \ E)`.
    #[default]
    #[serde(alias = "selfcite")]
    AblationReward,
    /// Log probability of the statement and its citation under the full context.
    LmLogprob,
    /// Longest cited text.
    MaxLength,
    ProbDropOnly,
    ProbHoldOnly,
}

impl std::str::FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown selector `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub n: usize,
    pub l_max_tokens: usize,
    pub dedup: bool,
    pub tie_break: TieBreak,
    pub selector: Selector,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            n: 10,
            l_max_tokens: 384,
            dedup: true,
            tie_break: TieBreak::FirstSeen,
            selector: Selector::AblationReward,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n == 0 {
            return Err("rerank.n must be >= 1".into());
        }
        if self.l_max_tokens == 0 {
            return Err("rerank.l_max_tokens must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub raw: String,
    pub seq: Option<CitationSequence>,
    /// Resolved cited ids.
    pub cited: Vec<usize>,
    pub cited_tokens: usize,
    pub reward: Option<RewardBreakdown>,
    /// Value the selector ranked by.
    pub score: Option<f64>,
    pub valid: bool,
    pub invalid_reason: InvalidReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Candidate {
    /// Parses a candidate citation string. Accepts a bare `<cite>` body
    /// (`[1-2][4-4]`) with or without the surrounding tags.
    pub fn parse(raw: &str, ctx: &SegmentedContext) -> Self {
        let body = raw.trim();
        let body = body.strip_prefix("<cite>").unwrap_or(body);
        let body = body.strip_suffix("</cite>").unwrap_or(body);
        match CitationSequence::parse(body) {
            Ok(seq) => Self::from_seq(raw.to_string(), seq, ctx),
            Err(e) => Self {
                raw: raw.to_string(),
                seq: None,
                cited: Vec::new(),
                cited_tokens: 0,
                reward: None,
                score: None,
                valid: false,
                invalid_reason: InvalidReason::Malformed,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn from_seq(raw: String, seq: CitationSequence, ctx: &SegmentedContext) -> Self {
        let cited = seq.resolve(ctx).into_iter().collect();
        Self {
            raw,
            seq: Some(seq),
            cited,
            cited_tokens: 0,
            reward: None,
            score: None,
            valid: true,
            invalid_reason: InvalidReason::None,
            error: None,
        }
    }

    pub fn cited_set(&self) -> BTreeSet<usize> {
        self.cited.iter().copied().collect()
    }

    fn invalidate(&mut self, reason: InvalidReason) {
        self.valid = false;
        self.invalid_reason = reason;
        self.reward = None;
        self.score = None;
    }
}

/// Applies the length cap: a candidate stays valid if its cited text is at
/// most `l_max_tokens` tokens or it cites exactly one sentence.
pub fn filter_candidate<T: Tokenizer + ?Sized>(
    mut cand: Candidate,
    ctx: &SegmentedContext,
    cfg: &RerankConfig,
    tokenizer: &T,
) -> Candidate {
    if cand.invalid_reason == InvalidReason::Malformed {
        return cand;
    }
    let ids = cand.cited_set();
    cand.cited_tokens = count_cited_tokens(tokenizer, ctx, &ids);
    if cand.cited_tokens > cfg.l_max_tokens && ids.len() != 1 {
        cand.invalidate(InvalidReason::OverLength);
    }
    cand
}

/// Marks every candidate whose cited-id set already appeared as a duplicate;
/// the first occurrence wins. Malformed candidates are compared by raw string.
pub fn dedup_candidates(mut cands: Vec<Candidate>) -> Vec<Candidate> {
    let mut seen_sets = Vec::<BTreeSet<usize>>::new();
    let mut seen_raw = Vec::<String>::new();
    for c in &mut cands {
        if c.invalid_reason == InvalidReason::Duplicate {
            continue;
        }
        if c.seq.is_some() {
            let set = c.cited_set();
            if seen_sets.contains(&set) {
                c.invalidate(InvalidReason::Duplicate);
            } else {
                seen_sets.push(set);
            }
        } else if seen_raw.contains(&c.raw) {
            c.invalidate(InvalidReason::Duplicate);
        } else {
            seen_raw.push(c.raw.clone());
        }
    }
    cands
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RerankError {
    #[error("every candidate failed to score; last error: {0}")]
    AllScoringFailed(ScoreError),
    #[error("candidate source failed: {0}")]
    Source(String),
}

/// Result of reranking one statement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatementOutcome {
    pub best: CitationSequence,
    /// Index into `audit` of the selected candidate; `None` on fallback.
    pub selected: Option<usize>,
    pub fell_back: bool,
    pub tie_break: TieBreak,
    /// Every candidate in input order; index 0 is the original citation.
    pub audit: Vec<Candidate>,
}

type Scored = Result<(f64, Option<RewardBreakdown>), ScoreError>;

/// Reranks one statement's citation.
///
/// `history` is the serialized response prefix before this statement. The
/// original citation is prepended as candidate 0; at most `cfg.n` of
/// `candidates` are considered.
#[allow(clippy::too_many_arguments)]
pub fn rerank_statement<S, T>(
    scorer: &S,
    ctx: &SegmentedContext,
    query: &str,
    history: &str,
    statement: &Statement,
    candidates: &[String],
    cfg: &RerankConfig,
    tokenizer: &T,
) -> Result<StatementOutcome, RerankError>
where
    S: Scorer + ?Sized,
    T: Tokenizer + ?Sized,
{
    let original = Candidate::from_seq(
        statement.citation.to_string(),
        statement.citation.clone(),
        ctx,
    );
    let mut cands: Vec<Candidate> = std::iter::once(original)
        .chain(candidates.iter().take(cfg.n).map(|r| Candidate::parse(r, ctx)))
        .map(|c| filter_candidate(c, ctx, cfg, tokenizer))
        .collect();
    if cfg.dedup {
        cands = dedup_candidates(cands);
    }

    let rewarder = StatementRewarder::new(scorer, ctx, query, history, &statement.text);
    // Statement text plus citation, scored jointly: the text term is the same
    // for every candidate under the full context, so only the citation varies.
    let lm_prefix = format!("{}<cite>", statement.text);
    let results: Vec<Option<Scored>> = cands
        .par_iter()
        .map(|c| {
            c.valid.then(|| {
                score_candidate(cfg.selector, &rewarder, scorer, ctx, query, history, &lm_prefix, c)
            })
        })
        .collect();

    let mut attempted = 0;
    let mut last_err = None;
    for (c, res) in cands.iter_mut().zip(results) {
        match res {
            None => {}
            Some(Ok((score, reward))) => {
                attempted += 1;
                c.score = Some(score);
                c.reward = reward;
            }
            Some(Err(e)) => {
                attempted += 1;
                c.error = Some(e.to_string());
                c.invalidate(InvalidReason::ScoringFailed);
                last_err = Some(e);
            }
        }
    }
    if attempted > 0 && cands.iter().all(|c| !c.valid) {
        if let Some(e) = last_err {
            return Err(RerankError::AllScoringFailed(e));
        }
    }

    let selected = argmax_first_seen(cands.iter().map(|c| c.valid.then_some(c.score).flatten()));
    let best = match selected {
        Some(i) => cands[i].seq.clone().unwrap_or_default(),
        None => statement.citation.clone(),
    };
    Ok(StatementOutcome {
        best,
        selected,
        fell_back: selected.is_none(),
        tie_break: cfg.tie_break,
        audit: cands,
    })
}

#[allow(clippy::too_many_arguments)]
fn score_candidate<S: Scorer + ?Sized>(
    selector: Selector,
    rewarder: &StatementRewarder<'_, S>,
    scorer: &S,
    ctx: &SegmentedContext,
    query: &str,
    history: &str,
    lm_prefix: &str,
    cand: &Candidate,
) -> Result<(f64, Option<RewardBreakdown>), ScoreError> {
    let ids = cand.cited_set();
    match selector {
        Selector::MaxLength => Ok((cand.cited_tokens as f64, None)),
        Selector::LmLogprob => {
            let seq = cand.seq.as_ref().map(|s| s.to_string()).unwrap_or_default();
            let target = format!("{lm_prefix}{seq}</cite>");
            let req = ScoreRequest::new(ctx, ctx.all_ids().collect(), query, history, &target)?;
            Ok((scorer.score(&req)?.value(), None))
        }
        Selector::AblationReward | Selector::ProbDropOnly | Selector::ProbHoldOnly => {
            let r = rewarder.reward(&ids)?;
            let score = match selector {
                Selector::ProbDropOnly => r.prob_drop,
                Selector::ProbHoldOnly => r.prob_hold,
                _ => r.reward,
            };
            Ok((score, Some(r)))
        }
    }
}

/// Index of the first maximum among the `Some` scores.
fn argmax_first_seen(scores: impl Iterator<Item = Option<f64>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.enumerate() {
        if let Some(s) = s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Valid candidates of an audit in selection order: score descending, ties
/// by position. The first entry is what [`rerank_statement`] selects.
pub fn ranking(audit: &[Candidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..audit.len())
        .filter(|&i| audit[i].valid && audit[i].score.is_some())
        .collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (audit[a].score.unwrap(), audit[b].score.unwrap());
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    idx
}

// ---------------------------------------------------------------------------
// candidate sources

/// What a candidate source is asked for.
#[derive(Debug, Clone)]
pub struct CandidateRequest<'a> {
    pub doc_id: &'a str,
    pub statement_index: usize,
    pub ctx: &'a SegmentedContext,
    pub query: &'a str,
    /// Serialized response prefix before this statement.
    pub history: &'a str,
    pub statement: &'a str,
    pub n: usize,
}

/// Supplies raw candidate citation strings for a statement.
pub trait CandidateSource: Send + Sync {
    fn candidates(&self, req: &CandidateRequest<'_>) -> Result<Vec<String>, RerankError>;
}

/// Pre-sampled candidates, one list per statement.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StaticCandidates(pub Vec<Vec<String>>);

impl CandidateSource for StaticCandidates {
    fn candidates(&self, req: &CandidateRequest<'_>) -> Result<Vec<String>, RerankError> {
        Ok(self.0.get(req.statement_index).cloned().unwrap_or_default())
    }
}

impl<F> CandidateSource for F
where
    F: Fn(&CandidateRequest<'_>) -> Result<Vec<String>, RerankError> + Send + Sync,
{
    fn candidates(&self, req: &CandidateRequest<'_>) -> Result<Vec<String>, RerankError> {
        self(req)
    }
}

/// Samples candidates live from an OpenAI-style `/v1/completions` endpoint,
/// continuing generation right after `<cite>` and stopping at `</cite>`.
pub struct SamplingSource {
    agent: ureq::Agent,
    pub url: String,
    pub model: Option<String>,
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    prompt: String,
    n: usize,
    top_p: f64,
    temperature: f64,
    max_tokens: usize,
    stop: [&'static str; 1],
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
}

impl SamplingSource {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/v1/completions") {
            base.to_string()
        } else {
            format!("{base}/v1/completions")
        };
        Self {
            agent,
            url,
            model: None,
            top_p: 0.9,
            temperature: 1.2,
            max_tokens: 64,
        }
    }
}

/// Prompt that asks the model to continue a citation for `statement`.
pub fn sampling_prompt(ctx: &SegmentedContext, query: &str, history: &str, statement: &str) -> String {
    let mut prompt = scoring_prompt(&render_prompt_context(ctx), query, history);
    prompt.push_str(statement);
    prompt.push_str("<cite>");
    prompt
}

impl CandidateSource for SamplingSource {
    fn candidates(&self, req: &CandidateRequest<'_>) -> Result<Vec<String>, RerankError> {
        let body = CompletionRequest {
            model: self.model.as_deref(),
            prompt: sampling_prompt(req.ctx, req.query, req.history, req.statement),
            n: req.n,
            top_p: self.top_p,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            stop: ["</cite>"],
        };
        let resp: CompletionResponse = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| RerankError::Source(e.to_string()))?;
        Ok(resp.choices.into_iter().map(|c| c.text).collect())
    }
}

/// Per-statement audit trail of [`rerank_response`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatementAudit {
    pub statement_index: usize,
    pub selected: Option<usize>,
    pub fell_back: bool,
    pub tie_break: TieBreak,
    pub candidates: Vec<Candidate>,
}

/// Reranks every statement of `resp`; statement texts are never modified.
///
/// The history for statement `i` is the serialized prefix of the original
/// response, so every candidate is scored under the conditioning it was
/// sampled under.
#[allow(clippy::too_many_arguments)]
pub fn rerank_response<S, C, T>(
    scorer: &S,
    ctx: &SegmentedContext,
    doc_id: &str,
    query: &str,
    resp: &StructuredResponse,
    source: &C,
    cfg: &RerankConfig,
    tokenizer: &T,
) -> Result<(StructuredResponse, Vec<StatementAudit>), RerankError>
where
    S: Scorer + ?Sized,
    C: CandidateSource + ?Sized,
    T: Tokenizer + ?Sized,
{
    let mut out = resp.clone();
    let mut audits = Vec::with_capacity(resp.len());
    for (i, st) in resp.statements.iter().enumerate() {
        let history = resp.prefix(i);
        let req = CandidateRequest {
            doc_id,
            statement_index: i,
            ctx,
            query,
            history: &history,
            statement: &st.text,
            n: cfg.n,
        };
        let pool = source.candidates(&req)?;
        let outcome = rerank_statement(scorer, ctx, query, &history, st, &pool, cfg, tokenizer)?;
        out.statements[i].citation = outcome.best;
        audits.push(StatementAudit {
            statement_index: i,
            selected: outcome.selected,
            fell_back: outcome.fell_back,
            tie_break: outcome.tie_break,
            candidates: outcome.audit,
        });
    }
    Ok((out, audits))
}
