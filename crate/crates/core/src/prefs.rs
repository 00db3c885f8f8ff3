//! Preference-pair construction.
//!
//! `rejected` is the model's original response and `chosen` the same
//! statements with best-of-N citations. Before a pair is emitted the rejected
//! citations are edited so both sides cite the same number of sentences per
//! statement, which removes citation length as a shortcut signal.
//!
//! Also here: random citation shifts for denoising pairs, and farthest-first
//! context truncation.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::citation::{serialize_response, CitationSequence, CitationSpan, StructuredResponse};
use crate::reward::Tokenizer;
use crate::rerank::{rerank_response, CandidateSource, RerankConfig, StatementAudit};
use crate::scorer::Scorer;
use crate::segmenter::SegmentedContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Insert,
    Remove,
}

/// One edit applied to a rejected citation during balancing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub statement: usize,
    pub op: EditOp,
    pub span: CitationSpan,
    /// Index in the span list at which the span was inserted or removed.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub doc_id: String,
    pub query: String,
    pub chosen: StructuredResponse,
    pub rejected: StructuredResponse,
    pub seed: u64,
    pub balancing_log: Vec<EditRecord>,
}

/// Wire form of a pair for preference-training code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub doc_id: String,
    pub query: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: PairMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub seed: u64,
    pub edits: Vec<EditRecord>,
    /// Context sentences dropped to fit the token budget, if any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub truncated_ids: Vec<usize>,
}

impl PreferencePair {
    pub fn new(
        doc_id: impl Into<String>,
        query: impl Into<String>,
        chosen: StructuredResponse,
        rejected: StructuredResponse,
    ) -> Result<Self, BalanceError> {
        let pair = Self {
            doc_id: doc_id.into(),
            query: query.into(),
            chosen,
            rejected,
            seed: 0,
            balancing_log: Vec::new(),
        };
        pair.check_aligned()?;
        Ok(pair)
    }

    fn check_aligned(&self) -> Result<(), BalanceError> {
        let aligned = self.chosen.len() == self.rejected.len()
            && self
                .chosen
                .statements
                .iter()
                .zip(&self.rejected.statements)
                .all(|(c, r)| c.text == r.text);
        if aligned {
            Ok(())
        } else {
            Err(BalanceError::Misaligned)
        }
    }

    pub fn to_record(&self) -> PairRecord {
        PairRecord {
            doc_id: self.doc_id.clone(),
            query: self.query.clone(),
            chosen: serialize_response(&self.chosen),
            rejected: serialize_response(&self.rejected),
            meta: PairMeta {
                seed: self.seed,
                edits: self.balancing_log.clone(),
                truncated_ids: Vec::new(),
            },
        }
    }

    /// True when every statement has equal coverage on both sides.
    pub fn is_balanced(&self, ctx: &SegmentedContext) -> bool {
        self.chosen
            .statements
            .iter()
            .zip(&self.rejected.statements)
            .all(|(c, r)| c.citation.coverage(ctx) == r.citation.coverage(ctx))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BalanceError {
    #[error("chosen and rejected statements differ")]
    Misaligned,
    #[error("statement {statement}: need {needed} more sentence(s) but only {available} eligible in the window")]
    BalancingInfeasible {
        statement: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid window ({0}, {1})")]
    InvalidWindow(usize, usize),
}

/// Sentence-index distance window for inserted citations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub min: usize,
    pub max: usize,
}

impl Default for Window {
    fn default() -> Self {
        Self { min: 5, max: 10 }
    }
}

/// Ids not in `exclude` whose distance to some anchor lies in the window.
fn window_pool(
    anchors: &BTreeSet<usize>,
    exclude: &BTreeSet<usize>,
    window: Window,
    len: usize,
) -> Vec<usize> {
    let mut pool = BTreeSet::new();
    for &a in anchors {
        let below = a.saturating_sub(window.max)..=a.saturating_sub(window.min);
        if a >= window.min {
            pool.extend(below);
        }
        pool.extend((a + window.min)..=(a + window.max).min(len.saturating_sub(1)));
    }
    pool.into_iter()
        .filter(|id| *id < len && !exclude.contains(id))
        .collect()
}

/// Edits `pair.rejected` so every statement's coverage matches `chosen`.
///
/// Excess coverage is removed by dropping randomly chosen spans; missing
/// coverage is filled with single-sentence spans at ids 5–10 (per `window`)
/// positions away from the rejected statement's original citations (or the
/// chosen ones if the rejected statement cites nothing), never reusing an
/// originally cited id. Deterministic in `seed`.
pub fn balance_lengths(
    mut pair: PreferencePair,
    ctx: &SegmentedContext,
    window: Window,
    seed: u64,
) -> Result<PreferencePair, BalanceError> {
    if window.min > window.max {
        return Err(BalanceError::InvalidWindow(window.min, window.max));
    }
    pair.check_aligned()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    for (i, (chosen, rejected)) in pair
        .chosen
        .statements
        .iter()
        .zip(pair.rejected.statements.iter_mut())
        .enumerate()
    {
        let target = chosen.citation.coverage(ctx);
        let original = rejected.citation.resolve(ctx);
        let spans = &mut rejected.citation.spans;

        while rejected_coverage(spans, ctx) > target {
            let position = rng.gen_range(0..spans.len());
            let span = spans.remove(position);
            log.push(EditRecord {
                statement: i,
                op: EditOp::Remove,
                span,
                position,
            });
        }

        let needed = target - rejected_coverage(spans, ctx);
        if needed == 0 {
            continue;
        }
        let anchors = if original.is_empty() {
            chosen.citation.resolve(ctx)
        } else {
            original.clone()
        };
        let mut pool = window_pool(&anchors, &original, window, ctx.len());
        if pool.len() < needed {
            return Err(BalanceError::BalancingInfeasible {
                statement: i,
                needed,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        for &id in &pool[..needed] {
            let span = CitationSpan::single(id);
            let position = spans
                .iter()
                .position(|s| s.start() > id)
                .unwrap_or(spans.len());
            spans.insert(position, span);
            log.push(EditRecord {
                statement: i,
                op: EditOp::Insert,
                span,
                position,
            });
        }
    }
    pair.seed = seed;
    pair.balancing_log = log;
    Ok(pair)
}

fn rejected_coverage(spans: &[CitationSpan], ctx: &SegmentedContext) -> usize {
    CitationSequence::new(spans.to_vec()).coverage(ctx)
}

/// One applied citation shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shift {
    pub statement: usize,
    pub span_index: usize,
    pub delta: i64,
    pub before: CitationSpan,
    pub after: CitationSpan,
}

/// Translates every citation span by a random offset with magnitude in
/// `shift_range` (sign random), clamped into the context while preserving
/// width where possible. Statement texts and span counts are unchanged.
pub fn perturb_citations(
    resp: &StructuredResponse,
    ctx: &SegmentedContext,
    shift_range: (usize, usize),
    seed: u64,
) -> (StructuredResponse, Vec<Shift>) {
    let (lo, hi) = (shift_range.0.min(shift_range.1), shift_range.0.max(shift_range.1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = resp.clone();
    let mut shifts = Vec::new();
    for (i, st) in out.statements.iter_mut().enumerate() {
        for (j, span) in st.citation.spans.iter_mut().enumerate() {
            let magnitude = rng.gen_range(lo..=hi) as i64;
            let delta = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
            let after = shift_span(*span, delta, ctx.len());
            shifts.push(Shift {
                statement: i,
                span_index: j,
                delta,
                before: *span,
                after,
            });
            *span = after;
        }
    }
    (out, shifts)
}

/// Clamped translation of a span within a `len`-sentence context.
pub fn shift_span(span: CitationSpan, delta: i64, len: usize) -> CitationSpan {
    let last = len.saturating_sub(1) as i64;
    let width = (span.end() - span.start()) as i64;
    let start = span.start() as i64 + delta;
    let end = span.end() as i64 + delta;
    let (a, b) = if width > last {
        (0, last)
    } else if start < 0 {
        (0, width)
    } else if end > last {
        (last - width, last)
    } else {
        (start, end)
    };
    CitationSpan::new(a as usize, b as usize).expect("clamped span is ordered")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationPlan {
    pub budget_tokens: usize,
    pub keep_anchors: BTreeSet<usize>,
    /// Sentence ids in removal order.
    pub removed_ids: Vec<usize>,
    pub tokens_before: usize,
    pub tokens_after: usize,
}

impl TruncationPlan {
    /// Ids that survive, in document order.
    pub fn retained_ids(&self, ctx: &SegmentedContext) -> Vec<usize> {
        let removed: BTreeSet<_> = self.removed_ids.iter().collect();
        ctx.all_ids().filter(|i| !removed.contains(i)).collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TruncationError {
    #[error("anchors alone need {anchor_tokens} tokens, budget is {budget}")]
    AnchorsExceedBudget { anchor_tokens: usize, budget: usize },
    #[error("anchor {0} is outside the context")]
    UnknownAnchor(usize),
}

pub const DEFAULT_TRUNCATION_BUDGET: usize = 25_600;

/// Removes sentences farthest (in sentence index) from any anchor until the
/// context fits `budget_tokens`. Ties go to the larger id. With no anchors
/// every sentence is equally far and removal runs from the end.
pub fn plan_truncation<T: Tokenizer + ?Sized>(
    ctx: &SegmentedContext,
    anchors: &BTreeSet<usize>,
    budget_tokens: usize,
    tokenizer: &T,
) -> Result<TruncationPlan, TruncationError> {
    if let Some(&bad) = anchors.iter().find(|&&a| a >= ctx.len()) {
        return Err(TruncationError::UnknownAnchor(bad));
    }
    let tokens: Vec<usize> = ctx
        .sentences()
        .iter()
        .map(|s| tokenizer.count_tokens(&s.text))
        .collect();
    let total: usize = tokens.iter().sum();
    let anchor_tokens: usize = anchors.iter().map(|&a| tokens[a]).sum();
    if anchor_tokens > budget_tokens {
        return Err(TruncationError::AnchorsExceedBudget {
            anchor_tokens,
            budget: budget_tokens,
        });
    }
    let distance = |id: usize| anchors.iter().map(|&a| a.abs_diff(id)).min().unwrap_or(usize::MAX);
    let mut order: Vec<usize> = ctx.all_ids().filter(|i| !anchors.contains(i)).collect();
    order.sort_by_key(|&id| std::cmp::Reverse((distance(id), id)));

    let mut remaining = total;
    let mut removed_ids = Vec::new();
    for id in order {
        if remaining <= budget_tokens {
            break;
        }
        remaining -= tokens[id];
        removed_ids.push(id);
    }
    Ok(TruncationPlan {
        budget_tokens,
        keep_anchors: anchors.clone(),
        removed_ids,
        tokens_before: total,
        tokens_after: remaining,
    })
}

// ---------------------------------------------------------------------------
// dataset construction

/// One corpus record ready for pair construction.
#[derive(Debug, Clone)]
pub struct PrefInput<C> {
    pub doc_id: String,
    pub ctx: SegmentedContext,
    pub query: String,
    /// Direct-sampled response; becomes `rejected`.
    pub response: StructuredResponse,
    pub candidates: C,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrefConfig {
    pub rerank: RerankConfig,
    pub window: Window,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum DropReason {
    /// Reranking changed nothing, so the pair carries no preference.
    IdenticalCitations,
    Balancing { error: String },
    Rerank { error: String },
    Truncation { error: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairOutcome {
    Emitted {
        pair: PreferencePair,
        audit: Vec<StatementAudit>,
    },
    Dropped {
        doc_id: String,
        reason: DropReason,
    },
}

/// Per-record seed: independent of processing order.
pub fn record_seed(seed: u64, doc_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(doc_id.as_bytes());
    let bytes: [u8; 8] = h.finalize()[..8].try_into().expect("8 bytes");
    u64::from_le_bytes(bytes)
}

/// Builds one preference pair: rerank, drop if unchanged, then balance.
pub fn build_pair<S, C, T>(
    input: &PrefInput<C>,
    scorer: &S,
    cfg: &PrefConfig,
    tokenizer: &T,
) -> PairOutcome
where
    S: Scorer + ?Sized,
    C: CandidateSource,
    T: Tokenizer + ?Sized,
{
    let dropped = |reason| PairOutcome::Dropped {
        doc_id: input.doc_id.clone(),
        reason,
    };
    let (chosen, audit) = match rerank_response(
        scorer,
        &input.ctx,
        &input.doc_id,
        &input.query,
        &input.response,
        &input.candidates,
        &cfg.rerank,
        tokenizer,
    ) {
        Ok(r) => r,
        Err(e) => return dropped(DropReason::Rerank { error: e.to_string() }),
    };
    if chosen == input.response {
        return dropped(DropReason::IdenticalCitations);
    }
    let pair = match PreferencePair::new(
        input.doc_id.clone(),
        input.query.clone(),
        chosen,
        input.response.clone(),
    ) {
        Ok(p) => p,
        Err(e) => return dropped(DropReason::Balancing { error: e.to_string() }),
    };
    match balance_lengths(pair, &input.ctx, cfg.window, record_seed(cfg.seed, &input.doc_id)) {
        Ok(pair) => PairOutcome::Emitted { pair, audit },
        Err(e) => dropped(DropReason::Balancing { error: e.to_string() }),
    }
}

/// Lazily builds pairs over a corpus; failed records are logged and yielded
/// as [`PairOutcome::Dropped`].
pub fn build_pref_dataset<'a, I, S, C, T>(
    corpus: I,
    scorer: &'a S,
    cfg: &'a PrefConfig,
    tokenizer: &'a T,
) -> impl Iterator<Item = PairOutcome> + 'a
where
    I: IntoIterator<Item = PrefInput<C>> + 'a,
    S: Scorer + ?Sized,
    C: CandidateSource + 'a,
    T: Tokenizer + ?Sized,
{
    corpus.into_iter().map(move |input| {
        let outcome = build_pair(&input, scorer, cfg, tokenizer);
        if let PairOutcome::Dropped { doc_id, reason } = &outcome {
            info!("dropped pair {doc_id}: {reason:?}");
        }
        outcome
    })
}

/// Coverage per statement, for audits.
pub fn coverage_profile(resp: &StructuredResponse, ctx: &SegmentedContext) -> BTreeMap<usize, usize> {
    resp.statements
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.citation.coverage(ctx)))
        .collect()
}
