//! Context-ablation rewards.
//!
//! For a statement `r` with cited set `E` over context `C`:
//!
//! ```text
//! prob_drop = log p(r | C)     - log p(r | C \ E)
//! prob_hold = log p(r | E)     - log p(r | C)
//! reward    = prob_drop + prob_hold = log p(r | E) - log p(r | C \ E)
//! ```
//!
//! Query and response history stay in the conditioning for every term. Either
//! component may be negative; nothing is clamped.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::scorer::{ScoreError, ScoreRequest, Scorer};
use crate::segmenter::{is_cjk_char, SegmentedContext};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub prob_drop: f64,
    pub prob_hold: f64,
    pub reward: f64,
    pub logp_full: f64,
    pub logp_without: f64,
    pub logp_only: f64,
}

impl RewardBreakdown {
    pub fn from_logprobs(logp_full: f64, logp_without: f64, logp_only: f64) -> Self {
        Self {
            prob_drop: logp_full - logp_without,
            prob_hold: logp_only - logp_full,
            reward: logp_only - logp_without,
            logp_full,
            logp_without,
            logp_only,
        }
    }
}

/// Scoring inputs shared by every candidate citation of one statement.
///
/// Holds the full-context log probability once computed, so that `N`
/// candidates cost `2N + 1` scorer calls instead of `3N`. The cache is
/// initialised at most once and is safe to read from many threads.
pub struct StatementRewarder<'a, S: ?Sized> {
    scorer: &'a S,
    ctx: &'a SegmentedContext,
    query: &'a str,
    history: &'a str,
    statement: &'a str,
    full: OnceLock<f64>,
}

impl<'a, S: Scorer + ?Sized> StatementRewarder<'a, S> {
    pub fn new(
        scorer: &'a S,
        ctx: &'a SegmentedContext,
        query: &'a str,
        history: &'a str,
        statement: &'a str,
    ) -> Self {
        Self {
            scorer,
            ctx,
            query,
            history,
            statement,
            full: OnceLock::new(),
        }
    }

    fn logp(&self, retained: BTreeSet<usize>) -> Result<f64, ScoreError> {
        let req = ScoreRequest::new(self.ctx, retained, self.query, self.history, self.statement)?;
        Ok(self.scorer.score(&req)?.value())
    }

    /// `log p(r | C)`, cached after the first successful call.
    pub fn logp_full(&self) -> Result<f64, ScoreError> {
        if let Some(v) = self.full.get() {
            return Ok(*v);
        }
        let v = self.logp(self.ctx.all_ids().collect())?;
        Ok(*self.full.get_or_init(|| v))
    }

    /// `log p(r | C \ E)`.
    pub fn logp_without(&self, cited: &BTreeSet<usize>) -> Result<f64, ScoreError> {
        self.check(cited)?;
        self.logp(self.ctx.all_ids().filter(|i| !cited.contains(i)).collect())
    }

    /// `log p(r | E)`.
    pub fn logp_only(&self, cited: &BTreeSet<usize>) -> Result<f64, ScoreError> {
        self.check(cited)?;
        self.logp(cited.clone())
    }

    fn check(&self, cited: &BTreeSet<usize>) -> Result<(), ScoreError> {
        match cited.iter().next_back() {
            Some(&max) if max >= self.ctx.len() => Err(ScoreError::InvalidRequest(format!(
                "cited id {max} outside a {}-sentence context",
                self.ctx.len()
            ))),
            _ => Ok(()),
        }
    }

    pub fn prob_drop(&self, cited: &BTreeSet<usize>) -> Result<f64, ScoreError> {
        Ok(self.logp_full()? - self.logp_without(cited)?)
    }

    pub fn prob_hold(&self, cited: &BTreeSet<usize>) -> Result<f64, ScoreError> {
        Ok(self.logp_only(cited)? - self.logp_full()?)
    }

    pub fn reward(&self, cited: &BTreeSet<usize>) -> Result<RewardBreakdown, ScoreError> {
        let full = self.logp_full()?;
        let without = self.logp_without(cited)?;
        let only = self.logp_only(cited)?;
        Ok(RewardBreakdown::from_logprobs(full, without, only))
    }
}

pub fn prob_drop<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &SegmentedContext,
    query: &str,
    history: &str,
    statement: &str,
    cited: &BTreeSet<usize>,
) -> Result<f64, ScoreError> {
    StatementRewarder::new(scorer, ctx, query, history, statement).prob_drop(cited)
}

pub fn prob_hold<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &SegmentedContext,
    query: &str,
    history: &str,
    statement: &str,
    cited: &BTreeSet<usize>,
) -> Result<f64, ScoreError> {
    StatementRewarder::new(scorer, ctx, query, history, statement).prob_hold(cited)
}

pub fn reward<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &SegmentedContext,
    query: &str,
    history: &str,
    statement: &str,
    cited: &BTreeSet<usize>,
) -> Result<RewardBreakdown, ScoreError> {
    StatementRewarder::new(scorer, ctx, query, history, statement).reward(cited)
}

/// Token counter used for the citation length cap.
pub trait Tokenizer: Send + Sync {
    fn count_tokens(&self, text: &str) -> usize;
}

/// Approximate tokenizer: every CJK character is one token, every other
/// maximal run of non-whitespace, non-CJK characters is one token.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCjkTokenizer;

impl Tokenizer for WhitespaceCjkTokenizer {
    fn count_tokens(&self, text: &str) -> usize {
        let mut count = 0;
        let mut in_word = false;
        for c in text.chars() {
            if is_cjk_char(c) {
                count += 1;
                in_word = false;
            } else if c.is_whitespace() {
                in_word = false;
            } else if !in_word {
                count += 1;
                in_word = true;
            }
        }
        count
    }
}

pub fn count_tokens<T: Tokenizer + ?Sized>(tokenizer: &T, text: &str) -> usize {
    tokenizer.count_tokens(text)
}

/// Total tokens of the given sentences.
pub fn count_cited_tokens<T: Tokenizer + ?Sized>(
    tokenizer: &T,
    ctx: &SegmentedContext,
    ids: &BTreeSet<usize>,
) -> usize {
    ids.iter()
        .filter_map(|&i| ctx.sentence(i))
        .map(|s| tokenizer.count_tokens(&s.text))
        .sum()
}
