//! Citation-quality tooling built on context ablation.
//!
//! * [`segmenter`] splits documents into sentences with stable ids.
//! * [`citation`] parses and emits the `<statement>…<cite>[a-b]</cite></statement>` format.
//! * [`scorer`] is the language-model boundary (support oracle and HTTP client).
//! * [`reward`] computes necessity/sufficiency rewards by removing or isolating cited sentences.
//! * [`rerank`] picks the best of N citation candidates per statement.
//! * [`prefs`] builds length-balanced preference pairs, perturbed citations and truncation plans.
//! * [`contextcite`] fits a sparse surrogate over random ablations and extracts citations from it.
//! * [`pipeline`] ties everything to JSONL files and drives the `citereward` binary.

pub mod citation;
pub mod contextcite;
pub mod pipeline;
pub mod prefs;
pub mod rerank;
pub mod reward;
pub mod scorer;
pub mod segmenter;

pub use citation::{
    coverage, parse_response, parse_response_with, resolve_cited_sentences, serialize_response,
    CitationSequence, CitationSpan, ParseError, Statement, StrayTextMode, StructuredResponse,
};
pub use reward::{RewardBreakdown, StatementRewarder, Tokenizer, WhitespaceCjkTokenizer};
pub use scorer::{
    scoring_prompt, HttpScorer, HttpScorerConfig, LogProb, ScoreError, ScoreRequest, Scorer, SupportOracle,
};
pub use segmenter::{segment, render_prompt_context, LanguageHint, SegmentedContext, SentenceUnit};
