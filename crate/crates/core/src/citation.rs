//! The tagged statement/citation response format.
//!
//! ```text
//! <statement>Some claim.<cite>[302-303][306-306]</cite></statement>
//! ```
//!
//! Spans are inclusive sentence-id intervals. Overlapping and duplicate spans
//! are legal; they collapse only when resolved to a set of sentence ids.

use std::collections::BTreeSet;
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmenter::SegmentedContext;

const STATEMENT_OPEN: &str = "<statement>";
const STATEMENT_CLOSE: &str = "</statement>";
const CITE_OPEN: &str = "<cite>";
const CITE_CLOSE: &str = "</cite>";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed tag at byte {offset}: {reason}")]
    MalformedTag { offset: usize, reason: &'static str },
    #[error("malformed citation span `{span}`")]
    MalformedSpan { span: String },
    #[error("stray text outside statement tags at byte {offset}")]
    StrayText { offset: usize },
}

/// Inclusive interval of sentence ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "(usize, usize)", into = "(usize, usize)")]
pub struct CitationSpan {
    start: usize,
    end: usize,
}

impl CitationSpan {
    pub fn new(start: usize, end: usize) -> Result<Self, ParseError> {
        if start > end {
            return Err(ParseError::MalformedSpan {
                span: format!("[{start}-{end}]"),
            });
        }
        Ok(Self { start, end })
    }

    pub fn single(id: usize) -> Self {
        Self { start: id, end: id }
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    /// Number of ids the span names, ignoring the context bounds.
    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, id: usize) -> bool {
        (self.start..=self.end).contains(&id)
    }
}

impl TryFrom<(usize, usize)> for CitationSpan {
    type Error = ParseError;

    fn try_from((a, b): (usize, usize)) -> Result<Self, Self::Error> {
        Self::new(a, b)
    }
}

impl From<CitationSpan> for (usize, usize) {
    fn from(s: CitationSpan) -> Self {
        (s.start, s.end)
    }
}

impl fmt::Display for CitationSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}-{}]", self.start, self.end)
    }
}

/// Spans in authored order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CitationSequence {
    pub spans: Vec<CitationSpan>,
}

impl CitationSequence {
    pub fn new(spans: Vec<CitationSpan>) -> Self {
        Self { spans }
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Parses the body of a `<cite>` tag, e.g. `[1-2][5-5]`.
    pub fn parse(body: &str) -> Result<Self, ParseError> {
        let body = body.trim();
        if body.is_empty() {
            return Ok(Self::default());
        }
        let inner = body
            .strip_prefix('[')
            .and_then(|b| b.strip_suffix(']'))
            .ok_or_else(|| ParseError::MalformedSpan {
                span: body.to_string(),
            })?;
        let spans = inner
            .split("][")
            .map(parse_span)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { spans })
    }

    /// The ids cited, clamped to `ctx`. Out-of-range portions are dropped
    /// with a warning.
    pub fn resolve(&self, ctx: &SegmentedContext) -> BTreeSet<usize> {
        let (ids, dropped) = self.resolve_within(ctx.len());
        if dropped > 0 {
            warn!(
                "citation {self} names {dropped} id(s) outside a {}-sentence context",
                ctx.len()
            );
        }
        ids
    }

    /// Resolves against a context of `len` sentences, returning the clamped
    /// set and how many cited positions were dropped.
    pub fn resolve_within(&self, len: usize) -> (BTreeSet<usize>, usize) {
        let mut ids = BTreeSet::new();
        let mut dropped = 0;
        for span in &self.spans {
            if span.end >= len {
                dropped += span.end - span.start.max(len) + 1;
            }
            if span.start < len {
                ids.extend(span.start..=span.end.min(len - 1));
            }
        }
        (ids, dropped)
    }

    /// Number of distinct sentences cited.
    pub fn coverage(&self, ctx: &SegmentedContext) -> usize {
        self.resolve_within(ctx.len()).0.len()
    }
}

fn parse_span(s: &str) -> Result<CitationSpan, ParseError> {
    let bad = || ParseError::MalformedSpan {
        span: format!("[{s}]"),
    };
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    let digits = |t: &str| !t.is_empty() && t.bytes().all(|c| c.is_ascii_digit());
    if !digits(a) || !digits(b) {
        return Err(bad());
    }
    let a = a.parse().map_err(|_| bad())?;
    let b = b.parse().map_err(|_| bad())?;
    CitationSpan::new(a, b).map_err(|_| bad())
}

impl fmt::Display for CitationSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for span in &self.spans {
            write!(f, "{span}")?;
        }
        Ok(())
    }
}

/// Resolved cited-id set of `seq` within `ctx`.
pub fn resolve_cited_sentences(seq: &CitationSequence, ctx: &SegmentedContext) -> BTreeSet<usize> {
    seq.resolve(ctx)
}

pub fn coverage(seq: &CitationSequence, ctx: &SegmentedContext) -> usize {
    seq.coverage(ctx)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub text: String,
    #[serde(rename = "spans")]
    pub citation: CitationSequence,
}

impl Statement {
    pub fn new(text: impl Into<String>, citation: CitationSequence) -> Self {
        Self {
            text: text.into(),
            citation,
        }
    }

    pub fn serialize_into(&self, out: &mut String) {
        out.push_str(STATEMENT_OPEN);
        out.push_str(&self.text);
        out.push_str(CITE_OPEN);
        out.push_str(&self.citation.to_string());
        out.push_str(CITE_CLOSE);
        out.push_str(STATEMENT_CLOSE);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StructuredResponse {
    pub statements: Vec<Statement>,
}

impl StructuredResponse {
    pub fn new(statements: Vec<Statement>) -> Self {
        Self { statements }
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    /// Serialized form of the first `n` statements: the conditioning history
    /// for statement `n`.
    pub fn prefix(&self, n: usize) -> String {
        let mut out = String::new();
        for s in &self.statements[..n.min(self.statements.len())] {
            s.serialize_into(&mut out);
        }
        out
    }
}

/// How text outside `<statement>` blocks is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StrayTextMode {
    /// Attach non-whitespace stray text as a zero-citation statement.
    #[default]
    Lenient,
    /// Reject stray text.
    Strict,
}

pub fn parse_response(raw: &str) -> Result<StructuredResponse, ParseError> {
    parse_response_with(raw, StrayTextMode::Lenient)
}

pub fn parse_response_with(raw: &str, mode: StrayTextMode) -> Result<StructuredResponse, ParseError> {
    let mut statements = Vec::new();
    let mut pos = 0;
    while pos < raw.len() {
        let rest = &raw[pos..];
        let Some(open) = rest.find(STATEMENT_OPEN) else {
            stray(&mut statements, rest, pos, mode)?;
            break;
        };
        stray(&mut statements, &rest[..open], pos, mode)?;
        let body_start = pos + open + STATEMENT_OPEN.len();
        let body_rest = &raw[body_start..];
        let close = body_rest
            .find(STATEMENT_CLOSE)
            .ok_or(ParseError::MalformedTag {
                offset: pos + open,
                reason: "unclosed <statement>",
            })?;
        let body = &body_rest[..close];
        if let Some(nested) = body.find(STATEMENT_OPEN) {
            return Err(ParseError::MalformedTag {
                offset: body_start + nested,
                reason: "nested <statement>",
            });
        }
        statements.push(parse_statement_body(body, body_start)?);
        pos = body_start + close + STATEMENT_CLOSE.len();
    }
    Ok(StructuredResponse { statements })
}

fn stray(
    statements: &mut Vec<Statement>,
    text: &str,
    offset: usize,
    mode: StrayTextMode,
) -> Result<(), ParseError> {
    for tag in [STATEMENT_CLOSE, CITE_OPEN, CITE_CLOSE] {
        if let Some(at) = text.find(tag) {
            return Err(ParseError::MalformedTag {
                offset: offset + at,
                reason: "tag outside <statement>",
            });
        }
    }
    if text.trim().is_empty() {
        return Ok(());
    }
    match mode {
        StrayTextMode::Strict => Err(ParseError::StrayText { offset }),
        StrayTextMode::Lenient => {
            statements.push(Statement::new(text, CitationSequence::default()));
            Ok(())
        }
    }
}

fn parse_statement_body(body: &str, offset: usize) -> Result<Statement, ParseError> {
    let Some(open) = body.find(CITE_OPEN) else {
        if body.contains(CITE_CLOSE) {
            return Err(ParseError::MalformedTag {
                offset,
                reason: "</cite> without <cite>",
            });
        }
        return Ok(Statement::new(body, CitationSequence::default()));
    };
    let text = &body[..open];
    if text.contains(CITE_CLOSE) {
        return Err(ParseError::MalformedTag {
            offset,
            reason: "</cite> before <cite>",
        });
    }
    let after = &body[open + CITE_OPEN.len()..];
    let close = after.find(CITE_CLOSE).ok_or(ParseError::MalformedTag {
        offset: offset + open,
        reason: "unclosed <cite>",
    })?;
    let tail = &after[close + CITE_CLOSE.len()..];
    if !tail.trim().is_empty() {
        return Err(ParseError::MalformedTag {
            offset: offset + open,
            reason: "text after </cite>",
        });
    }
    let cite_body = &after[..close];
    if cite_body.contains(CITE_OPEN) {
        return Err(ParseError::MalformedTag {
            offset: offset + open,
            reason: "nested <cite>",
        });
    }
    Ok(Statement::new(text, CitationSequence::parse(cite_body)?))
}

/// Canonical emission: spans in authored order, no whitespace inside `<cite>`.
pub fn serialize_response(resp: &StructuredResponse) -> String {
    resp.prefix(resp.statements.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(a: usize, b: usize) -> CitationSpan {
        CitationSpan::new(a, b).unwrap()
    }

    fn ctx(n: usize) -> SegmentedContext {
        let texts: Vec<String> = (0..n).map(|i| format!("s{i}.")).collect();
        SegmentedContext::from_texts(&texts).unwrap()
    }

    #[test]
    fn parses_two_spans() {
        let r = parse_response("<statement>X<cite>[302-303][306-306]</cite></statement>").unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.statements[0].text, "X");
        assert_eq!(r.statements[0].citation.spans, [span(302, 303), span(306, 306)]);
    }

    #[test]
    fn empty_cite() {
        let raw = "<statement>X<cite></cite></statement>";
        let r = parse_response(raw).unwrap();
        assert!(r.statements[0].citation.is_empty());
        assert_eq!(serialize_response(&r), raw);
    }

    #[test]
    fn single_sentence_span_form() {
        assert_eq!(CitationSequence::new(vec![span(5, 5)]).to_string(), "[5-5]");
    }

    #[test]
    fn span_errors() {
        for bad in ["[3-1]", "[a-2]", "[1-]", "[12]", "1-2", "[1-2]x", "[-1-2]", "[1-2] [3-3]"] {
            let raw = format!("<statement>X<cite>{bad}</cite></statement>");
            assert!(
                matches!(parse_response(&raw), Err(ParseError::MalformedSpan { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn huge_number_is_malformed_not_panic() {
        let raw = "<statement>X<cite>[1-99999999999999999999999]</cite></statement>";
        assert!(matches!(parse_response(raw), Err(ParseError::MalformedSpan { .. })));
    }

    #[test]
    fn tag_errors() {
        for bad in [
            "<statement>X<cite>[1-1]</cite>",
            "<statement>X<cite>[1-1]</statement>",
            "X</statement>",
            "<statement>a<statement>b</statement></statement>",
            "<statement>X<cite>[1-1]</cite>Y</statement>",
        ] {
            assert!(
                matches!(parse_response(bad), Err(ParseError::MalformedTag { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn stray_text_modes() {
        let raw = "Intro. <statement>X<cite>[1-1]</cite></statement>";
        let lenient = parse_response(raw).unwrap();
        assert_eq!(lenient.len(), 2);
        assert_eq!(lenient.statements[0].text, "Intro. ");
        assert!(lenient.statements[0].citation.is_empty());
        assert!(matches!(
            parse_response_with(raw, StrayTextMode::Strict),
            Err(ParseError::StrayText { offset: 0 })
        ));
        let ws = "  \n<statement>X<cite></cite></statement>\n";
        assert_eq!(parse_response_with(ws, StrayTextMode::Strict).unwrap().len(), 1);
    }

    #[test]
    fn statement_without_cite_tag() {
        let r = parse_response("<statement>plain</statement>").unwrap();
        assert_eq!(r.statements[0].text, "plain");
        assert!(r.statements[0].citation.is_empty());
    }

    #[test]
    fn resolve_examples() {
        let seq = CitationSequence::new(vec![span(302, 303), span(306, 306)]);
        let c = ctx(400);
        assert_eq!(seq.resolve(&c).into_iter().collect::<Vec<_>>(), [302, 303, 306]);
        assert_eq!(seq.coverage(&c), 3);

        let one = ctx(1);
        assert_eq!(
            CitationSequence::new(vec![span(0, 0)]).resolve(&one).into_iter().collect::<Vec<_>>(),
            [0]
        );

        let (ids, dropped) = CitationSequence::new(vec![span(398, 405)]).resolve_within(400);
        assert_eq!(ids.into_iter().collect::<Vec<_>>(), [398, 399]);
        assert_eq!(dropped, 6);

        let (ids, dropped) = CitationSequence::new(vec![span(500, 501)]).resolve_within(400);
        assert!(ids.is_empty());
        assert_eq!(dropped, 2);
    }

    #[test]
    fn coverage_set_semantics() {
        let c = ctx(10);
        assert_eq!(CitationSequence::default().coverage(&c), 0);
        assert_eq!(CitationSequence::new(vec![span(1, 3), span(2, 4)]).coverage(&c), 4);
    }

    #[test]
    fn prefix_is_history() {
        let r = parse_response(
            "<statement>A<cite>[1-1]</cite></statement><statement>B<cite></cite></statement>",
        )
        .unwrap();
        assert_eq!(r.prefix(0), "");
        assert_eq!(r.prefix(1), "<statement>A<cite>[1-1]</cite></statement>");
    }

    #[test]
    fn span_json_shape() {
        let s = Statement::new("t", CitationSequence::new(vec![span(1, 2)]));
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"{"text":"t","spans":[[1,2]]}"#);
        assert!(serde_json::from_str::<Statement>(r#"{"text":"t","spans":[[3,2]]}"#).is_err());
    }
}
