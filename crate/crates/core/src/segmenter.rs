//! Sentence segmentation with stable integer identifiers.
//!
//! A document is split into [`SentenceUnit`]s whose ids are their positions
//! (`0..len`). Those ids are the citation indices the model sees as `<C{id}>`
//! tags, so they must never be renumbered once a context has been built.
//!
//! Splitting is rule based:
//!
//! * Latin terminals `.`, `!`, `?` (and `…`) end a sentence when followed by
//!   whitespace or end of input, after absorbing trailing closing quotes and
//!   brackets. A `.` does not split after a known abbreviation
//!   ([`ABBREVIATIONS`]) or when the next word starts with a lowercase letter.
//! * CJK terminals `。！？；` (plus the full-width `!?;` forms) always end a
//!   sentence, again absorbing closing quotes.
//! * A blank line (paragraph break) always ends a sentence.
//!
//! Overlong sentences are never split mid-sentence.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Lowercased abbreviations (without the trailing dot) that never end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "vs", "etc", "e.g", "i.e", "cf", "al",
    "fig", "figs", "no", "nos", "vol", "pp", "p", "ed", "eds", "inc", "ltd", "co", "corp", "dept",
    "approx", "est", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov",
    "dec", "u.s", "u.k", "gen", "gov", "sen", "rep", "rev", "col", "lt", "sgt", "capt",
];

const LATIN_TERMINALS: &[char] = &['.', '!', '?', '…'];
const CJK_TERMINALS: &[char] = &['。', '！', '？', '；', '!', '?', ';'];
const CLOSERS: &[char] = &[
    '"', '\'', ')', ']', '}', '”', '’', '」', '』', '）', '】', '》', '〉',
];

/// Which terminal set the splitter applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageHint {
    Latin,
    Cjk,
    /// Both terminal sets.
    #[default]
    Auto,
}

impl LanguageHint {
    fn latin(self) -> bool {
        matches!(self, Self::Latin | Self::Auto)
    }

    fn cjk(self) -> bool {
        matches!(self, Self::Cjk | Self::Auto)
    }
}

impl std::str::FromStr for LanguageHint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "latin" => Ok(Self::Latin),
            "cjk" => Ok(Self::Cjk),
            "auto" => Ok(Self::Auto),
            other => Err(format!("unknown language hint `{other}`")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("document is empty or whitespace-only")]
    EmptyDocument,
    #[error("sentence list is empty")]
    NoSentences,
    #[error("sentence at position {position} has id {id}")]
    NonContiguousId { position: usize, id: usize },
    #[error("sentence {0} has empty text")]
    EmptySentence(usize),
}

/// One sentence of a segmented document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceUnit {
    pub id: usize,
    pub text: String,
    /// Byte offsets `[start, end)` into the source document.
    pub start: usize,
    pub end: usize,
}

/// An ordered, non-empty list of sentences whose ids equal their positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawContext")]
pub struct SegmentedContext {
    sentences: Vec<SentenceUnit>,
    source_digest: String,
}

#[derive(Deserialize)]
struct RawContext {
    sentences: Vec<SentenceUnit>,
    source_digest: String,
}

impl TryFrom<RawContext> for SegmentedContext {
    type Error = SegmentError;

    fn try_from(raw: RawContext) -> Result<Self, Self::Error> {
        let mut ctx = Self::from_sentences(raw.sentences)?;
        ctx.source_digest = raw.source_digest;
        Ok(ctx)
    }
}

impl SegmentedContext {
    /// Builds a context from pre-split sentences, validating the id invariant.
    ///
    /// The digest is computed over the sentence texts joined by [`Self::joined`].
    pub fn from_sentences(sentences: Vec<SentenceUnit>) -> Result<Self, SegmentError> {
        if sentences.is_empty() {
            return Err(SegmentError::NoSentences);
        }
        for (position, s) in sentences.iter().enumerate() {
            if s.id != position {
                return Err(SegmentError::NonContiguousId { position, id: s.id });
            }
            if s.text.trim().is_empty() {
                return Err(SegmentError::EmptySentence(position));
            }
        }
        let mut ctx = Self {
            sentences,
            source_digest: String::new(),
        };
        ctx.source_digest = digest(&ctx.joined());
        Ok(ctx)
    }

    /// Convenience constructor from plain texts; spans are laid out as in [`Self::joined`].
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self, SegmentError> {
        let mut offset = 0;
        let mut sentences = Vec::with_capacity(texts.len());
        for (id, t) in texts.iter().enumerate() {
            let text = t.as_ref().to_string();
            let start = offset;
            let end = start + text.len();
            offset = end + JOIN_SEPARATOR.len();
            sentences.push(SentenceUnit {
                id,
                text,
                start,
                end,
            });
        }
        Self::from_sentences(sentences)
    }

    pub fn sentences(&self) -> &[SentenceUnit] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentence(&self, id: usize) -> Option<&SentenceUnit> {
        self.sentences.get(id)
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    /// All ids `0..len`.
    pub fn all_ids(&self) -> std::ops::Range<usize> {
        0..self.sentences.len()
    }

    /// Sentence texts joined by a paragraph break. Re-segmenting this string
    /// yields the same sentence texts.
    pub fn joined(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(JOIN_SEPARATOR)
    }
}

const JOIN_SEPARATOR: &str = "\n\n";

fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF   // kana
        | 0x3400..=0x4DBF // ext A
        | 0x4E00..=0x9FFF // unified ideographs
        | 0xF900..=0xFAFF
        | 0xAC00..=0xD7AF // hangul
        | 0x20000..=0x2FA1F)
}

pub(crate) fn is_cjk_char(c: char) -> bool {
    is_cjk(c)
}

/// Splits `document` into sentences.
pub fn segment(document: &str, hint: LanguageHint) -> Result<SegmentedContext, SegmentError> {
    if document.trim().is_empty() {
        return Err(SegmentError::EmptyDocument);
    }
    let chars: Vec<(usize, char)> = document.char_indices().collect();
    let mut boundaries = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        if c == '\n' && is_paragraph_break(&chars, i) {
            boundaries.push(chars[i].0);
            i += 1;
            continue;
        }
        let cjk_hit = hint.cjk() && CJK_TERMINALS.contains(&c);
        let latin_hit = hint.latin() && LATIN_TERMINALS.contains(&c);
        if !(cjk_hit || latin_hit) {
            i += 1;
            continue;
        }
        // absorb repeated terminals and closers: `?!`, `."`, `。」`
        let mut j = i + 1;
        while j < chars.len()
            && (CLOSERS.contains(&chars[j].1)
                || (hint.latin() && LATIN_TERMINALS.contains(&chars[j].1))
                || (hint.cjk() && CJK_TERMINALS.contains(&chars[j].1)))
        {
            j += 1;
        }
        let cut = chars.get(j).map_or(document.len(), |&(b, _)| b);
        let split = if cjk_hit {
            true
        } else {
            latin_boundary(document, &chars, i, j)
        };
        if split {
            boundaries.push(cut);
        }
        i = j;
    }
    boundaries.push(document.len());

    let mut sentences = Vec::new();
    let mut start = 0;
    for b in boundaries {
        if b <= start {
            continue;
        }
        let piece = &document[start..b];
        let lead = piece.len() - piece.trim_start().len();
        let trimmed = piece.trim();
        if !trimmed.is_empty() {
            let s = start + lead;
            sentences.push(SentenceUnit {
                id: sentences.len(),
                text: trimmed.to_string(),
                start: s,
                end: s + trimmed.len(),
            });
        }
        start = b;
    }
    let mut ctx = SegmentedContext::from_sentences(sentences)?;
    ctx.source_digest = digest(document);
    Ok(ctx)
}

fn is_paragraph_break(chars: &[(usize, char)], i: usize) -> bool {
    chars[i + 1..]
        .iter()
        .take_while(|(_, c)| c.is_whitespace())
        .any(|&(_, c)| c == '\n')
}

/// Decides whether a latin terminal run `chars[i..j]` ends a sentence.
fn latin_boundary(doc: &str, chars: &[(usize, char)], i: usize, j: usize) -> bool {
    // must be followed by whitespace or end of input
    match chars.get(j) {
        None => return true,
        Some(&(_, c)) if !c.is_whitespace() => return false,
        _ => {}
    }
    if chars[i].1 == '.' && j == i + 1 {
        let word_start = chars[..i]
            .iter()
            .rposition(|&(_, c)| c.is_whitespace() || CLOSERS.contains(&c) || c == '(')
            .map_or(0, |p| p + 1);
        let word = &doc[chars.get(word_start).map_or(0, |p| p.0)..chars[i].0];
        let word = word.trim_start_matches(['"', '\'', '“', '‘', '(', '[']);
        if ABBREVIATIONS.contains(&word.to_lowercase().as_str()) {
            return false;
        }
    }
    let next = chars[j..].iter().map(|&(_, c)| c).find(|c| !c.is_whitespace());
    !matches!(next, Some(c) if c.is_lowercase())
}

/// Renders sentences as `<C{id}>{text}`, separated by single spaces.
pub fn render_prompt_context(ctx: &SegmentedContext) -> String {
    render_sentences(ctx.sentences().iter())
}

/// Renders a subset of sentences in their original order with their original
/// ids. Ids not present in `ctx` are ignored.
pub fn render_retained<I>(ctx: &SegmentedContext, retained: I) -> String
where
    I: IntoIterator<Item = usize>,
{
    let mut ids: Vec<usize> = retained.into_iter().filter(|&i| i < ctx.len()).collect();
    ids.sort_unstable();
    ids.dedup();
    render_sentences(ids.into_iter().map(|i| &ctx.sentences()[i]))
}

fn render_sentences<'a>(sentences: impl Iterator<Item = &'a SentenceUnit>) -> String {
    let mut out = String::new();
    for s in sentences {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str("<C");
        out.push_str(&s.id.to_string());
        out.push('>');
        out.push_str(&s.text);
    }
    out
}
