//! Batch driver: JSONL in, JSONL out, one manifest per run.
//!
//! Records are processed in chunks; each chunk is mapped in parallel on a
//! dedicated rayon pool and written in input order, so output bytes depend
//! only on the inputs and the resolved config, never on the worker count.
//!
//! Every output goes to `<path>.partial` first and is renamed once the whole
//! run succeeds. A failed run leaves the partial files and no manifest.

mod cli;
mod config;
mod io;
mod tasks;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::citation::{parse_response, Statement, StructuredResponse};
use crate::rerank::RerankError;
use crate::scorer::{HttpScorer, HttpScorerConfig, ScoreError, Scorer, SupportOracle, SupportOracleSpec};
use crate::segmenter::{segment, LanguageHint, SegmentedContext, SentenceUnit};

pub use cli::{main_with_args, Cli};
pub use config::{
    BalanceSection, ContextCiteSection, IoSection, PerturbSection, PipelineConfig, ScorerKind,
    ScorerSection, SegmentSection, SftSection, TruncationSection, ENV_PREFIX,
};
pub use io::{digest_file, partial_path, sibling, Artifact, FileDigest, Manifest, RunCounts};

/// Records mapped in parallel per batch.
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("backend error: {0}")]
    Backend(String),
}

impl PipelineError {
    /// Process exit code: 1 config, 2 input, 3 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Input(_) => 2,
            Self::Backend(_) => 3,
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Input(format!("{}: {e}", path.display()))
    }
}

impl From<ScoreError> for PipelineError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::BackendUnavailable(_) | ScoreError::BackendTimeout(_) => {
                Self::Backend(e.to_string())
            }
            ScoreError::InvalidRequest(_) | ScoreError::UnknownStatement(_) => {
                Self::Input(e.to_string())
            }
        }
    }
}

impl From<RerankError> for PipelineError {
    fn from(e: RerankError) -> Self {
        match e {
            RerankError::AllScoringFailed(inner) => inner.into(),
            RerankError::Source(msg) => Self::Backend(format!("candidate source: {msg}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Segment,
    Reward,
    Rerank,
    BuildPrefs,
    Perturb,
    Contextcite,
    SftFilter,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::Segment => "segment",
            Self::Reward => "reward",
            Self::Rerank => "rerank",
            Self::BuildPrefs => "build-prefs",
            Self::Perturb => "perturb",
            Self::Contextcite => "contextcite",
            Self::SftFilter => "sft-filter",
        }
    }

    fn needs_scorer(self) -> bool {
        matches!(self, Self::Reward | Self::Rerank | Self::BuildPrefs | Self::Contextcite)
    }

    /// Suffix of the secondary output, if the task writes one.
    fn aux_suffix(self) -> Option<&'static str> {
        match self {
            Self::Rerank => Some("audit.jsonl"),
            Self::Contextcite => Some("weights.jsonl"),
            Self::BuildPrefs | Self::Perturb | Self::SftFilter => Some("dropped.jsonl"),
            Self::Segment | Self::Reward => None,
        }
    }
}

/// One corpus record. The context is given either as raw `text` or as
/// pre-segmented `sentences` (the output of `segment`); the response either
/// as a raw tagged string or as parsed `statements`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DocRecord {
    pub doc_id: String,
    pub text: Option<String>,
    pub sentences: Option<Vec<SentenceUnit>>,
    pub language: Option<LanguageHint>,
    pub query: String,
    pub response: Option<String>,
    pub statements: Option<Vec<Statement>>,
    /// Pre-sampled candidate citations, one list per statement.
    pub candidates: Option<Vec<Vec<String>>>,
}

impl DocRecord {
    pub fn context(&self, default_hint: LanguageHint) -> Result<SegmentedContext, PipelineError> {
        let bad = |m: String| PipelineError::Input(format!("doc `{}`: {m}", self.doc_id));
        match (&self.sentences, &self.text) {
            (Some(s), _) => SegmentedContext::from_sentences(s.clone()).map_err(|e| bad(e.to_string())),
            (None, Some(t)) => {
                segment(t, self.language.unwrap_or(default_hint)).map_err(|e| bad(e.to_string()))
            }
            (None, None) => Err(bad("neither `sentences` nor `text` given".into())),
        }
    }

    pub fn structured(&self) -> Result<StructuredResponse, PipelineError> {
        match (&self.statements, &self.response) {
            (Some(s), _) => Ok(StructuredResponse::new(s.clone())),
            (None, Some(r)) => parse_response(r)
                .map_err(|e| PipelineError::Input(format!("doc `{}`: {e}", self.doc_id))),
            (None, None) => Err(PipelineError::Input(format!(
                "doc `{}`: neither `statements` nor `response` given",
                self.doc_id
            ))),
        }
    }
}

/// What one input record produced.
#[derive(Debug, Default)]
pub(crate) struct RecordOut {
    pub primary: Vec<String>,
    pub aux: Vec<String>,
    pub dropped: bool,
}

pub(crate) fn build_scorer(cfg: &ScorerSection) -> Result<Arc<dyn Scorer>, PipelineError> {
    match cfg.kind {
        ScorerKind::Oracle => {
            let path = cfg.oracle_spec_path.as_ref().ok_or_else(|| {
                PipelineError::Config("scorer.kind = oracle requires scorer.oracle_spec_path".into())
            })?;
            let spec = SupportOracleSpec::from_path(path)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            let oracle = SupportOracle::new(spec).map_err(|e| PipelineError::Config(e.to_string()))?;
            Ok(Arc::new(oracle))
        }
        ScorerKind::Http => {
            let endpoint = cfg.endpoint.as_ref().ok_or_else(|| {
                PipelineError::Config("scorer.kind = http requires scorer.endpoint".into())
            })?;
            let mut http = HttpScorerConfig::new(endpoint.clone());
            http.auth_token = cfg.auth_token.clone();
            http.timeout = Duration::from_secs_f64(cfg.timeout_secs);
            http.max_retries = cfg.max_retries;
            http.max_in_flight = cfg.max_in_flight.max(1);
            Ok(Arc::new(HttpScorer::new(http)))
        }
    }
}

fn required_path(p: &Option<PathBuf>, what: &str) -> Result<PathBuf, PipelineError> {
    p.clone()
        .ok_or_else(|| PipelineError::Config(format!("io.{what} is required")))
}

/// Runs one task end to end and returns its manifest.
pub fn run(task: Task, cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    cfg.validate()?;
    let input = required_path(&cfg.io.input, "input")?;
    let output = required_path(&cfg.io.output, "output")?;
    if !input.is_file() {
        return Err(PipelineError::Input(format!("input file {} not found", input.display())));
    }
    let scorer = if task.needs_scorer() {
        Some(build_scorer(&cfg.scorer)?)
    } else {
        None
    };
    let processor = tasks::Processor::new(task, cfg, scorer)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;

    let mut inputs = vec![digest_file(&input)?];
    inputs.extend(processor.extra_inputs().iter().map(|p| digest_file(p)).collect::<Result<Vec<_>, _>>()?);

    let mut primary = Artifact::create(&output)?;
    let aux_path = task
        .aux_suffix()
        .map(|suffix| cfg.io.aux_output.clone().unwrap_or_else(|| sibling(&output, suffix)));
    let mut aux = aux_path.as_deref().map(Artifact::create).transpose()?;
    let mut counts = RunCounts::default();

    let mut lines = io::jsonl_lines(&input)?.peekable();
    let plain_text = task == Task::Segment && !is_jsonl(&input);
    if plain_text {
        let text = std::fs::read_to_string(&input).map_err(|e| PipelineError::io(&input, e))?;
        let doc_id = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let rec = DocRecord {
            doc_id,
            text: Some(text),
            ..DocRecord::default()
        };
        counts.read = 1;
        let out = processor.process(rec)?;
        emit(out, &mut primary, aux.as_mut(), &mut counts)?;
    } else {
        while lines.peek().is_some() {
            let chunk: Vec<(usize, String)> = lines.by_ref().take(CHUNK).collect::<Result<_, _>>()?;
            counts.read += chunk.len();
            let results: Vec<Result<RecordOut, PipelineError>> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|(line_no, line)| processor.process_line(*line_no, line, &input))
                    .collect()
            });
            for r in results {
                emit(r?, &mut primary, aux.as_mut(), &mut counts)?;
            }
        }
    }

    let mut outputs = vec![primary.commit()?];
    if let Some(a) = aux {
        outputs.push(a.commit()?);
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: task.name().to_string(),
        config_hash: cfg.hash(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        seed: cfg.seed,
        inputs,
        outputs,
        counts,
    };
    manifest.write(&sibling(&output, "manifest.json"))?;
    info!(
        "{}: read {} records, wrote {}, dropped {}",
        task.name(),
        manifest.counts.read,
        manifest.counts.written,
        manifest.counts.dropped
    );
    Ok(manifest)
}

fn emit(
    out: RecordOut,
    primary: &mut Artifact,
    mut aux: Option<&mut Artifact>,
    counts: &mut RunCounts,
) -> Result<(), PipelineError> {
    if out.dropped {
        counts.dropped += 1;
    }
    counts.written += out.primary.len();
    for line in &out.primary {
        primary.write_line(line)?;
    }
    for line in &out.aux {
        match aux.as_deref_mut() {
            Some(a) => a.write_line(line)?,
            None => warn!("discarding secondary output line"),
        }
    }
    Ok(())
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("ndjson") | Some("json")
    )
}
