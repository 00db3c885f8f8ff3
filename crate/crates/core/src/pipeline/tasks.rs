//! Per-record work for each task.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::citation::{serialize_response, CitationSequence, StructuredResponse};
use crate::contextcite::{
    extract_citations, fit_surrogate, sample_ablations, AttributedResponse, AttributedStatement,
    FitError,
};
use crate::prefs::{
    build_pair, perturb_citations, plan_truncation, record_seed, DropReason, PairOutcome,
    PrefConfig, PrefInput, Shift,
};
use crate::rerank::{rerank_response, CandidateRequest, CandidateSource, RerankError, SamplingSource, StatementAudit, StaticCandidates};
use crate::reward::{RewardBreakdown, StatementRewarder, WhitespaceCjkTokenizer};
use crate::scorer::Scorer;
use crate::segmenter::SentenceUnit;

use super::{DocRecord, PipelineConfig, PipelineError, RecordOut, Task};

/// Where candidates come from when a record carries none.
enum GlobalCandidates {
    None,
    File(HashMap<String, StaticCandidates>),
    Sampling(SamplingSource),
}

#[derive(Deserialize)]
struct CandidateLine {
    doc_id: String,
    candidates: Vec<Vec<String>>,
}

pub(super) struct Processor<'a> {
    task: Task,
    cfg: &'a PipelineConfig,
    scorer: Option<Arc<dyn Scorer>>,
    candidates: GlobalCandidates,
    candidate_file: Option<PathBuf>,
    tokenizer: WhitespaceCjkTokenizer,
}

/// Uses the record's own candidates, else the run-wide source.
struct RecordCandidates<'a> {
    own: Option<StaticCandidates>,
    global: &'a GlobalCandidates,
}

impl CandidateSource for RecordCandidates<'_> {
    fn candidates(&self, req: &CandidateRequest<'_>) -> Result<Vec<String>, RerankError> {
        if let Some(own) = &self.own {
            return own.candidates(req);
        }
        match self.global {
            GlobalCandidates::None => Ok(Vec::new()),
            GlobalCandidates::File(map) => Ok(map
                .get(req.doc_id)
                .map(|c| c.0.get(req.statement_index).cloned().unwrap_or_default())
                .unwrap_or_default()),
            GlobalCandidates::Sampling(s) => s.candidates(req),
        }
    }
}

#[derive(Serialize)]
struct SegmentOut<'a> {
    doc_id: &'a str,
    sentences: &'a [SentenceUnit],
}

#[derive(Serialize)]
struct RewardStatement<'a> {
    text: &'a str,
    spans: &'a CitationSequence,
    cited: Vec<usize>,
    reward: RewardBreakdown,
}

#[derive(Serialize)]
struct RewardOut<'a> {
    doc_id: &'a str,
    query: &'a str,
    statements: Vec<RewardStatement<'a>>,
}

#[derive(Serialize)]
struct ResponseOut<'a> {
    doc_id: &'a str,
    query: &'a str,
    statements: &'a StructuredResponse,
    response: String,
}

#[derive(Serialize)]
struct AuditOut<'a> {
    doc_id: &'a str,
    statements: &'a [StatementAudit],
}

#[derive(Serialize)]
struct DroppedOut<'a> {
    doc_id: &'a str,
    #[serde(flatten)]
    reason: DropReason,
}

#[derive(Serialize)]
struct PerturbMeta {
    seed: u64,
    shifts: Vec<Shift>,
}

#[derive(Serialize)]
struct PerturbOut<'a> {
    doc_id: &'a str,
    query: &'a str,
    chosen: String,
    rejected: String,
    meta: PerturbMeta,
}

#[derive(Serialize)]
struct WeightsOut<'a> {
    doc_id: &'a str,
    statement_index: usize,
    weights: &'a [f64],
    bias: f64,
    lambda: f64,
    n_samples: usize,
    iterations: usize,
    converged: bool,
}

#[derive(Serialize)]
struct SftOut<'a> {
    doc_id: &'a str,
    query: &'a str,
    response: String,
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("record serializes")
}

impl<'a> Processor<'a> {
    pub fn new(
        task: Task,
        cfg: &'a PipelineConfig,
        scorer: Option<Arc<dyn Scorer>>,
    ) -> Result<Self, PipelineError> {
        let mut candidate_file = None;
        let candidates = match (&cfg.io.candidates, task) {
            (Some(src), Task::Rerank | Task::BuildPrefs) => {
                if src.starts_with("http://") || src.starts_with("https://") {
                    GlobalCandidates::Sampling(SamplingSource::new(
                        src,
                        Duration::from_secs_f64(cfg.scorer.timeout_secs),
                    ))
                } else {
                    let path = PathBuf::from(src);
                    let map = load_candidates(&path)?;
                    candidate_file = Some(path);
                    GlobalCandidates::File(map)
                }
            }
            _ => GlobalCandidates::None,
        };
        Ok(Self {
            task,
            cfg,
            scorer,
            candidates,
            candidate_file,
            tokenizer: WhitespaceCjkTokenizer,
        })
    }

    pub fn extra_inputs(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = self.candidate_file.iter().cloned().collect();
        if self.task.needs_scorer() {
            v.extend(self.cfg.scorer.oracle_spec_path.iter().cloned());
        }
        v
    }

    pub fn process_line(&self, line_no: usize, line: &str, path: &Path) -> Result<RecordOut, PipelineError> {
        let bad = |e: serde_json::Error| PipelineError::Input(format!("{}:{line_no}: {e}", path.display()));
        if self.task == Task::SftFilter {
            let rec: AttributedResponse = serde_json::from_str(line).map_err(bad)?;
            return Ok(self.sft_filter(rec));
        }
        let rec: DocRecord = serde_json::from_str(line).map_err(bad)?;
        self.process(rec)
    }

    pub fn process(&self, rec: DocRecord) -> Result<RecordOut, PipelineError> {
        match self.task {
            Task::Segment => self.segment(rec),
            Task::Reward => self.reward(rec),
            Task::Rerank => self.rerank(rec),
            Task::BuildPrefs => self.build_prefs(rec),
            Task::Perturb => self.perturb(rec),
            Task::Contextcite => self.contextcite(rec),
            Task::SftFilter => Err(PipelineError::Input("sft-filter expects attributed records".into())),
        }
    }

    fn scorer(&self) -> &dyn Scorer {
        self.scorer.as_deref().expect("scorer built for scoring tasks")
    }

    fn record_candidates<'b>(&'b self, rec: &DocRecord) -> Result<RecordCandidates<'b>, PipelineError> {
        let own = rec.candidates.clone().map(StaticCandidates);
        if own.is_none() && matches!(self.candidates, GlobalCandidates::None) {
            return Err(PipelineError::Input(format!(
                "doc `{}`: no candidates in record and no io.candidates source",
                rec.doc_id
            )));
        }
        Ok(RecordCandidates {
            own,
            global: &self.candidates,
        })
    }

    fn segment(&self, rec: DocRecord) -> Result<RecordOut, PipelineError> {
        let ctx = rec.context(self.cfg.segment.language)?;
        Ok(RecordOut {
            primary: vec![json(&SegmentOut {
                doc_id: &rec.doc_id,
                sentences: ctx.sentences(),
            })],
            ..RecordOut::default()
        })
    }

    fn reward(&self, rec: DocRecord) -> Result<RecordOut, PipelineError> {
        let ctx = rec.context(self.cfg.segment.language)?;
        let resp = rec.structured()?;
        let mut statements = Vec::with_capacity(resp.len());
        for (i, st) in resp.statements.iter().enumerate() {
            let history = resp.prefix(i);
            let cited: BTreeSet<usize> = st.citation.resolve(&ctx);
            let rewarder = StatementRewarder::new(self.scorer(), &ctx, &rec.query, &history, &st.text);
            let reward = rewarder.reward(&cited)?;
            statements.push(RewardStatement {
                text: &st.text,
                spans: &st.citation,
                cited: cited.into_iter().collect(),
                reward,
            });
        }
        Ok(RecordOut {
            primary: vec![json(&RewardOut {
                doc_id: &rec.doc_id,
                query: &rec.query,
                statements,
            })],
            ..RecordOut::default()
        })
    }

    fn rerank(&self, rec: DocRecord) -> Result<RecordOut, PipelineError> {
        let ctx = rec.context(self.cfg.segment.language)?;
        let resp = rec.structured()?;
        let source = self.record_candidates(&rec)?;
        let (best, audit) = rerank_response(
            self.scorer(),
            &ctx,
            &rec.doc_id,
            &rec.query,
            &resp,
            &source,
            &self.cfg.rerank,
            &self.tokenizer,
        )?;
        Ok(RecordOut {
            primary: vec![json(&ResponseOut {
                doc_id: &rec.doc_id,
                query: &rec.query,
                statements: &best,
                response: serialize_response(&best),
            })],
            aux: vec![json(&AuditOut {
                doc_id: &rec.doc_id,
                statements: &audit,
            })],
            dropped: false,
        })
    }

    fn dropped(doc_id: &str, reason: DropReason) -> RecordOut {
        warn!("dropped `{doc_id}`: {reason:?}");
        RecordOut {
            primary: Vec::new(),
            aux: vec![json(&DroppedOut { doc_id, reason })],
            dropped: true,
        }
    }

    fn build_prefs(&self, rec: DocRecord) -> Result<RecordOut, PipelineError> {
        let ctx = rec.context(self.cfg.segment.language)?;
        let response = rec.structured()?;
        let candidates = self.record_candidates(&rec)?;
        let input = PrefInput {
            doc_id: rec.doc_id.clone(),
            ctx,
            query: rec.query.clone(),
            response,
            candidates,
        };
        let pcfg = PrefConfig {
            rerank: self.cfg.rerank.clone(),
            window: self.cfg.balance.window(),
            seed: self.cfg.seed,
        };
        match build_pair(&input, self.scorer(), &pcfg, &self.tokenizer) {
            PairOutcome::Dropped { doc_id, reason } => Ok(Self::dropped(&doc_id, reason)),
            PairOutcome::Emitted { pair, .. } => {
                let anchors: BTreeSet<usize> = pair
                    .chosen
                    .statements
                    .iter()
                    .chain(&pair.rejected.statements)
                    .flat_map(|s| s.citation.resolve(&input.ctx))
                    .collect();
                let plan = match plan_truncation(
                    &input.ctx,
                    &anchors,
                    self.cfg.truncation.budget_tokens,
                    &self.tokenizer,
                ) {
                    Ok(p) => p,
                    Err(e) => {
                        return Ok(Self::dropped(
                            &rec.doc_id,
                            DropReason::Truncation { error: e.to_string() },
                        ))
                    }
                };
                let mut record = pair.to_record();
                record.meta.truncated_ids = plan.removed_ids;
                Ok(RecordOut {
                    primary: vec![json(&record)],
                    ..RecordOut::default()
                })
            }
        }
    }

    fn perturb(&self, rec: DocRecord) -> Result<RecordOut, PipelineError> {
        let ctx = rec.context(self.cfg.segment.language)?;
        let resp = rec.structured()?;
        if resp.statements.iter().all(|s| s.citation.is_empty()) {
            return Ok(Self::dropped(&rec.doc_id, DropReason::IdenticalCitations));
        }
        let seed = record_seed(self.cfg.seed, &rec.doc_id);
        let range = (self.cfg.perturb.shift_min, self.cfg.perturb.shift_max);
        let (perturbed, shifts) = perturb_citations(&resp, &ctx, range, seed);
        if perturbed == resp {
            return Ok(Self::dropped(&rec.doc_id, DropReason::IdenticalCitations));
        }
        Ok(RecordOut {
            primary: vec![json(&PerturbOut {
                doc_id: &rec.doc_id,
                query: &rec.query,
                chosen: serialize_response(&resp),
                rejected: serialize_response(&perturbed),
                meta: PerturbMeta { seed, shifts },
            })],
            ..RecordOut::default()
        })
    }

    fn contextcite(&self, rec: DocRecord) -> Result<RecordOut, PipelineError> {
        let ctx = rec.context(self.cfg.segment.language)?;
        let resp = rec.structured()?;
        let cc = &self.cfg.contextcite;
        let mut statements = Vec::with_capacity(resp.len());
        let mut aux = Vec::with_capacity(resp.len());
        for (i, st) in resp.statements.iter().enumerate() {
            let history = resp.prefix(i);
            let seed = record_seed(self.cfg.seed, &format!("{}#{i}", rec.doc_id));
            let samples = sample_ablations(
                self.scorer(),
                &ctx,
                &rec.query,
                &history,
                &st.text,
                cc.calls,
                seed,
                cc.epsilon,
            )?;
            let (model, converged) = match fit_surrogate(&samples, cc.lambda) {
                Ok(m) => (m, true),
                Err(FitError::DidNotConverge { best }) => {
                    warn!("doc `{}` statement {i}: lasso did not converge", rec.doc_id);
                    (best, false)
                }
                Err(e) => {
                    return Err(PipelineError::Input(format!("doc `{}` statement {i}: {e}", rec.doc_id)))
                }
            };
            let ex = extract_citations(&model, &self.cfg.extraction);
            aux.push(json(&WeightsOut {
                doc_id: &rec.doc_id,
                statement_index: i,
                weights: &model.weights,
                bias: model.bias,
                lambda: model.lambda,
                n_samples: model.n_samples,
                iterations: model.iterations,
                converged,
            }));
            statements.push(AttributedStatement {
                text: st.text.clone(),
                spans: ex.citation,
                thresholded_ids: ex.thresholded_ids,
            });
        }
        let out = AttributedResponse {
            doc_id: rec.doc_id,
            query: rec.query,
            statements,
        };
        Ok(RecordOut {
            primary: vec![json(&out)],
            aux,
            dropped: false,
        })
    }

    fn sft_filter(&self, rec: AttributedResponse) -> RecordOut {
        let ratio = rec.empty_ratio();
        if ratio > self.cfg.sft.threshold {
            #[derive(Serialize)]
            struct Filtered<'b> {
                doc_id: &'b str,
                empty_ratio: f64,
            }
            return RecordOut {
                primary: Vec::new(),
                aux: vec![json(&Filtered {
                    doc_id: &rec.doc_id,
                    empty_ratio: ratio,
                })],
                dropped: true,
            };
        }
        RecordOut {
            primary: vec![json(&SftOut {
                doc_id: &rec.doc_id,
                query: &rec.query,
                response: serialize_response(&rec.to_structured()),
            })],
            ..RecordOut::default()
        }
    }
}

fn load_candidates(path: &Path) -> Result<HashMap<String, StaticCandidates>, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Input(format!("candidate file {} not found", path.display())));
    }
    let mut map = HashMap::new();
    for item in super::io::jsonl_lines(path)? {
        let (n, line) = item?;
        let c: CandidateLine = serde_json::from_str(&line)
            .map_err(|e| PipelineError::Input(format!("{}:{n}: {e}", path.display())))?;
        map.insert(c.doc_id, StaticCandidates(c.candidates));
    }
    Ok(map)
}
