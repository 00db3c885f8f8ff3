//! Surrogate-model attribution from random context ablations.
//!
//! Sample `n` random keep/drop masks over the context sentences, score the
//! statement under each, map probabilities through a logit, and fit a sparse
//! linear model `g(v) ≈ w·v + b` with Lasso. The weights are per-sentence
//! attribution scores; [`extract_citations`] turns them into citation spans.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::citation::{CitationSequence, CitationSpan};
use crate::scorer::{ScoreError, ScoreRequest, Scorer};
use crate::segmenter::SegmentedContext;

/// Keep (`true`) / drop (`false`) mask over context sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AblationVector(pub Vec<bool>);

impl AblationVector {
    pub fn retained(&self) -> BTreeSet<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &keep)| keep.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSample {
    pub v: AblationVector,
    pub g_value: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-9;

/// `logit(p)` after clamping `p` into `[eps, 1 - eps]`.
pub fn clamped_logit(logprob: f64, eps: f64) -> f64 {
    let p = logprob.exp().clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

/// Scores `statement` under `n` uniformly random ablations of `ctx`.
#[allow(clippy::too_many_arguments)]
pub fn sample_ablations<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &SegmentedContext,
    query: &str,
    history: &str,
    statement: &str,
    n: usize,
    seed: u64,
    eps: f64,
) -> Result<Vec<AblationSample>, ScoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<AblationVector> = (0..n)
        .map(|_| AblationVector((0..ctx.len()).map(|_| rng.gen_bool(0.5)).collect()))
        .collect();
    masks
        .into_iter()
        .map(|v| {
            let req = ScoreRequest::new(ctx, v.retained(), query, history, statement)?;
            let lp = scorer.score(&req)?.value();
            Ok(AblationSample {
                g_value: clamped_logit(lp, eps),
                v,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub n_samples: usize,
    pub iterations: usize,
}

impl SurrogateModel {
    pub fn predict(&self, v: &AblationVector) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(&v.0)
                .filter(|(_, &keep)| keep)
                .map(|(w, _)| w)
                .sum::<f64>()
    }

    pub fn support(&self) -> BTreeSet<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter_map(|(i, &w)| (w != 0.0).then_some(i))
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples have inconsistent ablation lengths")]
    RaggedSamples,
    #[error("lambda must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("non-finite target value")]
    NonFinite,
    #[error("coordinate descent did not converge in {} iterations", .best.iterations)]
    DidNotConverge { best: SurrogateModel },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Stop when no coefficient moves by more than this in a sweep.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

pub fn fit_surrogate(samples: &[AblationSample], lambda: f64) -> Result<SurrogateModel, FitError> {
    fit_surrogate_with(samples, lambda, LassoOptions::default())
}

/// Minimises `(1/n) Σ (g_i - w·v_i - b)² + λ‖w‖₁` by cyclic coordinate
/// descent on centered data; the intercept is unpenalised.
pub fn fit_surrogate_with(
    samples: &[AblationSample],
    lambda: f64,
    opts: LassoOptions,
) -> Result<SurrogateModel, FitError> {
    let n = samples.len();
    if n < 2 {
        return Err(FitError::TooFewSamples(n));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(FitError::BadLambda(lambda));
    }
    let p = samples[0].v.0.len();
    if samples.iter().any(|s| s.v.0.len() != p) {
        return Err(FitError::RaggedSamples);
    }
    if samples.iter().any(|s| !s.g_value.is_finite()) {
        return Err(FitError::NonFinite);
    }

    let mut x = Array2::<f64>::zeros((n, p));
    for (i, s) in samples.iter().enumerate() {
        for (j, &keep) in s.v.0.iter().enumerate() {
            x[[i, j]] = if keep { 1.0 } else { 0.0 };
        }
    }
    let y = Array1::from_iter(samples.iter().map(|s| s.g_value));
    let x_mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let y_mean = y.mean().expect("n >= 2");
    let xc = &x - &x_mean;
    let yc = &y - y_mean;
    let nf = n as f64;
    let col_sq: Vec<f64> = xc.axis_iter(Axis(1)).map(|c| c.dot(&c) / nf).collect();

    let mut w = Array1::<f64>::zeros(p);
    let mut resid = yc.clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut max_change = 0.0f64;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = xc.column(j);
            let old = w[j];
            // rho = (1/n) x_j · (r + x_j w_j)
            let rho = col.dot(&resid) / nf + col_sq[j] * old;
            let new = soft_threshold(rho, lambda / 2.0) / col_sq[j];
            let diff = new - old;
            if diff != 0.0 {
                resid.scaled_add(-diff, &col);
                w[j] = new;
                max_change = max_change.max(diff.abs());
            }
        }
        if max_change < opts.tol {
            converged = true;
            break;
        }
    }

    let bias = y_mean - x_mean.dot(&w);
    let model = SurrogateModel {
        weights: w.to_vec(),
        bias,
        lambda,
        n_samples: n,
        iterations,
    };
    if converged {
        Ok(model)
    } else {
        Err(FitError::DidNotConverge { best: model })
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Minimum weight for a sentence to be citable.
    pub t: f64,
    /// Cumulative softmax mass at which span selection stops.
    pub p: f64,
    /// Maximum number of spans.
    pub k: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            t: 1.5,
            p: 0.7,
            k: 4,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(format!("extraction.p must be in (0, 1], got {}", self.p));
        }
        if self.k == 0 {
            return Err("extraction.k must be >= 1".into());
        }
        if !self.t.is_finite() {
            return Err("extraction.t must be finite".into());
        }
        Ok(())
    }
}

/// A merged run of above-threshold sentences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub span: CitationSpan,
    /// Maximum member weight.
    pub score: f64,
    /// Softmax-normalised score across all surviving spans.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub citation: CitationSequence,
    /// Ids that passed the threshold, before top-p / top-k.
    pub thresholded_ids: Vec<usize>,
    /// Every merged span with its normalised mass, in document order.
    pub spans: Vec<ScoredSpan>,
}

/// Threshold, merge adjacent ids, softmax, top-p, top-k. Selected spans are
/// emitted in document order. The highest-mass span is always included when
/// any span survives the threshold.
pub fn extract_citations(model: &SurrogateModel, cfg: &ExtractionConfig) -> Extraction {
    let thresholded_ids: Vec<usize> = model
        .weights
        .iter()
        .enumerate()
        .filter_map(|(i, &w)| (w >= cfg.t).then_some(i))
        .collect();

    let mut spans: Vec<ScoredSpan> = Vec::new();
    for &id in &thresholded_ids {
        let w = model.weights[id];
        match spans.last_mut() {
            Some(last) if last.span.end() + 1 == id => {
                last.span = CitationSpan::new(last.span.start(), id).expect("ordered");
                last.score = last.score.max(w);
            }
            _ => spans.push(ScoredSpan {
                span: CitationSpan::single(id),
                score: w,
                mass: 0.0,
            }),
        }
    }
    let max = spans.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = spans.iter().map(|s| (s.score - max).exp()).sum();
    for s in &mut spans {
        s.mass = (s.score - max).exp() / z;
    }

    let mut order: Vec<usize> = (0..spans.len()).collect();
    // descending mass; document order among equals
    order.sort_by(|&a, &b| spans[b].mass.total_cmp(&spans[a].mass).then(a.cmp(&b)));
    let mut picked = Vec::new();
    let mut cumulative = 0.0;
    for i in order {
        picked.push(i);
        cumulative += spans[i].mass;
        if cumulative >= cfg.p {
            break;
        }
    }
    // picked is already in descending mass order
    picked.truncate(cfg.k);
    picked.sort_unstable();

    Extraction {
        citation: CitationSequence::new(picked.iter().map(|&i| spans[i].span).collect()),
        thresholded_ids,
        spans,
    }
}

/// One statement of an attributed response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedStatement {
    pub text: String,
    pub spans: CitationSequence,
    pub thresholded_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedResponse {
    pub doc_id: String,
    pub query: String,
    pub statements: Vec<AttributedStatement>,
}

impl AttributedResponse {
    /// Fraction of statements with no sentence above the threshold.
    pub fn empty_ratio(&self) -> f64 {
        if self.statements.is_empty() {
            return 0.0;
        }
        let empty = self
            .statements
            .iter()
            .filter(|s| s.thresholded_ids.is_empty())
            .count();
        empty as f64 / self.statements.len() as f64
    }

    pub fn to_structured(&self) -> crate::citation::StructuredResponse {
        crate::citation::StructuredResponse::new(
            self.statements
                .iter()
                .map(|s| crate::citation::Statement::new(s.text.clone(), s.spans.clone()))
                .collect(),
        )
    }
}

pub const DEFAULT_SFT_THRESHOLD: f64 = 0.30;

/// Keeps examples whose share of statements without any above-threshold
/// sentence is at most `threshold`.
pub fn sft_filter<I>(dataset: I, threshold: f64) -> impl Iterator<Item = AttributedResponse>
where
    I: IntoIterator<Item = AttributedResponse>,
{
    dataset.into_iter().filter(move |r| r.empty_ratio() <= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::SupportOracle;

    fn model(weights: Vec<f64>) -> SurrogateModel {
        SurrogateModel {
            weights,
            bias: 0.0,
            lambda: 0.0,
            n_samples: 0,
            iterations: 0,
        }
    }

    #[test]
    fn logit_clamping() {
        assert_eq!(clamped_logit(0.5f64.ln(), 1e-9), 0.0);
        let top = clamped_logit(0.0, 1e-9);
        assert!((top - ((1.0 - 1e-9) / 1e-9f64).ln()).abs() < 1e-6);
        let bottom = clamped_logit(-1e6, 1e-9);
        assert!((bottom + top).abs() < 1e-6);
    }

    #[test]
    fn sample_count_and_determinism() {
        let c = SegmentedContext::from_texts(&["a.", "b.", "c.", "d."]).unwrap();
        let o = SupportOracle::from_sets(1.0, [("r", [1, 2])]).unwrap();
        let a = sample_ablations(&o, &c, "q", "", "r", 32, 9, DEFAULT_EPSILON).unwrap();
        let b = sample_ablations(&o, &c, "q", "", "r", 32, 9, DEFAULT_EPSILON).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, b);
    }

    #[test]
    fn all_below_threshold_is_empty() {
        let e = extract_citations(&model(vec![1.0, 0.2, 1.49]), &ExtractionConfig::default());
        assert!(e.citation.is_empty());
        assert!(e.thresholded_ids.is_empty());
    }

    #[test]
    fn single_span_always_selected() {
        let cfg = ExtractionConfig { p: 1.0, ..Default::default() };
        let e = extract_citations(&model(vec![0.0, 3.0, 0.0]), &cfg);
        assert_eq!(e.citation.to_string(), "[1-1]");
    }

    #[test]
    fn worked_example() {
        let mut w = vec![0.0; 10];
        w[1] = 2.0;
        w[2] = 1.8;
        w[7] = 1.6;
        let e = extract_citations(&model(w), &ExtractionConfig::default());
        assert_eq!(e.citation.to_string(), "[1-2][7-7]");
        assert_eq!(e.spans.len(), 2);
        assert!((e.spans[0].mass - 0.598_687_660_112_452_3).abs() < 1e-12);
        assert!((e.spans[1].mass - 0.401_312_339_887_547_7).abs() < 1e-12);
    }

    #[test]
    fn top_k_limits() {
        let w = vec![2.0, 0.0, 2.0, 0.0, 2.0, 0.0, 2.0, 0.0, 2.0, 0.0, 2.0];
        let cfg = ExtractionConfig { p: 1.0, k: 4, ..Default::default() };
        let e = extract_citations(&model(w), &cfg);
        assert_eq!(e.citation.spans.len(), 4);
        assert_eq!(e.citation.to_string(), "[0-0][2-2][4-4][6-6]");
    }

    #[test]
    fn large_lambda_zeroes_weights() {
        let c = SegmentedContext::from_texts(&["a.", "b.", "c."]).unwrap();
        let o = SupportOracle::from_sets(1.0, [("r", [1])]).unwrap();
        let s = sample_ablations(&o, &c, "q", "", "r", 16, 1, DEFAULT_EPSILON).unwrap();
        let m = fit_surrogate(&s, 1e6).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        let mean = s.iter().map(|x| x.g_value).sum::<f64>() / s.len() as f64;
        assert!((m.bias - mean).abs() < 1e-12);
    }

    #[test]
    fn fit_errors() {
        assert_eq!(fit_surrogate(&[], 0.1).unwrap_err(), FitError::TooFewSamples(0));
        let s = AblationSample { v: AblationVector(vec![true]), g_value: 1.0 };
        let t = AblationSample { v: AblationVector(vec![true, false]), g_value: 1.0 };
        assert_eq!(fit_surrogate(&[s.clone(), t], 0.1).unwrap_err(), FitError::RaggedSamples);
        assert!(matches!(fit_surrogate(&[s.clone(), s], -1.0), Err(FitError::BadLambda(_))));
    }

    #[test]
    fn did_not_converge_reports_iterate() {
        let samples: Vec<AblationSample> = (0..8)
            .map(|i| AblationSample {
                v: AblationVector(vec![i % 2 == 0, i % 3 == 0, i % 4 < 2]),
                g_value: i as f64,
            })
            .collect();
        let err = fit_surrogate_with(&samples, 0.0, LassoOptions { tol: 0.0, max_iter: 3 }).unwrap_err();
        match err {
            FitError::DidNotConverge { best } => assert_eq!(best.iterations, 3),
            other => panic!("{other:?}"),
        }
    }

    fn attributed(empty: usize, total: usize) -> AttributedResponse {
        AttributedResponse {
            doc_id: "d".into(),
            query: "q".into(),
            statements: (0..total)
                .map(|i| AttributedStatement {
                    text: format!("s{i}"),
                    spans: CitationSequence::default(),
                    thresholded_ids: if i < empty { vec![] } else { vec![i] },
                })
                .collect(),
        }
    }

    #[test]
    fn sft_boundary() {
        assert_eq!(sft_filter([attributed(3, 10)], 0.30).count(), 1);
        assert_eq!(sft_filter([attributed(4, 10)], 0.30).count(), 0);
    }
}
