//! Property tests for the module invariants.

use std::collections::BTreeSet;

use citereward::contextcite::{extract_citations, ExtractionConfig, SurrogateModel};
use citereward::prefs::{
    balance_lengths, perturb_citations, plan_truncation, EditOp, PreferencePair, TruncationError, Window,
};
use citereward::rerank::{dedup_candidates, rerank_statement, Candidate, RerankConfig};
use citereward::reward::StatementRewarder;
use citereward::segmenter::render_retained;
use citereward::{
    parse_response, render_prompt_context, segment, serialize_response, CitationSequence, CitationSpan,
    LanguageHint, ScoreRequest, Scorer, SegmentedContext, Statement, StructuredResponse, SupportOracle,
    WhitespaceCjkTokenizer,
};
use proptest::prelude::*;

fn ctx_from_lengths(lengths: &[usize]) -> SegmentedContext {
    let texts: Vec<String> = lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let words: Vec<String> = (0..n).map(|j| format!("w{i}x{j}")).collect();
            format!("{}.", words.join(" "))
        })
        .collect();
    SegmentedContext::from_texts(&texts).unwrap()
}

fn arb_span(max_id: usize) -> impl Strategy<Value = CitationSpan> {
    (0..=max_id, 0..=4usize).prop_map(move |(a, w)| CitationSpan::new(a, (a + w).min(max_id)).unwrap())
}

fn arb_seq(max_id: usize, max_spans: usize) -> impl Strategy<Value = CitationSequence> {
    prop::collection::vec(arb_span(max_id), 0..=max_spans).prop_map(CitationSequence::new)
}

fn arb_text() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ,.;:!?'\"()\\-\u{4e00}-\u{4e20}]{1,40}"
}

fn arb_response(max_id: usize) -> impl Strategy<Value = StructuredResponse> {
    prop::collection::vec((arb_text(), arb_seq(max_id, 4)), 0..6).prop_map(|v| {
        StructuredResponse::new(v.into_iter().map(|(t, c)| Statement::new(t, c)).collect())
    })
}

fn arb_sentence() -> impl Strategy<Value = String> {
    prop_oneof![
        "[A-Z][a-z]{1,8}( [a-z]{1,8}){0,6}[.!?]",
        "[A-Z][a-z]{1,6}( [a-z]{1,6}){0,3}, e\\.g\\. [a-z]{2,6} [a-z]{2,6}\\.",
        "[\u{4e00}-\u{4e80}]{2,12}[。！？]",
    ]
}

fn arb_document() -> impl Strategy<Value = String> {
    prop::collection::vec((arb_sentence(), prop_oneof![Just(" "), Just("\n"), Just("\n\n"), Just("  ")]), 1..12)
        .prop_map(|parts| {
            let mut doc = String::new();
            for (s, sep) in parts {
                doc.push_str(&s);
                doc.push_str(sep);
            }
            doc
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    // ---------------------------------------------------------------- segmenter

    #[test]
    fn segment_ids_contiguous_and_tags_ordered(doc in arb_document()) {
        let ctx = segment(&doc, LanguageHint::Auto).unwrap();
        for (i, s) in ctx.sentences().iter().enumerate() {
            prop_assert_eq!(s.id, i);
            prop_assert!(!s.text.trim().is_empty());
            prop_assert_eq!(&doc[s.start..s.end], s.text.as_str());
        }
        let rendered = render_prompt_context(&ctx);
        let mut last = None;
        let mut count = 0;
        let mut rest = rendered.as_str();
        while let Some(at) = rest.find("<C") {
            let after = &rest[at + 2..];
            let close = after.find('>').unwrap();
            let id: usize = after[..close].parse().unwrap();
            prop_assert!(last.is_none_or(|l| id > l));
            last = Some(id);
            count += 1;
            rest = &after[close..];
        }
        prop_assert_eq!(count, ctx.len());
    }

    #[test]
    fn segment_idempotent_on_joined(doc in arb_document()) {
        let ctx = segment(&doc, LanguageHint::Auto).unwrap();
        let again = segment(&ctx.joined(), LanguageHint::Auto).unwrap();
        let a: Vec<&str> = ctx.sentences().iter().map(|s| s.text.as_str()).collect();
        let b: Vec<&str> = again.sentences().iter().map(|s| s.text.as_str()).collect();
        prop_assert_eq!(a, b);
    }

    // ---------------------------------------------------------------- citation format

    #[test]
    fn response_roundtrip(resp in arb_response(400)) {
        let s = serialize_response(&resp);
        prop_assert_eq!(parse_response(&s).unwrap(), resp);
    }

    #[test]
    fn sequence_string_roundtrip(seq in arb_seq(1000, 6)) {
        let s = seq.to_string();
        prop_assert_eq!(CitationSequence::parse(&s).unwrap().to_string(), s);
    }

    #[test]
    fn parse_never_panics(raw in "(<statement>|</statement>|<cite>|</cite>|\\[|\\]|-|[0-9]{1,3}|[a-z ]{1,5}){0,30}") {
        let _ = parse_response(&raw);
    }

    #[test]
    fn parse_never_panics_on_arbitrary_bytes(raw in ".{0,200}") {
        let _ = parse_response(&raw);
        let _ = CitationSequence::parse(&raw);
    }

    #[test]
    fn resolved_ids_within_context(len in 1usize..30, seq in arb_seq(60, 5)) {
        let ctx = ctx_from_lengths(&vec![1; len]);
        let ids = seq.resolve(&ctx);
        prop_assert!(ids.iter().all(|&i| i < len));
        prop_assert!(seq.coverage(&ctx) <= len);
    }

    // ---------------------------------------------------------------- scorer and reward

    #[test]
    fn oracle_is_set_difference(
        len in 1usize..16,
        support in prop::collection::btree_set(0usize..16, 0..6),
        retained in prop::collection::btree_set(0usize..16, 0..16),
        alpha in 0.1f64..5.0,
    ) {
        let ctx = ctx_from_lengths(&vec![2; len]);
        let support: BTreeSet<usize> = support.into_iter().filter(|&i| i < len).collect();
        let retained: BTreeSet<usize> = retained.into_iter().filter(|&i| i < len).collect();
        let oracle = SupportOracle::from_sets(alpha, [("t", support.clone())]).unwrap();
        let req = ScoreRequest::new(&ctx, retained.clone(), "q", "", "t").unwrap();
        let got = oracle.score(&req).unwrap().value();
        let expected = -alpha * support.difference(&retained).count() as f64;
        prop_assert!((got - expected).abs() < 1e-12);
        prop_assert_eq!(got, oracle.score(&req).unwrap().value());
    }

    #[test]
    fn full_retention_renders_whole_context(len in 1usize..20) {
        let ctx = ctx_from_lengths(&vec![3; len]);
        let req = ScoreRequest::new(&ctx, ctx.all_ids().collect(), "q", "", "t").unwrap();
        prop_assert_eq!(req.rendered_context(), render_prompt_context(&ctx));
        prop_assert_eq!(render_retained(&ctx, ctx.all_ids()), render_prompt_context(&ctx));
    }

    #[test]
    fn reward_decomposes_and_is_monotone(
        len in 2usize..20,
        support in prop::collection::btree_set(0usize..20, 1..5),
        cited in prop::collection::btree_set(0usize..20, 0..8),
        extra in 0usize..20,
    ) {
        let ctx = ctx_from_lengths(&vec![2; len]);
        let support: BTreeSet<usize> = support.into_iter().filter(|&i| i < len).collect();
        let cited: BTreeSet<usize> = cited.into_iter().filter(|&i| i < len).collect();
        let extra = extra % len;
        let oracle = SupportOracle::from_sets(1.0, [("r", support.clone())]).unwrap();
        let rw = StatementRewarder::new(&oracle, &ctx, "q", "", "r");
        let r = rw.reward(&cited).unwrap();
        prop_assert!((r.reward - (r.prob_drop + r.prob_hold)).abs() <= 1e-9);
        prop_assert_eq!(r.reward, r.logp_only - r.logp_without);

        let mut grown = cited.clone();
        grown.insert(extra);
        let r2 = rw.reward(&grown).unwrap();
        if cited.contains(&extra) {
            prop_assert_eq!(r2.reward, r.reward);
        } else if support.contains(&extra) {
            prop_assert!(r2.reward >= r.reward);
        } else {
            prop_assert!(r2.reward <= r.reward);
        }

        let fresh = oracle
            .score(&ScoreRequest::new(&ctx, ctx.all_ids().collect(), "q", "", "r").unwrap())
            .unwrap()
            .value();
        prop_assert_eq!(rw.logp_full().unwrap(), fresh);
    }

    // ---------------------------------------------------------------- rerank

    #[test]
    fn rerank_invariants(
        lengths in prop::collection::vec(1usize..30, 4..14),
        support in prop::collection::btree_set(0usize..14, 1..4),
        original in arb_seq(13, 3),
        pool in prop::collection::vec(arb_seq(13, 3), 0..10),
        cap in 1usize..60,
    ) {
        let ctx = ctx_from_lengths(&lengths);
        let support: BTreeSet<usize> = support.into_iter().filter(|&i| i < ctx.len()).collect();
        let oracle = SupportOracle::from_sets(1.0, [("claim", support)]).unwrap();
        let st = Statement::new("claim", original.clone());
        let raws: Vec<String> = pool.iter().map(|s| s.to_string()).collect();
        let cfg = RerankConfig { l_max_tokens: cap, ..RerankConfig::default() };
        let out = rerank_statement(&oracle, &ctx, "q", "", &st, &raws, &cfg, &WhitespaceCjkTokenizer).unwrap();

        match out.selected {
            Some(i) => {
                let best = out.audit[i].score.unwrap();
                for c in out.audit.iter().filter(|c| c.valid) {
                    prop_assert!(best >= c.score.unwrap());
                }
                prop_assert_eq!(Some(&out.best), out.audit[i].seq.as_ref());
            }
            None => {
                prop_assert!(out.fell_back);
                prop_assert!(out.audit.iter().all(|c| !c.valid));
                prop_assert_eq!(&out.best, &original);
            }
        }
    }

    #[test]
    fn dedup_idempotent(pool in prop::collection::vec(arb_seq(9, 3), 0..12)) {
        let ctx = ctx_from_lengths(&[2; 10]);
        let cands: Vec<Candidate> = pool.iter().map(|s| Candidate::parse(&s.to_string(), &ctx)).collect();
        let once = dedup_candidates(cands);
        let twice = dedup_candidates(once.clone());
        prop_assert_eq!(once, twice);
    }

    // ---------------------------------------------------------------- preference data

    #[test]
    fn balancing_invariants(
        len in 12usize..60,
        stmts in prop::collection::vec((arb_seq(59, 3), arb_seq(59, 3)), 1..5),
        seed in any::<u64>(),
    ) {
        let ctx = ctx_from_lengths(&vec![2; len]);
        let mk = |pick: fn(&(CitationSequence, CitationSequence)) -> &CitationSequence| {
            StructuredResponse::new(
                stmts.iter().enumerate().map(|(i, p)| Statement::new(format!("s{i}"), pick(p).clone())).collect(),
            )
        };
        let chosen = mk(|p| &p.0);
        let rejected = mk(|p| &p.1);
        let pair = PreferencePair::new("d", "q", chosen.clone(), rejected.clone()).unwrap();
        let Ok(out) = balance_lengths(pair.clone(), &ctx, Window::default(), seed) else {
            return Ok(());
        };
        prop_assert!(out.is_balanced(&ctx));
        prop_assert_eq!(&out.chosen, &chosen);
        for (i, (c, r)) in out.chosen.statements.iter().zip(&out.rejected.statements).enumerate() {
            prop_assert_eq!(&c.text, &r.text);
            prop_assert_eq!(c.citation.coverage(&ctx), r.citation.coverage(&ctx));
            let orig = rejected.statements[i].citation.resolve(&ctx);
            let anchors = if orig.is_empty() { chosen.statements[i].citation.resolve(&ctx) } else { orig.clone() };
            for e in out.balancing_log.iter().filter(|e| e.statement == i && e.op == EditOp::Insert) {
                let id = e.span.start();
                prop_assert_eq!(e.span.width(), 1);
                prop_assert!(!orig.contains(&id));
                prop_assert!(anchors.iter().any(|&a| (5..=10).contains(&a.abs_diff(id))));
            }
        }
        let again = balance_lengths(pair, &ctx, Window::default(), seed).unwrap();
        prop_assert_eq!(again, out);
    }

    #[test]
    fn perturbation_invariants(len in 1usize..50, resp in arb_response(49), seed in any::<u64>()) {
        let ctx = ctx_from_lengths(&vec![1; len]);
        let resp = StructuredResponse::new(
            resp.statements
                .into_iter()
                .map(|s| {
                    let spans = s.citation.spans.iter()
                        .filter(|sp| sp.end() < len)
                        .copied()
                        .collect();
                    Statement::new(s.text, CitationSequence::new(spans))
                })
                .collect(),
        );
        let (out, shifts) = perturb_citations(&resp, &ctx, (3, 10), seed);
        prop_assert_eq!(out.len(), resp.len());
        for (a, b) in resp.statements.iter().zip(&out.statements) {
            prop_assert_eq!(&a.text, &b.text);
            prop_assert_eq!(a.citation.spans.len(), b.citation.spans.len());
        }
        for s in &shifts {
            prop_assert!((3..=10).contains(&s.delta.unsigned_abs()));
            prop_assert!(s.after.end() < len);
            if s.before.width() <= len {
                prop_assert_eq!(s.after.width(), s.before.width());
            }
        }
    }

    #[test]
    fn truncation_invariants(
        lengths in prop::collection::vec(1usize..40, 1..40),
        anchors in prop::collection::btree_set(0usize..40, 0..4),
        budget in 1usize..400,
    ) {
        let ctx = ctx_from_lengths(&lengths);
        let anchors: BTreeSet<usize> = anchors.into_iter().filter(|&a| a < ctx.len()).collect();
        match plan_truncation(&ctx, &anchors, budget, &WhitespaceCjkTokenizer) {
            Ok(plan) => {
                prop_assert!(plan.tokens_after <= budget);
                prop_assert!(plan.removed_ids.iter().all(|id| !anchors.contains(id)));
                let kept: usize = plan.retained_ids(&ctx).iter().map(|&i| lengths[i]).sum();
                prop_assert_eq!(kept, plan.tokens_after);
            }
            Err(TruncationError::AnchorsExceedBudget { anchor_tokens, .. }) => {
                prop_assert!(anchor_tokens > budget);
            }
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    // ---------------------------------------------------------------- extraction

    #[test]
    fn extraction_invariants(
        weights in prop::collection::vec(-3.0f64..6.0, 1..30),
        t in 0.0f64..3.0,
        p in 0.05f64..1.0,
        k in 1usize..6,
    ) {
        let model = SurrogateModel { weights: weights.clone(), bias: 0.0, lambda: 0.0, n_samples: 0, iterations: 0 };
        let cfg = ExtractionConfig { t, p, k };
        let ex = extract_citations(&model, &cfg);
        if ex.spans.is_empty() {
            prop_assert!(ex.citation.is_empty());
            return Ok(());
        }
        let total: f64 = ex.spans.iter().map(|s| s.mass).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(ex.citation.spans.len() <= k);
        prop_assert!(!ex.citation.is_empty());
        let picked_mass: f64 = ex.spans.iter().filter(|s| ex.citation.spans.contains(&s.span)).map(|s| s.mass).sum();
        prop_assert!(picked_mass >= p - 1e-12 || ex.citation.spans.len() == k);
        for w in ex.spans.windows(2) {
            prop_assert!(w[0].span.end() + 1 < w[1].span.start());
        }
        for s in &ex.spans {
            prop_assert!(weights[s.span.start()..=s.span.end()].iter().all(|&w| w >= t));
            if s.span.start() > 0 {
                prop_assert!(weights[s.span.start() - 1] < t);
            }
            if s.span.end() + 1 < weights.len() {
                prop_assert!(weights[s.span.end() + 1] < t);
            }
        }
        for w in ex.citation.spans.windows(2) {
            prop_assert!(w[0].start() < w[1].start());
        }
    }
}
