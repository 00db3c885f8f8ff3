//! Best-of-N citation reranking on a worked example.
//!
//! The statement is supported by sentences 302, 303 and 306. The directly
//! sampled citation misses 302; reranking three more candidates recovers the
//! full support. The last two candidates cite the same part of the support,
//! so they tie and keep their sampling order.

use citereward::rerank::{ranking, rerank_statement, RerankConfig};
use citereward::{CitationSequence, SegmentedContext, Statement, SupportOracle, WhitespaceCjkTokenizer};

fn main() {
    let texts: Vec<String> = (0..320).map(|i| format!("Context sentence number {i}.")).collect();
    let ctx = SegmentedContext::from_texts(&texts).unwrap();
    let statement = "The ministry reported the figures in March.";
    let oracle = SupportOracle::from_sets(1.0, [(statement, [302, 303, 306])]).unwrap();

    let original = Statement::new(statement, CitationSequence::parse("[303-303][305-306]").unwrap());
    let pool: Vec<String> = ["[302-303][306-306]", "[303-304][308-308][310-311]", "[303-303][309-309][311-311]"]
        .map(String::from)
        .to_vec();

    let out = rerank_statement(
        &oracle,
        &ctx,
        "When were the figures reported?",
        "",
        &original,
        &pool,
        &RerankConfig::default(),
        &WhitespaceCjkTokenizer,
    )
    .unwrap();

    for (rank, i) in ranking(&out.audit).into_iter().enumerate() {
        let c = &out.audit[i];
        let tag = if i == 0 { "original" } else { "candidate" };
        println!("#{} {:<28} reward {:>5.1}  ({tag} {i})", rank + 1, c.raw, c.score.unwrap());
    }
    println!("selected: {}", out.best);
}
