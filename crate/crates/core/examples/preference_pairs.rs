//! Build a length-balanced preference pair from a reranked response.
//!
//! `chosen` carries the reranked citations and `rejected` the sampled ones.
//! Balancing edits the rejected side until both cite the same number of
//! sentences, so length alone cannot separate them.

use citereward::prefs::{build_pair, PairOutcome, PrefConfig, PrefInput};
use citereward::rerank::StaticCandidates;
use citereward::{
    CitationSequence, SegmentedContext, Statement, StructuredResponse, SupportOracle, WhitespaceCjkTokenizer,
};

fn main() {
    let texts: Vec<String> = (0..60).map(|i| format!("Fact number {i} about the harbour.")).collect();
    let ctx = SegmentedContext::from_texts(&texts).unwrap();
    let statements = ["The harbour was dredged in 1990.", "Traffic doubled afterwards."];
    let oracle = SupportOracle::from_sets(1.0, [(statements[0], vec![20, 21, 22, 23]), (statements[1], vec![40])]).unwrap();

    let sampled = StructuredResponse::new(vec![
        Statement::new(statements[0], CitationSequence::parse("[21-21]").unwrap()),
        Statement::new(statements[1], CitationSequence::parse("[37-38]").unwrap()),
    ]);
    let candidates = StaticCandidates(vec![
        vec!["[20-23]".into(), "[20-21]".into()],
        vec!["[40-40]".into(), "[38-41]".into()],
    ]);
    let input = PrefInput {
        doc_id: "harbour".into(),
        ctx,
        query: "What happened to the harbour?".into(),
        response: sampled,
        candidates,
    };
    let cfg = PrefConfig {
        seed: 7,
        ..PrefConfig::default()
    };

    match build_pair(&input, &oracle, &cfg, &WhitespaceCjkTokenizer) {
        PairOutcome::Emitted { pair, .. } => {
            let record = pair.to_record();
            println!("chosen:   {}", record.chosen);
            println!("rejected: {}", record.rejected);
            for e in &record.meta.edits {
                println!("  {:?} {} in statement {}", e.op, e.span, e.statement);
            }
            println!("balanced: {}", pair.is_balanced(&input.ctx));
        }
        PairOutcome::Dropped { doc_id, reason } => println!("{doc_id} dropped: {reason:?}"),
    }
}
