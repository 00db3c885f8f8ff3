//! Attribute a statement to context sentences with a sparse linear surrogate.
//!
//! Random ablations of the context are scored, a Lasso model is fitted to the
//! logit of each score, and large weights become citations.

use citereward::contextcite::{extract_citations, fit_surrogate, sample_ablations, ExtractionConfig};
use citereward::{SegmentedContext, SupportOracle};

fn main() {
    let texts: Vec<String> = (0..24).map(|i| format!("Observation {i} from the survey.")).collect();
    let ctx = SegmentedContext::from_texts(&texts).unwrap();
    let statement = "Most respondents favoured the new schedule.";
    let oracle = SupportOracle::from_sets(0.8, [(statement, [4, 5, 17])]).unwrap();

    let samples = sample_ablations(&oracle, &ctx, "What did people think?", "", statement, 256, 11, 1e-9).unwrap();
    let model = fit_surrogate(&samples, 0.01).unwrap();

    let mut top: Vec<(usize, f64)> = model.weights.iter().copied().enumerate().collect();
    top.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    for (id, w) in top.iter().take(5) {
        println!("sentence {id:>2}: weight {w:>7.3}");
    }

    let ex = extract_citations(&model, &ExtractionConfig::default());
    for s in &ex.spans {
        println!("span {} score {:.3} mass {:.3}", s.span, s.score, s.mass);
    }
    println!("citation: {}", ex.citation);
}
