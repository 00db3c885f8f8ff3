//! Necessity/sufficiency reward of a few citations under a support oracle.
//!
//! The oracle charges `alpha` per support sentence missing from the context,
//! so citing exactly the support maximises the reward.

use std::collections::BTreeSet;

use citereward::{CitationSequence, SegmentedContext, StatementRewarder, SupportOracle};

fn main() {
    let ctx = SegmentedContext::from_texts(&[
        "The bridge opened in 1932.",
        "It spans 503 metres.",
        "Tolls were abolished in 1985.",
        "The city has two rivers.",
        "Its arch is made of steel.",
    ])
    .unwrap();
    let statement = "The steel arch bridge, opened in 1932, is 503 metres long.";
    let oracle = SupportOracle::from_sets(1.0, [(statement, BTreeSet::from([0, 1, 4]))]).unwrap();
    let rewarder = StatementRewarder::new(&oracle, &ctx, "Describe the bridge.", "", statement);

    println!("{:<14} {:>8} {:>8} {:>8}", "citation", "drop", "hold", "reward");
    for raw in ["[0-1][4-4]", "[0-1]", "[0-4]", "[2-3]", ""] {
        let cited = CitationSequence::parse(raw).unwrap().resolve(&ctx);
        let r = rewarder.reward(&cited).unwrap();
        println!("{:<14} {:>8.2} {:>8.2} {:>8.2}", format!("`{raw}`"), r.prob_drop, r.prob_hold, r.reward);
    }
}
