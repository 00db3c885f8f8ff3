//! Parse a cited response, inspect its spans, and write it back byte for byte.

use citereward::{parse_response, serialize_response, CitationSequence, SegmentedContext};

fn main() {
    let raw = "<statement>Reef cover fell sharply.<cite>[1-2][4-4]</cite></statement>\
<statement>Warming is the main driver.<cite>[6-6]</cite></statement>\
<statement>More study is needed.<cite></cite></statement>";

    let resp = parse_response(raw).expect("well-formed response");
    let ctx = SegmentedContext::from_texts(&(0..6).map(|i| format!("Sentence {i}.")).collect::<Vec<_>>()).unwrap();
    for (i, st) in resp.statements.iter().enumerate() {
        let (ids, dropped) = st.citation.resolve_within(ctx.len());
        println!(
            "statement {i}: {:?} cites `{}` -> ids {ids:?} ({dropped} out of range)",
            st.text, st.citation
        );
    }
    assert_eq!(serialize_response(&resp), raw);
    println!("roundtrip ok");

    for bad in ["[3-1]", "[1-2", "[a-b]"] {
        println!("{bad:>6}: {}", CitationSequence::parse(bad).unwrap_err());
    }
}
