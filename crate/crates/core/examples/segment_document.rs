//! Split a document into id-tagged sentences and render the prompt context.
//!
//! `cargo run --example segment_document [path]`

use citereward::{render_prompt_context, segment, LanguageHint};

const SAMPLE: &str = "Dr. Smith joined the lab in 2019. She studies coral reefs, \
e.g. those near Fiji. Reef cover fell by 14.5% last decade!\n\n\
珊瑚礁正在退化。研究人员呼吁保护。";

fn main() {
    let text = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(&path).expect("readable file"),
        None => SAMPLE.to_string(),
    };
    let ctx = segment(&text, LanguageHint::Auto).expect("document has at least one sentence");
    for s in ctx.sentences() {
        println!("{:>3} [{:>4}..{:<4}] {}", s.id, s.start, s.end, s.text);
    }
    println!("\nprompt context:\n{}", render_prompt_context(&ctx));
}
