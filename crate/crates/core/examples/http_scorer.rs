//! Talk to a log-probability backend over HTTP.
//!
//! A tiny in-process server stands in for the model: it answers
//! `POST /v1/logprob` with a score that rises with the number of retained
//! sentences mentioning "rain". Pass a URL to use a real backend instead.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;

use citereward::scorer::WireRequest;
use citereward::{HttpScorer, HttpScorerConfig, ScoreRequest, Scorer, SegmentedContext, StatementRewarder};

fn serve(listener: TcpListener) {
    for stream in listener.incoming().flatten() {
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0;
        let mut line = String::new();
        loop {
            line.clear();
            reader.read_line(&mut line).unwrap();
            if line.trim().is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let req: WireRequest = serde_json::from_slice(&body).unwrap();
        let hits = req.sentences.iter().filter(|s| s.text.contains("rain")).count();
        let reply = format!("{{\"logprob\": {}}}", -4.0 + 1.5 * hits as f64);
        let mut out = stream;
        write!(
            out,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .unwrap();
    }
}

fn main() {
    let url = std::env::args().nth(1).unwrap_or_else(|| {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/logprob", listener.local_addr().unwrap());
        thread::spawn(move || serve(listener));
        url
    });
    let scorer = HttpScorer::new(HttpScorerConfig::new(url));

    let ctx = SegmentedContext::from_texts(&[
        "Heavy rain fell overnight.",
        "The match was postponed.",
        "More rain is forecast.",
    ])
    .unwrap();
    let statement = "It has been a wet week.";
    let full = ScoreRequest::new(&ctx, ctx.all_ids().collect(), "How is the weather?", "", statement).unwrap();
    println!("request body: {}", serde_json::to_string(&full.wire_body()).unwrap());
    println!("log p(full context) = {}", scorer.score(&full).unwrap().value());

    let rewarder = StatementRewarder::new(&scorer, &ctx, "How is the weather?", "", statement);
    for cited in [vec![0, 2], vec![1]] {
        let r = rewarder.reward(&cited.iter().copied().collect()).unwrap();
        println!("cite {cited:?}: reward {:.2}", r.reward);
    }
}
