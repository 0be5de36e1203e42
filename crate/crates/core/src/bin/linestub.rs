//! Minimal child process for exercising the external-command protocol.
//!
//! Reads one JSON request per line and answers with a fixed text. Flags
//! change the behaviour: `--echo` answers with the request's prompt,
//! `--reverse` answers only at EOF and in reverse order, `--omit N` never
//! answers the N-th request (0-based), `--garbage` prints a non-JSON line in
//! place of the first answer. Malformed request lines get an error object.

use std::io::{self, BufRead, Write};

use clap::Parser;
use memegrid::backends::{ProtocolRequest, ProtocolResponse};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "FALSE")]
    text: String,
    #[arg(long)]
    echo: bool,
    #[arg(long)]
    reverse: bool,
    #[arg(long)]
    omit: Option<usize>,
    #[arg(long)]
    garbage: bool,
}

fn answer(line: &str, args: &Args) -> ProtocolResponse {
    match serde_json::from_str::<ProtocolRequest>(line) {
        Ok(req) => {
            let text = if args.echo { req.prompt } else { args.text.clone() };
            ProtocolResponse { request_key: req.request_key, text: Some(text), error: None }
        }
        Err(e) => {
            // Recover the key if the line is at least a JSON object.
            let key = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("request_key").and_then(|k| k.as_str()).map(str::to_owned))
                .unwrap_or_default();
            ProtocolResponse { request_key: key, text: None, error: Some(format!("bad request: {e}")) }
        }
    }
}

fn main() {
    let args = Args::parse();
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut held = Vec::new();
    let mut garbage_sent = false;
    for (i, line) in stdin.lock().lines().enumerate() {
        let Ok(line) = line else { break };
        if args.omit == Some(i) {
            continue;
        }
        let resp = answer(&line, &args);
        if args.reverse {
            held.push(resp);
            continue;
        }
        if args.garbage && !garbage_sent {
            writeln!(out, "this is not json").unwrap();
            garbage_sent = true;
        } else {
            writeln!(out, "{}", serde_json::to_string(&resp).unwrap()).unwrap();
        }
        out.flush().unwrap();
    }
    for resp in held.into_iter().rev() {
        writeln!(out, "{}", serde_json::to_string(&resp).unwrap()).unwrap();
    }
    out.flush().unwrap();
}
