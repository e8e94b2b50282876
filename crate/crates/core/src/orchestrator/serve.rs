//! Newline-delimited JSON request loop.
//!
//! Request: `{"id": 1, "task": "T01", "text": "..."}`.
//! Response: `{"id", "task", "label", "probs", "cache_hit", "latency_us"}`
//! or `{"id", "error"}`, one line per request, in request order.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::orchestrator::Registry;

pub const ERR_UNKNOWN_TASK: &str = "unknown_task";
pub const ERR_MALFORMED: &str = "malformed_request";
pub const ERR_INTERNAL: &str = "internal_error";

#[derive(Debug, Deserialize)]
struct Request {
    id: i64,
    task: String,
    text: String,
}

#[derive(Debug, Serialize)]
struct Scored<'a> {
    id: i64,
    task: &'a str,
    label: usize,
    probs: &'a [f64],
    cache_hit: bool,
    latency_us: u64,
}

#[derive(Debug, Serialize)]
struct Failed<'a> {
    id: Option<i64>,
    error: &'a str,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeSummary {
    pub requests: u64,
    pub responses: u64,
    pub errors: u64,
}

/// Answers one request line. Never fails: problems become error records.
pub fn handle_line(registry: &Registry, backbone: &Backbone, line: &str) -> String {
    respond(registry, backbone, line).0
}

fn respond(registry: &Registry, backbone: &Backbone, line: &str) -> (String, bool) {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(_) => {
            let id = serde_json::from_str::<Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(Value::as_i64));
            return (failure(id, ERR_MALFORMED), false);
        }
    };
    let text = match registry.score(backbone, &req.task, &req.text) {
        Ok(r) => serde_json::to_string(&Scored {
            id: req.id,
            task: &r.task_id,
            label: r.label,
            probs: &r.probs,
            cache_hit: r.cache_hit,
            latency_us: r.latency_us,
        })
        .expect("plain struct serializes"),
        Err(Error::UnknownTask(_)) => return (failure(Some(req.id), ERR_UNKNOWN_TASK), false),
        Err(_) => return (failure(Some(req.id), ERR_INTERNAL), false),
    };
    (text, true)
}

fn failure(id: Option<i64>, error: &str) -> String {
    serde_json::to_string(&Failed { id, error }).expect("plain struct serializes")
}

/// Reads requests until end of input and writes one response per
/// non-blank line. Only I/O failures end the loop early.
pub fn serve(registry: &Registry, backbone: &Backbone, mut input: impl BufRead, output: impl Write) -> Result<ServeSummary> {
    let mut out = BufWriter::new(output);
    let mut summary = ServeSummary::default();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        if input.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        // invalid UTF-8 turns into replacement characters and fails to parse
        let line = String::from_utf8_lossy(&buf);
        if line.trim().is_empty() {
            continue;
        }
        summary.requests += 1;
        let (response, ok) = respond(registry, backbone, &line);
        if !ok {
            summary.errors += 1;
        }
        out.write_all(response.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()?;
        summary.responses += 1;
    }
    Ok(summary)
}

/// Accepts TCP connections forever, one thread per connection.
pub fn serve_tcp(registry: Arc<Registry>, backbone: Arc<Backbone>, addr: impl ToSocketAddrs) -> Result<()> {
    let listener = TcpListener::bind(addr)?;
    serve_listener(registry, backbone, listener)
}

pub fn serve_listener(registry: Arc<Registry>, backbone: Arc<Backbone>, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let (registry, backbone) = (registry.clone(), backbone.clone());
        std::thread::spawn(move || {
            let Ok(reader) = stream.try_clone() else { return };
            let _ = serve(&registry, &backbone, BufReader::new(reader), stream);
        });
    }
    Ok(())
}
