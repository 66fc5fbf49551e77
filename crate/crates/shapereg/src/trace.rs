//! JSON-lines solver trace: one record per outer iteration.

use serde::{Deserialize, Serialize};
use std::io::Write;

/// Schema shared by all engines: `{k, sigma, inner_iters, grad_norm,
/// r_kkt, pobj, dobj}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub sigma: f64,
    pub inner_iters: usize,
    pub grad_norm: f64,
    pub r_kkt: f64,
    pub pobj: f64,
    pub dobj: f64,
}

/// Where trace records go.
pub enum TraceSink<'a> {
    Discard,
    Writer(&'a mut dyn Write),
    Collect(&'a mut Vec<TraceRecord>),
}

impl TraceSink<'_> {
    pub fn emit(&mut self, record: TraceRecord) {
        match self {
            TraceSink::Discard => {}
            TraceSink::Writer(w) => {
                if let Ok(line) = serde_json::to_string(&record) {
                    let _ = writeln!(w, "{line}");
                }
            }
            TraceSink::Collect(v) => v.push(record),
        }
    }
}

impl Default for TraceSink<'_> {
    fn default() -> Self {
        TraceSink::Discard
    }
}
