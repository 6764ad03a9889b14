//! Structured per-step trace records.
//!
//! One record per scheduler step, line-delimited JSON when written out. The
//! resulting counters ride along on every record so post-hoc audits can check
//! monotonicity and mask containment without replaying.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cpu: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thread: Option<usize>,
    pub op: String,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub detail: String,
    pub gpnum: u64,
    pub completed: u64,
    /// Root qsmask ordinals after the step.
    pub root_qsmask: Vec<usize>,
}

pub trait TraceSink {
    fn record(&mut self, ev: &TraceEvent);
}

/// Discards everything; exploration uses this on non-witness paths.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _ev: &TraceEvent) {}
}

/// Keeps the full record list (replay, file dumps).
#[derive(Default)]
pub struct VecSink {
    pub events: Vec<TraceEvent>,
}

impl TraceSink for VecSink {
    fn record(&mut self, ev: &TraceEvent) {
        self.events.push(ev.clone());
    }
}

impl VecSink {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            out.push_str(&serde_json::to_string(ev).expect("trace serializes"));
            out.push('\n');
        }
        out
    }
}

/// Streams records into a SHA-256 over their serialized lines.
pub struct HashingSink {
    hasher: Sha256,
    pub steps: u64,
}

impl Default for HashingSink {
    fn default() -> Self {
        HashingSink { hasher: Sha256::new(), steps: 0 }
    }
}

impl TraceSink for HashingSink {
    fn record(&mut self, ev: &TraceEvent) {
        let line = serde_json::to_string(ev).expect("trace serializes");
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.steps += 1;
    }
}

impl HashingSink {
    pub fn finish_hex(self) -> String {
        to_hex(&self.hasher.finalize())
    }
}

pub fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trips() {
        let ev = TraceEvent {
            step: 3,
            cpu: Some(1),
            thread: Some(1),
            op: "spin_acquire".into(),
            detail: "lock=0".into(),
            gpnum: 1,
            completed: 0,
            root_qsmask: vec![0, 1],
        };
        let mut sink = VecSink::default();
        sink.record(&ev);
        let line = sink.to_jsonl();
        let back: TraceEvent = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back.op, "spin_acquire");
        assert_eq!(back.root_qsmask, vec![0, 1]);
    }

    #[test]
    fn hashing_is_content_sensitive() {
        let ev = TraceEvent {
            step: 0,
            cpu: None,
            thread: None,
            op: "a".into(),
            detail: String::new(),
            gpnum: 0,
            completed: 0,
            root_qsmask: vec![],
        };
        let mut h1 = HashingSink::default();
        h1.record(&ev);
        let mut h2 = HashingSink::default();
        let mut ev2 = ev.clone();
        ev2.op = "b".into();
        h2.record(&ev2);
        assert_ne!(h1.finish_hex(), h2.finish_hex());
    }
}
