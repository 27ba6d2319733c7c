//! Run traces: the ordered record of every model exchange, parsed delta and
//! memory snapshot of one run.
//!
//! On disk a trace is JSON lines. Each line wraps one event with its index and
//! a sha256 hash chained to the previous line, so any edit to a persisted
//! trace is detected on load. Memory snapshots additionally carry the digest
//! of their serialized memory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::{LlmRequest, LlmResponse, Role};
use crate::memory::{serialize_memory, Memory, MemoryKey};
use crate::pipeline::RunConfig;

const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

/// Point in a run at which a memory snapshot is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Plan,
    /// After extract, append and prune.
    Extract,
    Infer,
    Refine,
    Synthesize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Config {
        config: RunConfig,
    },
    RunStart {
        method: String,
        query: String,
        chunks: usize,
        document_tokens: usize,
    },
    Exchange {
        role: Role,
        chunk: Option<usize>,
        /// 0 for the logical call, 1.. for re-asks after an unparseable reply.
        attempt: u32,
        model: String,
        fingerprint: String,
        prompt: String,
        response: String,
        prompt_tokens: usize,
        completion_tokens: usize,
        latency_ms: u64,
    },
    Delta {
        role: Role,
        chunk: Option<usize>,
        kind: MemoryKey,
        items: Vec<String>,
    },
    Prune {
        chunk: usize,
        evicted: Vec<String>,
        oversized: bool,
    },
    Snapshot {
        phase: Phase,
        chunk: Option<usize>,
        gathered_tokens: usize,
        digest: String,
        memory: String,
    },
    Summary {
        chunk: usize,
        tokens: usize,
        truncated: bool,
        text: String,
    },
    Truncation {
        original_tokens: usize,
        kept_tokens: usize,
    },
    Warning {
        role: Option<Role>,
        chunk: Option<usize>,
        message: String,
    },
    Final {
        answer: String,
        wall_ms: u64,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed trace record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: digest mismatch ({what})")]
    DigestMismatch { line: usize, what: String },
}

pub fn memory_digest(memory: &Memory) -> String {
    sha256_hex(serialize_memory(memory).as_bytes())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn chain_hash(prev: &str, event_json: &str) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(b"\n");
    h.update(event_json.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct LineOut<'a> {
    seq: usize,
    prev: &'a str,
    hash: &'a str,
    event: &'a RawValue,
}

#[derive(Deserialize)]
struct LineIn<'a> {
    seq: usize,
    prev: String,
    hash: String,
    #[serde(borrow)]
    event: &'a RawValue,
}

/// Per-role call accounting derived from a trace.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct TraceStats {
    pub method: Option<String>,
    pub chunks: Option<usize>,
    /// Logical calls (first attempts) per role.
    pub calls: BTreeMap<Role, u64>,
    /// All requests including re-asks.
    pub requests: BTreeMap<Role, u64>,
    pub prompt_tokens: BTreeMap<Role, u64>,
    pub completion_tokens: BTreeMap<Role, u64>,
    pub warnings: usize,
    pub completed: bool,
    pub failed: bool,
}

impl TraceStats {
    pub fn total_calls(&self) -> u64 {
        self.calls.values().sum()
    }

    pub fn total_requests(&self) -> u64 {
        self.requests.values().sum()
    }

    pub fn total_prompt_tokens(&self) -> u64 {
        self.prompt_tokens.values().sum()
    }

    pub fn total_completion_tokens(&self) -> u64 {
        self.completion_tokens.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub events: Vec<TraceEvent>,
}

impl RunTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    pub fn record_exchange(
        &mut self,
        request: &LlmRequest,
        response: &LlmResponse,
        chunk: Option<usize>,
        attempt: u32,
    ) {
        self.push(TraceEvent::Exchange {
            role: request.role,
            chunk,
            attempt,
            model: request.model.clone(),
            fingerprint: request.fingerprint(),
            prompt: request.user.clone(),
            response: response.text.clone(),
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
            latency_ms: response.latency_ms,
        });
    }

    pub fn snapshot(&mut self, phase: Phase, chunk: Option<usize>, memory: &Memory) {
        let text = serialize_memory(memory);
        self.push(TraceEvent::Snapshot {
            phase,
            chunk,
            gathered_tokens: memory.gathered_tokens(),
            digest: sha256_hex(text.as_bytes()),
            memory: text,
        });
    }

    pub fn warn(&mut self, role: Option<Role>, chunk: Option<usize>, message: impl Into<String>) {
        self.push(TraceEvent::Warning {
            role,
            chunk,
            message: message.into(),
        });
    }

    pub fn config(&self) -> Option<&RunConfig> {
        self.events.iter().find_map(|e| match e {
            TraceEvent::Config { config } => Some(config),
            _ => None,
        })
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.events.iter().rev().find_map(|e| match e {
            TraceEvent::Final { answer, .. } => Some(answer.as_str()),
            _ => None,
        })
    }

    pub fn warnings(&self) -> impl Iterator<Item = &str> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Warning { message, .. } => Some(message.as_str()),
            _ => None,
        })
    }

    /// `(phase, chunk, gathered_tokens, memory text)` of every snapshot.
    pub fn snapshots(&self) -> impl Iterator<Item = (Phase, Option<usize>, usize, &str)> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Snapshot {
                phase,
                chunk,
                gathered_tokens,
                memory,
                ..
            } => Some((*phase, *chunk, *gathered_tokens, memory.as_str())),
            _ => None,
        })
    }

    /// Chunk indices in the order workers visited them (one per logical call of `role`).
    pub fn chunk_visits(&self, role: Role) -> Vec<usize> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Exchange {
                    role: r,
                    chunk: Some(c),
                    attempt: 0,
                    ..
                } if *r == role => Some(*c),
                _ => None,
            })
            .collect()
    }

    pub fn stats(&self) -> TraceStats {
        let mut stats = TraceStats::default();
        for event in &self.events {
            match event {
                TraceEvent::RunStart { method, chunks, .. } => {
                    stats.method = Some(method.clone());
                    stats.chunks = Some(*chunks);
                }
                TraceEvent::Exchange {
                    role,
                    attempt,
                    prompt_tokens,
                    completion_tokens,
                    ..
                } => {
                    if *attempt == 0 {
                        *stats.calls.entry(*role).or_default() += 1;
                    }
                    *stats.requests.entry(*role).or_default() += 1;
                    *stats.prompt_tokens.entry(*role).or_default() += *prompt_tokens as u64;
                    *stats.completion_tokens.entry(*role).or_default() += *completion_tokens as u64;
                }
                TraceEvent::Warning { .. } => stats.warnings += 1,
                TraceEvent::Final { .. } => stats.completed = true,
                TraceEvent::Error { .. } => stats.failed = true,
                _ => {}
            }
        }
        stats
    }

    /// Copy with wall-clock fields zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let events = self
            .events
            .iter()
            .cloned()
            .map(|mut e| {
                match &mut e {
                    TraceEvent::Final { wall_ms, .. } => *wall_ms = 0,
                    TraceEvent::Exchange { latency_ms, .. } => *latency_ms = 0,
                    _ => {}
                }
                e
            })
            .collect();
        Self { events }
    }

    /// The JSON-lines form written by [`persist_trace`].
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut prev = GENESIS.to_string();
        for (seq, event) in self.events.iter().enumerate() {
            let json = serde_json::to_string(event).expect("trace events serialize");
            let hash = chain_hash(&prev, &json);
            let raw = RawValue::from_string(json).expect("valid json");
            let line = LineOut {
                seq,
                prev: &prev,
                hash: &hash,
                event: &raw,
            };
            out.push_str(&serde_json::to_string(&line).expect("line serializes"));
            out.push('\n');
            prev = hash;
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        let mut events = Vec::new();
        let mut prev = GENESIS.to_string();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let rec: LineIn<'_> = serde_json::from_str(line).map_err(|e| TraceError::Malformed {
                line: lineno,
                message: e.to_string(),
            })?;
            if rec.seq != i {
                return Err(TraceError::Malformed {
                    line: lineno,
                    message: format!("sequence number {} out of order", rec.seq),
                });
            }
            if rec.prev != prev {
                return Err(TraceError::DigestMismatch {
                    line: lineno,
                    what: "chain link to previous record".into(),
                });
            }
            if chain_hash(&prev, rec.event.get()) != rec.hash {
                return Err(TraceError::DigestMismatch {
                    line: lineno,
                    what: "record hash".into(),
                });
            }
            let event: TraceEvent =
                serde_json::from_str(rec.event.get()).map_err(|e| TraceError::Malformed {
                    line: lineno,
                    message: e.to_string(),
                })?;
            if let TraceEvent::Snapshot { digest, memory, .. } = &event {
                if sha256_hex(memory.as_bytes()) != *digest {
                    return Err(TraceError::DigestMismatch {
                        line: lineno,
                        what: "memory snapshot".into(),
                    });
                }
            }
            if i == 0 && !matches!(event, TraceEvent::Config { .. }) {
                return Err(TraceError::Malformed {
                    line: 1,
                    message: "first record must be the run configuration".into(),
                });
            }
            prev = rec.hash;
            events.push(event);
        }
        Ok(Self { events })
    }
}

pub fn persist_trace(trace: &RunTrace, path: &Path) -> Result<(), TraceError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(trace.to_jsonl().as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<RunTrace, TraceError> {
    let mut text = String::new();
    let mut reader = BufReader::new(File::open(path)?);
    loop {
        let mut line = String::new();
        match reader.read_line(&mut line) {
            Ok(0) => break,
            Ok(_) => text.push_str(&line),
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                return Err(TraceError::Malformed {
                    line: text.lines().count() + 1,
                    message: "invalid UTF-8".into(),
                })
            }
            Err(e) => return Err(e.into()),
        }
    }
    RunTrace::from_jsonl(&text)
}
