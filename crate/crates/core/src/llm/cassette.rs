//! Record/replay of model exchanges as JSON lines of `{fingerprint, response}`.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{LlmBackend, LlmError, LlmRequest, LlmResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub response: LlmResponse,
}

enum State {
    Record {
        inner: Arc<dyn LlmBackend>,
        out: File,
    },
    Replay {
        entries: Vec<CassetteEntry>,
        next: usize,
    },
}

pub struct CassetteBackend {
    path: PathBuf,
    state: Mutex<State>,
}

impl CassetteBackend {
    /// Starts a fresh cassette at `path`, forwarding calls to `inner`.
    pub fn record(path: &Path, inner: Arc<dyn LlmBackend>) -> Result<Self, LlmError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let out = File::create(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            state: Mutex::new(State::Record { inner, out }),
        })
    }

    pub fn replay(path: &Path) -> Result<Self, LlmError> {
        let entries = read_entries(path)?;
        Ok(Self::from_entries(path, entries))
    }

    pub fn from_entries(path: &Path, entries: Vec<CassetteEntry>) -> Self {
        Self {
            path: path.to_path_buf(),
            state: Mutex::new(State::Replay { entries, next: 0 }),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_entries(path: &Path) -> Result<Vec<CassetteEntry>, LlmError> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| LlmError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

impl LlmBackend for CassetteBackend {
    fn name(&self) -> &'static str {
        "cassette"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let fingerprint = request.fingerprint();
        let mut state = self.state.lock().unwrap();
        match &mut *state {
            State::Replay { entries, next } => {
                let entry = entries.get(*next).ok_or(LlmError::CassetteExhausted(*next))?;
                if entry.fingerprint != fingerprint {
                    return Err(LlmError::CassetteMismatch {
                        index: *next,
                        expected: entry.fingerprint.clone(),
                        actual: fingerprint,
                    });
                }
                *next += 1;
                Ok(entry.response.clone())
            }
            State::Record { inner, out } => {
                let response = inner.complete(request)?;
                let entry = CassetteEntry {
                    fingerprint,
                    response: response.clone(),
                };
                let line = serde_json::to_string(&entry).expect("entry serializes");
                writeln!(out, "{line}")?;
                out.flush()?;
                Ok(response)
            }
        }
    }
}
