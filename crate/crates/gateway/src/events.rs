//! Append-only JSON-lines event log, one file per project.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use codesign_core::catalog::{CurateOp, DesignItem, SceneContext};
use codesign_core::design_space::AttributeId;
use codesign_core::elicitation::{InteractionRecord, UserProfile};
use codesign_core::palette::NodeRef;
use codesign_core::preference::{RecommendationRound, Strategy};
use serde::{Deserialize, Serialize};

use crate::error::GatewayError;

pub const EVENT_SCHEMA_VERSION: u32 = 1;

pub(crate) fn entropy_strategy() -> Strategy {
    Strategy::Entropy
}

pub(crate) fn is_entropy(s: &Strategy) -> bool {
    *s == Strategy::Entropy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventPayload {
    ProjectCreated {
        project_id: String,
        name: String,
        seed: u64,
        max_rounds: usize,
        #[serde(default = "entropy_strategy", skip_serializing_if = "is_entropy")]
        strategy: Strategy,
    },
    FilterApplied {
        context: SceneContext,
        fallback: bool,
    },
    /// `library: false` marks informed-generation results awaiting a save.
    ItemsIngested {
        items: Vec<DesignItem>,
        library: bool,
    },
    Curated {
        ops: Vec<CurateOp>,
    },
    SessionOpened {
        session_id: String,
        profile: UserProfile,
        round: RecommendationRound,
    },
    InteractionSubmitted {
        session_id: String,
        record: InteractionRecord,
    },
    RoundIssued {
        session_id: String,
        round: RecommendationRound,
    },
    /// Retrains the session's network on the votes of `round_index`.
    /// `version` and `history_hash` are checked on replay.
    ModelTrained {
        session_id: String,
        round_index: usize,
        version: u64,
        history_hash: String,
    },
    TreePruned {
        attribute: AttributeId,
        node: NodeRef,
        pruned: bool,
    },
    ManifestExported {
        attribute: AttributeId,
        log_offset: u64,
        prune_set_hash: String,
        manifest_sha256: String,
        entries: usize,
    },
    ItemSaved {
        item_id: String,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::ProjectCreated { .. } => "ProjectCreated",
            EventPayload::FilterApplied { .. } => "FilterApplied",
            EventPayload::ItemsIngested { .. } => "ItemsIngested",
            EventPayload::Curated { .. } => "Curated",
            EventPayload::SessionOpened { .. } => "SessionOpened",
            EventPayload::InteractionSubmitted { .. } => "InteractionSubmitted",
            EventPayload::RoundIssued { .. } => "RoundIssued",
            EventPayload::ModelTrained { .. } => "ModelTrained",
            EventPayload::TreePruned { .. } => "TreePruned",
            EventPayload::ManifestExported { .. } => "ManifestExported",
            EventPayload::ItemSaved { .. } => "ItemSaved",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    /// Milliseconds since the Unix epoch. Never part of any hash.
    pub ts: u64,
    pub v: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dedup_key: Option<String>,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl Event {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("event serializes");
        s.push('\n');
        s
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Where a log came from: a file on disk or memory only.
#[derive(Debug)]
enum Sink {
    File { path: PathBuf, file: File },
    Memory,
}

/// Single-writer event log. Appends are fsynced before they are acknowledged.
#[derive(Debug)]
pub struct EventLog {
    sink: Sink,
    events: Vec<Event>,
    dedup: HashMap<String, u64>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self { sink: Sink::Memory, events: Vec::new(), dedup: HashMap::new() }
    }

    /// Parses log lines. A final line without its newline, or one that does not
    /// parse, is a torn write and is reported through `torn_at`; any other
    /// malformed or out-of-sequence line is corruption.
    pub fn parse(bytes: &[u8]) -> Result<(Vec<Event>, Option<usize>), GatewayError> {
        let mut events = Vec::new();
        let mut pos = 0usize;
        while pos < bytes.len() {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map(|i| pos + i);
            let expected = events.len() as u64 + 1;
            let line = match end {
                Some(e) => &bytes[pos..e],
                None => return Ok((events, Some(pos))),
            };
            let is_last = end.unwrap() + 1 >= bytes.len();
            match serde_json::from_slice::<Event>(line) {
                Ok(ev) if ev.seq == expected => events.push(ev),
                Ok(ev) => {
                    return Err(GatewayError::CorruptLog { seq: expected, reason: format!("found seq {}", ev.seq) })
                }
                Err(_) if is_last => return Ok((events, Some(pos))),
                Err(e) => return Err(GatewayError::CorruptLog { seq: expected, reason: e.to_string() }),
            }
            pos = end.unwrap() + 1;
        }
        Ok((events, None))
    }

    /// Opens (creating if needed) a log file, truncating a torn final record.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut bytes = Vec::new();
        BufReader::new(&file).read_until(0, &mut bytes)?;
        let (events, torn) = Self::parse(&bytes)?;
        if let Some(at) = torn {
            tracing::warn!(path = %path.display(), offset = at, "truncating torn log tail");
            file.set_len(at as u64)?;
            file.sync_data()?;
        }
        file.seek(SeekFrom::End(0))?;
        let dedup = events
            .iter()
            .filter_map(|e| e.dedup_key.clone().map(|k| (k, e.seq)))
            .collect();
        Ok(Self { sink: Sink::File { path, file }, events, dedup })
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            Sink::Memory => None,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn seq_for_dedup(&self, key: &str) -> Option<u64> {
        self.dedup.get(key).copied()
    }

    pub fn get(&self, seq: u64) -> Option<&Event> {
        seq.checked_sub(1).and_then(|i| self.events.get(i as usize))
    }

    /// The event `append` would write next, without writing it.
    pub fn next_event(&self, payload: EventPayload, dedup_key: Option<String>) -> Event {
        Event { seq: self.len() + 1, ts: now_ms(), v: EVENT_SCHEMA_VERSION, dedup_key, payload }
    }

    /// Durably writes an event built by `next_event`.
    pub fn commit(&mut self, event: Event) -> Result<u64, GatewayError> {
        if event.seq != self.len() + 1 {
            return Err(GatewayError::Conflict(format!("event seq {} does not follow {}", event.seq, self.len())));
        }
        if let Sink::File { file, .. } = &mut self.sink {
            file.write_all(event.to_line().as_bytes())?;
            file.sync_data()?;
        }
        if let Some(k) = &event.dedup_key {
            self.dedup.insert(k.clone(), event.seq);
        }
        self.events.push(event);
        Ok(self.len())
    }

    /// Durably appends a payload. A repeated dedup key returns the earlier event.
    pub fn append(&mut self, payload: EventPayload, dedup_key: Option<String>) -> Result<&Event, GatewayError> {
        if let Some(seq) = dedup_key.as_deref().and_then(|k| self.seq_for_dedup(k)) {
            return Ok(&self.events[seq as usize - 1]);
        }
        let event = self.next_event(payload, dedup_key);
        self.commit(event)?;
        Ok(self.events.last().unwrap())
    }
}
