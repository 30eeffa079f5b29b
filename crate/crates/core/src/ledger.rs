//! Append-only ledger of cross-boundary data movements, plus the privacy
//! predicates evaluated over it.
//!
//! Every engine that moves bytes across a trust boundary appends exactly one
//! event per movement. Raw private examples leaving a silo are not merely
//! flagged; the event constructor refuses to build them, so that flow is
//! unrepresentable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

// --------------------------------------------------------------------------
// Parties and payloads
// --------------------------------------------------------------------------

/// Endpoint of a flow: a user silo, the coordinating server, or the public
/// model repository.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Party {
    Silo(String),
    Central,
    PublicRepo,
}

impl Party {
    pub fn silo(id: impl Into<String>) -> Self {
        Party::Silo(id.into())
    }

    pub fn as_silo(&self) -> Option<&str> {
        match self {
            Party::Silo(id) => Some(id),
            _ => None,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Silo(id) => write!(f, "silo:{id}"),
            Party::Central => write!(f, "central"),
            Party::PublicRepo => write!(f, "public_repo"),
        }
    }
}

impl Serialize for Party {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Party {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        match raw.as_str() {
            "central" => Ok(Party::Central),
            "public_repo" => Ok(Party::PublicRepo),
            other => match other.strip_prefix("silo:") {
                Some(id) if !id.is_empty() => Ok(Party::Silo(id.to_string())),
                _ => Err(serde::de::Error::custom(format!("unknown party {raw:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    ModelParams,
    LocalUpdate,
    RawData,
    DemoRead,
    FmDownload,
    TaskMetadata,
}

// --------------------------------------------------------------------------
// Events
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEvent {
    /// Training round or inference step the movement belongs to.
    pub round: u64,
    pub source: Party,
    pub sink: Party,
    pub kind: PayloadKind,
    pub bytes: u64,
    /// The payload is a function of some silo's private examples.
    pub derived_from_private: bool,
    /// The payload lets the receiving party learn which task the user runs.
    pub task_revealing: bool,
    /// Task the payload concerns, when attributable.
    pub task: Option<String>,
}

impl FlowEvent {
    /// Build an event, rejecting raw private data leaving its silo.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        round: u64,
        source: Party,
        sink: Party,
        kind: PayloadKind,
        bytes: u64,
        derived_from_private: bool,
        task_revealing: bool,
        task: Option<String>,
    ) -> Result<FlowEvent> {
        if kind == PayloadKind::RawData {
            if let Party::Silo(id) = &source {
                if sink != source {
                    return Err(Error::RawDataEgress(id.clone()));
                }
            }
        }
        Ok(FlowEvent { round, source, sink, kind, bytes, derived_from_private, task_revealing, task })
    }

    /// Outbound means the payload left the silo that produced it.
    pub fn is_silo_outbound(&self) -> bool {
        matches!(self.source, Party::Silo(_)) && self.sink != self.source
    }
}

// --------------------------------------------------------------------------
// Ledger
// --------------------------------------------------------------------------

/// Append-only, single-writer record of every cross-boundary movement in a
/// scenario run. Append order is the total order and is reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowLedger {
    events: Vec<FlowEvent>,
}

impl FlowLedger {
    pub fn new() -> Self {
        FlowLedger::default()
    }

    pub fn append(&mut self, event: FlowEvent) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[FlowEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count_kind(&self, kind: PayloadKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.events {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<FlowLedger> {
        let raw = std::fs::read_to_string(path)?;
        let mut events = Vec::new();
        for line in raw.lines() {
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(line)?);
        }
        Ok(FlowLedger { events })
    }
}

// --------------------------------------------------------------------------
// Privacy predicates
// --------------------------------------------------------------------------

/// Data privacy in the strict sense: nothing derived from private examples
/// ever left its silo.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SecrecyVerdict {
    Holds,
    /// Indices into the ledger of every violating event.
    Violated(Vec<usize>),
}

impl SecrecyVerdict {
    pub fn holds(&self) -> bool {
        matches!(self, SecrecyVerdict::Holds)
    }

    pub fn witness_count(&self) -> usize {
        match self {
            SecrecyVerdict::Holds => 0,
            SecrecyVerdict::Violated(w) => w.len(),
        }
    }
}

/// Check the ledger against the silo set: the verdict is `Holds` iff no event
/// sourced at one of these silos carries private-derived bytes elsewhere.
pub fn perfect_secrecy(ledger: &FlowLedger, silo_ids: &BTreeSet<String>) -> SecrecyVerdict {
    let witnesses: Vec<usize> = ledger
        .events()
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            e.derived_from_private
                && e.is_silo_outbound()
                && e.source.as_silo().map(|s| silo_ids.contains(s)).unwrap_or(false)
        })
        .map(|(i, _)| i)
        .collect();
    if witnesses.is_empty() {
        SecrecyVerdict::Holds
    } else {
        SecrecyVerdict::Violated(witnesses)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskExposure {
    Concealed,
    /// Indices of outbound task-revealing events.
    Exposed(Vec<usize>),
}

impl TaskExposure {
    pub fn exposed(&self) -> bool {
        matches!(self, TaskExposure::Exposed(_))
    }
}

/// Per-task verdict: a task is exposed iff some outbound event concerning it
/// is task-revealing. Tasks that never appear in the ledger are absent; the
/// caller may treat them as concealed.
pub fn task_privacy_exposure(ledger: &FlowLedger) -> BTreeMap<String, TaskExposure> {
    let mut out: BTreeMap<String, TaskExposure> = BTreeMap::new();
    for (i, e) in ledger.events().iter().enumerate() {
        let Some(task) = &e.task else { continue };
        let entry = out.entry(task.clone()).or_insert(TaskExposure::Concealed);
        if e.task_revealing && e.is_silo_outbound() {
            match entry {
                TaskExposure::Concealed => *entry = TaskExposure::Exposed(vec![i]),
                TaskExposure::Exposed(w) => w.push(i),
            }
        }
    }
    out
}
