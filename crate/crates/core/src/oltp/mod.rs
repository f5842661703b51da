//! Snapshot-isolation commit protocols.
//!
//! [`rsi`] is the client-driven protocol over one-sided verbs: a CAS on each
//! record header validates and locks in one verb, a full-block WRITE installs
//! the new version and unlocks, and an unsignaled WRITE publishes the commit
//! timestamp. [`trad`] is the coordinator-based baseline: a transaction
//! manager runs two-phase commit against resource managers over SEND/RECEIVE.
//!
//! Both produce [`TxnDescriptor`]s that [`checker`] validates.

pub mod checker;
pub mod history;
pub mod rsi;
pub mod schedule;
pub mod trad;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::fabric::{FabricError, NodeId, QpStats, Verb};
use crate::oracle::OracleError;
use crate::store::{StoreError, TableId};

pub type TxnId = u64;

/// Genesis timestamp of bulk-loaded rows.
pub const GENESIS_CID: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadItem {
    pub table: TableId,
    pub key: u64,
    /// Commit timestamp of the version that was read.
    pub cid: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteItem {
    pub table: TableId,
    pub key: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbortReason {
    /// The header no longer matched the version that was read.
    Validation { table: TableId, key: u64, found_cid: u64, locked: bool },
    /// Only a version newer than the snapshot is stored.
    SnapshotUnavailable { table: TableId, key: u64, head_cid: u64 },
    LockContention { table: TableId, key: u64 },
    /// A resource manager refused to prepare.
    VoteNo { rm: NodeId },
    Allocation { table: TableId },
    Fabric(String),
}

impl AbortReason {
    pub fn kind(&self) -> &'static str {
        match self {
            AbortReason::Validation { .. } => "validation",
            AbortReason::SnapshotUnavailable { .. } => "snapshot_unavailable",
            AbortReason::LockContention { .. } => "lock_contention",
            AbortReason::VoteNo { .. } => "vote_no",
            AbortReason::Allocation { .. } => "allocation",
            AbortReason::Fabric(_) => "fabric",
        }
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::Validation { table, key, found_cid, locked } => {
                write!(f, "validation failed on {}:{key} (found cid {found_cid}, locked {locked})", table.0)
            }
            AbortReason::SnapshotUnavailable { table, key, head_cid } => {
                write!(f, "no version of {}:{key} old enough (head cid {head_cid})", table.0)
            }
            AbortReason::LockContention { table, key } => write!(f, "{}:{key} stayed locked", table.0),
            AbortReason::VoteNo { rm } => write!(f, "resource manager {rm} voted no"),
            AbortReason::Allocation { table } => write!(f, "table {} is full", table.0),
            AbortReason::Fabric(e) => write!(f, "fabric error: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Active,
    Committed,
    Aborted(AbortReason),
}

impl Outcome {
    pub fn is_committed(&self) -> bool {
        matches!(self, Outcome::Committed)
    }
}

/// Everything a transaction read and wrote, and how it ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnDescriptor {
    pub id: TxnId,
    pub client: u32,
    pub rid: u64,
    pub reads: Vec<ReadItem>,
    /// Updates of keys that were read first.
    pub writes: Vec<WriteItem>,
    /// New records; keys are assigned during commit.
    pub inserts: Vec<WriteItem>,
    /// Commit timestamp; `None` for read-only transactions.
    pub cid: Option<u64>,
    pub outcome: Outcome,
}

impl TxnDescriptor {
    pub fn new(id: TxnId, client: u32, rid: u64) -> Self {
        TxnDescriptor {
            id,
            client,
            rid,
            reads: Vec::new(),
            writes: Vec::new(),
            inserts: Vec::new(),
            cid: None,
            outcome: Outcome::Active,
        }
    }

    pub fn read_cid(&self, table: TableId, key: u64) -> Option<u64> {
        self.reads.iter().find(|r| r.table == table && r.key == key).map(|r| r.cid)
    }

    pub fn is_read_only(&self) -> bool {
        self.writes.is_empty() && self.inserts.is_empty()
    }

    /// Buffers an update. Keys must have been read first.
    pub fn buffer_write(&mut self, table: TableId, key: u64, payload: Vec<u8>) -> Result<(), OltpError> {
        if self.read_cid(table, key).is_none() {
            return Err(OltpError::BlindWrite { table, key });
        }
        match self.writes.iter_mut().find(|w| w.table == table && w.key == key) {
            Some(w) => w.payload = payload,
            None => self.writes.push(WriteItem { table, key, payload }),
        }
        Ok(())
    }

    pub(crate) fn written(&self, table: TableId, key: u64) -> Option<&[u8]> {
        self.writes.iter().find(|w| w.table == table && w.key == key).map(|w| &w.payload[..])
    }
}

/// Verb and message counts of one commit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProtocolTally {
    pub reads: u64,
    pub cas: u64,
    pub fetch_adds: u64,
    pub signaled_writes: u64,
    pub unsignaled_writes: u64,
    pub sends: u64,
    pub receives: u64,
    /// Messages (received, sent) per server node; the timestamp service is
    /// not included.
    pub servers: BTreeMap<NodeId, (u64, u64)>,
    /// CPU cycles charged to storage nodes.
    pub storage_cycles: u64,
}

impl ProtocolTally {
    pub(crate) fn from_stats(d: &QpStats) -> Self {
        ProtocolTally {
            reads: d.verb(Verb::Read),
            cas: d.verb(Verb::Cas),
            fetch_adds: d.verb(Verb::FetchAdd),
            signaled_writes: d.signaled_writes,
            unsignaled_writes: d.unsignaled_writes,
            sends: d.verb(Verb::Send),
            receives: d.verb(Verb::Receive),
            servers: BTreeMap::new(),
            storage_cycles: d.remote_server_cycles,
        }
    }

    /// Messages received by servers.
    pub fn m_r(&self) -> u64 {
        self.servers.values().map(|v| v.0).sum()
    }

    /// Messages sent by servers.
    pub fn m_s(&self) -> u64 {
        self.servers.values().map(|v| v.1).sum()
    }
}

/// Result of a commit attempt.
#[derive(Debug, Clone)]
pub struct CommitReport {
    pub txn: TxnDescriptor,
    pub tally: ProtocolTally,
    /// Modeled time from commit request to the client learning the outcome.
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OltpError {
    #[error("transaction aborted: {0}")]
    Aborted(AbortReason),
    #[error("blind write to {}:{key}", table.0)]
    BlindWrite { table: TableId, key: u64 },
    #[error("transaction already finished")]
    Finished,
    #[error("malformed message: {0}")]
    Message(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// Transaction id from client and per-client sequence number.
pub fn txn_id(client: u32, seq: u64) -> TxnId {
    ((client as u64) << 40) | seq
}
