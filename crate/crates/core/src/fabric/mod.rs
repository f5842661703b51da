//! In-process simulated RDMA fabric.
//!
//! Storage nodes expose registered memory regions. Compute nodes reach that
//! memory only through queue pairs, posting work queue elements (WQEs) for the
//! one-sided verbs (READ, WRITE, CAS, FETCH_ADD) or exchanging SEND/RECEIVE
//! messages with a peer. Verbs execute functionally under real concurrency;
//! time is never measured, it is modeled: every completion carries the modeled
//! one-way latency of its verb and [`FabricMetrics`] accumulates modeled CPU
//! cycles and byte counts per node and transport.
//!
//! Guarantees:
//! - a single WQE's bytes are applied atomically (no torn writes),
//! - 64-bit atomics are linearizable against all verbs touching the word,
//! - WQEs on one queue pair execute in posting order, and a signaled
//!   completion implies that every earlier WQE on that queue pair has been
//!   applied.
//!
//! Nothing is guaranteed across queue pairs.

mod lincheck;
mod memory;
mod metrics;
mod model;
mod qp;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use thiserror::Error;

pub use lincheck::{is_linearizable, linearization, WordEvent, WordOp};
pub use memory::MemoryRegion;
pub use metrics::{FabricMetrics, MetricsSnapshot, NodeCounters};
pub use model::{AnchorCurve, CurveShape, LatencyModel, Side, TcpCycles, Transport};
pub use qp::{
    Completion, CompletionQueue, CompletionStatus, QpOptions, QpStats, QueuePair, Session, WorkQueueElement,
    WorkRequest,
};

use memory::Memory;

/// Identifier of a simulated machine.
pub type NodeId = u32;

/// Identifier of a queue pair, unique per fabric.
pub type QpId = u64;

/// A byte address inside a node's registered memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RemoteAddress {
    pub node: NodeId,
    pub offset: u64,
}

impl RemoteAddress {
    pub const fn new(node: NodeId, offset: u64) -> Self {
        RemoteAddress { node, offset }
    }

    pub const fn add(self, bytes: u64) -> Self {
        RemoteAddress { node: self.node, offset: self.offset + bytes }
    }
}

impl fmt::Display for RemoteAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:#x}", self.node, self.offset)
    }
}

/// The verbs a queue pair understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verb {
    Read,
    Write,
    Send,
    Receive,
    Cas,
    FetchAdd,
}

impl Verb {
    pub const ALL: [Verb; 6] = [Verb::Read, Verb::Write, Verb::Send, Verb::Receive, Verb::Cas, Verb::FetchAdd];

    pub fn is_one_sided(self) -> bool {
        matches!(self, Verb::Read | Verb::Write | Verb::Cas | Verb::FetchAdd)
    }

    pub fn is_atomic(self) -> bool {
        matches!(self, Verb::Cas | Verb::FetchAdd)
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Verb::Read => "read",
            Verb::Write => "write",
            Verb::Send => "send",
            Verb::Receive => "receive",
            Verb::Cas => "cas",
            Verb::FetchAdd => "fetch_add",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("memory regions must have a non-zero length")]
    EmptyRegion,
    #[error("region [{base:#x}, +{length}) on node {node} overlaps a registered region")]
    Overlap { node: NodeId, base: u64, length: u64 },
    #[error("{len} bytes at {addr} are not inside one registered region")]
    Access { addr: RemoteAddress, len: u64 },
    #[error("atomic at {addr} is not 8-byte aligned")]
    Misaligned { addr: RemoteAddress },
    #[error("no receive was posted by the peer")]
    ReceiverNotReady,
    #[error("{verb:?} is not available over {transport}")]
    UnsupportedVerb { verb: Verb, transport: Transport },
    #[error("queue pair has no peer for two-sided verbs")]
    NotConnected,
    #[error("completion for seq {seq} was not delivered")]
    MissingCompletion { seq: u64 },
}

pub(crate) struct FabricInner {
    pub(crate) memory: RwLock<Memory>,
    pub(crate) model: LatencyModel,
    pub(crate) metrics: FabricMetrics,
    next_qp: AtomicU64,
}

/// Handle to a simulated cluster. Cheap to clone; all clones share memory,
/// model and metrics.
#[derive(Clone)]
pub struct Fabric {
    pub(crate) inner: Arc<FabricInner>,
}

impl Default for Fabric {
    fn default() -> Self {
        Fabric::new()
    }
}

impl fmt::Debug for Fabric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fabric").finish_non_exhaustive()
    }
}

impl Fabric {
    pub fn new() -> Self {
        Fabric::with_model(LatencyModel::default())
    }

    pub fn with_model(model: LatencyModel) -> Self {
        Fabric {
            inner: Arc::new(FabricInner {
                memory: RwLock::new(Memory::default()),
                model,
                metrics: FabricMetrics::default(),
                next_qp: AtomicU64::new(1),
            }),
        }
    }

    pub fn model(&self) -> &LatencyModel {
        &self.inner.model
    }

    /// Registers a zero-initialized region of `length` bytes directly after
    /// the node's highest registered byte.
    pub fn register_region(&self, node: NodeId, length: u64) -> Result<MemoryRegion, FabricError> {
        self.inner.memory.write().register(node, None, length)
    }

    /// Registers a region at an explicit base offset.
    pub fn register_region_at(&self, node: NodeId, base: u64, length: u64) -> Result<MemoryRegion, FabricError> {
        self.inner.memory.write().register(node, Some(base), length)
    }

    /// Opens an RDMA queue pair from `local` to `remote` with its own
    /// completion queue.
    pub fn connect(&self, local: NodeId, remote: NodeId) -> QueuePair {
        self.connect_with(local, remote, Transport::Rdma, QpOptions::default())
    }

    pub fn connect_with(&self, local: NodeId, remote: NodeId, transport: Transport, options: QpOptions) -> QueuePair {
        QueuePair::new(self.clone(), self.next_qp_id(), local, remote, transport, options, None)
    }

    /// Connects two nodes for SEND/RECEIVE messaging. Returns the queue pair
    /// owned by `a` and the one owned by `b`.
    pub fn connect_pair(&self, a: NodeId, b: NodeId, transport: Transport) -> (QueuePair, QueuePair) {
        self.connect_pair_with(a, b, transport, QpOptions::default(), QpOptions::default())
    }

    pub fn connect_pair_with(
        &self,
        a: NodeId,
        b: NodeId,
        transport: Transport,
        a_options: QpOptions,
        b_options: QpOptions,
    ) -> (QueuePair, QueuePair) {
        let (id_a, id_b) = (self.next_qp_id(), self.next_qp_id());
        let link = qp::Link::new();
        let qa = QueuePair::new(self.clone(), id_a, a, b, transport, a_options, Some((link.clone(), 0)));
        let qb = QueuePair::new(self.clone(), id_b, b, a, transport, b_options, Some((link, 1)));
        (qa, qb)
    }

    /// A client session on compute node `node`, connecting to remote nodes on
    /// first use.
    pub fn open_session(&self, node: NodeId) -> Session {
        Session::new(self.clone(), node)
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.inner.metrics.snapshot()
    }

    /// Reads registered memory without going through a queue pair and without
    /// charging metrics; meant for dumps and test assertions.
    pub fn peek(&self, addr: RemoteAddress, len: u64) -> Result<Vec<u8>, FabricError> {
        self.inner.memory.read().read(addr, len)
    }

    /// Registered regions of a node, ordered by base offset.
    pub fn regions(&self, node: NodeId) -> Vec<MemoryRegion> {
        self.inner.memory.read().regions(node)
    }

    fn next_qp_id(&self) -> QpId {
        self.inner.next_qp.fetch_add(1, Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests;
