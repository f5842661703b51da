use std::collections::{BTreeMap, VecDeque};
use std::ops::{Add, AddAssign, Sub};
use std::sync::{Arc, OnceLock};

use parking_lot::Mutex;

use super::{Fabric, FabricError, LatencyModel, NodeId, QpId, RemoteAddress, Side, Transport, Verb};

/// The operation carried by a WQE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkRequest {
    Read { remote: RemoteAddress, len: u64 },
    Write { remote: RemoteAddress, payload: Vec<u8> },
    Cas { remote: RemoteAddress, compare: u64, swap: u64 },
    FetchAdd { remote: RemoteAddress, delta: u64 },
    Send { payload: Vec<u8> },
}

impl WorkRequest {
    pub fn verb(&self) -> Verb {
        match self {
            WorkRequest::Read { .. } => Verb::Read,
            WorkRequest::Write { .. } => Verb::Write,
            WorkRequest::Cas { .. } => Verb::Cas,
            WorkRequest::FetchAdd { .. } => Verb::FetchAdd,
            WorkRequest::Send { .. } => Verb::Send,
        }
    }

    /// Bytes moved over the wire.
    pub fn size(&self) -> u64 {
        match self {
            WorkRequest::Read { len, .. } => *len,
            WorkRequest::Write { payload, .. } | WorkRequest::Send { payload } => payload.len() as u64,
            WorkRequest::Cas { .. } | WorkRequest::FetchAdd { .. } => 8,
        }
    }
}

/// A posted verb.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkQueueElement {
    pub seq: u64,
    pub signaled: bool,
    pub request: WorkRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompletionStatus {
    Ok,
    AccessError,
    ReceiverNotReady,
    UnsupportedVerb,
}

/// Completion event for a signaled WQE, a failed WQE, or a consumed receive.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub qp: QpId,
    pub seq: u64,
    pub verb: Verb,
    pub status: CompletionStatus,
    /// READ data, the old word of an atomic, or the received message.
    pub result: Vec<u8>,
    pub modeled_latency: f64,
    pub error: Option<FabricError>,
}

impl Completion {
    pub fn is_ok(&self) -> bool {
        self.status == CompletionStatus::Ok
    }

    /// Result of an atomic as a word.
    pub fn word(&self) -> Option<u64> {
        (self.result.len() == 8).then(|| u64::from_le_bytes(self.result[..].try_into().expect("8 bytes")))
    }

    fn into_result(self) -> Result<Completion, FabricError> {
        match self.error.clone() {
            None => Ok(self),
            Some(e) => Err(e),
        }
    }
}

/// A completion queue; may be shared by several queue pairs.
#[derive(Debug, Clone, Default)]
pub struct CompletionQueue {
    inner: Arc<Mutex<VecDeque<Completion>>>,
}

impl CompletionQueue {
    pub fn new() -> Self {
        CompletionQueue::default()
    }

    /// Up to `max` ready completions, oldest first.
    pub fn poll(&self, max: usize) -> Vec<Completion> {
        let mut q = self.inner.lock();
        let n = max.min(q.len());
        q.drain(..n).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, c: Completion) {
        self.inner.lock().push_back(c);
    }

    fn take(&self, qp: QpId, seq: u64) -> Option<Completion> {
        let mut q = self.inner.lock();
        let i = q.iter().position(|c| c.qp == qp && c.seq == seq)?;
        q.remove(i)
    }

    fn take_receive(&self, qp: QpId) -> Option<Completion> {
        let mut q = self.inner.lock();
        let i = q.iter().position(|c| c.qp == qp && c.verb == Verb::Receive)?;
        q.remove(i)
    }
}

/// Options for a new queue pair.
#[derive(Debug, Clone, Default)]
pub struct QpOptions {
    /// Hold posted WQEs until [`QueuePair::process_next`] is called instead
    /// of executing them at post time. Used to explore schedules.
    pub deferred: bool,
    /// Share an existing completion queue.
    pub cq: Option<CompletionQueue>,
}

impl QpOptions {
    pub fn deferred() -> Self {
        QpOptions { deferred: true, cq: None }
    }
}

/// Per queue pair accounting, owned by whoever owns the queue pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QpStats {
    pub verbs: [u64; 6],
    pub signaled_writes: u64,
    pub unsignaled_writes: u64,
    pub bytes_out: u64,
    pub bytes_in: u64,
    pub client_cycles: u64,
    /// Cycles this queue pair's node paid as the passive side.
    pub server_cycles: u64,
    /// Cycles the remote node paid for this queue pair's one-sided verbs.
    pub remote_server_cycles: u64,
}

impl QpStats {
    pub fn verb(&self, verb: Verb) -> u64 {
        self.verbs[verb.index()]
    }
}

impl AddAssign for QpStats {
    fn add_assign(&mut self, o: QpStats) {
        for (a, b) in self.verbs.iter_mut().zip(o.verbs) {
            *a += b;
        }
        self.signaled_writes += o.signaled_writes;
        self.unsignaled_writes += o.unsignaled_writes;
        self.bytes_out += o.bytes_out;
        self.bytes_in += o.bytes_in;
        self.client_cycles += o.client_cycles;
        self.server_cycles += o.server_cycles;
        self.remote_server_cycles += o.remote_server_cycles;
    }
}

impl Add for QpStats {
    type Output = QpStats;
    fn add(mut self, o: QpStats) -> QpStats {
        self += o;
        self
    }
}

impl Sub for QpStats {
    type Output = QpStats;
    fn sub(mut self, o: QpStats) -> QpStats {
        for (a, b) in self.verbs.iter_mut().zip(o.verbs) {
            *a -= b;
        }
        self.signaled_writes -= o.signaled_writes;
        self.unsignaled_writes -= o.unsignaled_writes;
        self.bytes_out -= o.bytes_out;
        self.bytes_in -= o.bytes_in;
        self.client_cycles -= o.client_cycles;
        self.server_cycles -= o.server_cycles;
        self.remote_server_cycles -= o.remote_server_cycles;
        self
    }
}

#[derive(Debug)]
struct PostedReceive {
    seq: u64,
    capacity: u64,
}

struct LinkEnd {
    qp: QpId,
    node: NodeId,
    cq: CompletionQueue,
    stats: Mutex<QpStats>,
}

/// Shared state of a two-sided connection.
pub(crate) struct Link {
    receives: [Mutex<VecDeque<PostedReceive>>; 2],
    ends: [OnceLock<LinkEnd>; 2],
}

impl Link {
    pub(crate) fn new() -> Arc<Link> {
        Arc::new(Link { receives: Default::default(), ends: Default::default() })
    }
}

/// One end of a connection. Not shared between threads; a session owns its
/// queue pairs.
pub struct QueuePair {
    id: QpId,
    local: NodeId,
    remote: NodeId,
    transport: Transport,
    fabric: Fabric,
    cq: CompletionQueue,
    deferred: bool,
    send_queue: VecDeque<WorkQueueElement>,
    next_seq: u64,
    link: Option<(Arc<Link>, usize)>,
    stats: QpStats,
}

impl std::fmt::Debug for QueuePair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QueuePair")
            .field("id", &self.id)
            .field("local", &self.local)
            .field("remote", &self.remote)
            .field("transport", &self.transport)
            .field("pending", &self.send_queue.len())
            .finish()
    }
}

impl QueuePair {
    pub(crate) fn new(
        fabric: Fabric,
        id: QpId,
        local: NodeId,
        remote: NodeId,
        transport: Transport,
        options: QpOptions,
        link: Option<(Arc<Link>, usize)>,
    ) -> Self {
        let cq = options.cq.unwrap_or_default();
        if let Some((l, side)) = &link {
            let end = LinkEnd { qp: id, node: local, cq: cq.clone(), stats: Mutex::new(QpStats::default()) };
            assert!(l.ends[*side].set(end).is_ok(), "link end initialised twice");
        }
        QueuePair {
            id,
            local,
            remote,
            transport,
            fabric,
            cq,
            deferred: options.deferred,
            send_queue: VecDeque::new(),
            next_seq: 0,
            link,
            stats: QpStats::default(),
        }
    }

    pub fn id(&self) -> QpId {
        self.id
    }

    pub fn local(&self) -> NodeId {
        self.local
    }

    pub fn remote(&self) -> NodeId {
        self.remote
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    pub fn cq(&self) -> &CompletionQueue {
        &self.cq
    }

    pub fn model(&self) -> &LatencyModel {
        self.fabric.model()
    }

    /// Accounting for everything this queue pair did, including cycles its
    /// node paid for messages received from the peer.
    pub fn stats(&self) -> QpStats {
        let mut s = self.stats;
        if let Some((link, side)) = &self.link {
            if let Some(end) = link.ends[*side].get() {
                s += *end.stats.lock();
            }
        }
        s
    }

    /// Number of posted WQEs not yet executed.
    pub fn pending(&self) -> usize {
        self.send_queue.len()
    }

    /// Posts a WQE and returns its sequence number.
    pub fn post(&mut self, request: WorkRequest, signaled: bool) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        let verb = request.verb();
        self.stats.verbs[verb.index()] += 1;
        if verb == Verb::Write {
            if signaled {
                self.stats.signaled_writes += 1;
            } else {
                self.stats.unsignaled_writes += 1;
            }
        }
        self.fabric.inner.metrics.record(self.local, self.transport, |c| c.verbs[verb.index()] += 1);
        self.send_queue.push_back(WorkQueueElement { seq, signaled, request });
        if !self.deferred {
            self.process_all();
        }
        seq
    }

    pub fn post_read(&mut self, remote: RemoteAddress, len: u64, signaled: bool) -> u64 {
        self.post(WorkRequest::Read { remote, len }, signaled)
    }

    pub fn post_write(&mut self, remote: RemoteAddress, payload: Vec<u8>, signaled: bool) -> u64 {
        self.post(WorkRequest::Write { remote, payload }, signaled)
    }

    pub fn post_cas(&mut self, remote: RemoteAddress, compare: u64, swap: u64, signaled: bool) -> u64 {
        self.post(WorkRequest::Cas { remote, compare, swap }, signaled)
    }

    pub fn post_fetch_add(&mut self, remote: RemoteAddress, delta: u64, signaled: bool) -> u64 {
        self.post(WorkRequest::FetchAdd { remote, delta }, signaled)
    }

    pub fn post_send(&mut self, payload: Vec<u8>, signaled: bool) -> u64 {
        self.post(WorkRequest::Send { payload }, signaled)
    }

    /// Posts a receive buffer of `capacity` bytes for the next incoming SEND.
    pub fn post_receive(&mut self, capacity: u64) -> Result<u64, FabricError> {
        let (link, side) = self.link.as_ref().ok_or(FabricError::NotConnected)?;
        let seq = self.next_seq;
        self.next_seq += 1;
        link.receives[*side].lock().push_back(PostedReceive { seq, capacity });
        self.stats.verbs[Verb::Receive.index()] += 1;
        self.fabric.inner.metrics.record(self.local, self.transport, |c| c.verbs[Verb::Receive.index()] += 1);
        Ok(seq)
    }

    /// Executes the oldest pending WQE, as the NIC would. Returns false when
    /// nothing was pending.
    pub fn process_next(&mut self) -> bool {
        match self.send_queue.pop_front() {
            Some(wqe) => {
                self.execute(wqe);
                true
            }
            None => false,
        }
    }

    pub fn process_all(&mut self) {
        while self.process_next() {}
    }

    /// Ready completions of this queue pair's completion queue.
    pub fn poll(&self, max: usize) -> Vec<Completion> {
        self.cq.poll(max)
    }

    fn execute(&mut self, wqe: WorkQueueElement) {
        let verb = wqe.request.verb();
        let size = wqe.request.size();
        let model = &self.fabric.inner.model;
        let latency = model.latency(self.transport, verb, size);
        let outcome = if verb.is_one_sided() {
            self.execute_one_sided(&wqe.request)
        } else {
            self.execute_send(&wqe.request, latency)
        };
        let (status, result, error) = match outcome {
            Ok(result) => (CompletionStatus::Ok, result, None),
            Err(e) => {
                let status = match e {
                    FabricError::ReceiverNotReady => CompletionStatus::ReceiverNotReady,
                    FabricError::UnsupportedVerb { .. } | FabricError::NotConnected => CompletionStatus::UnsupportedVerb,
                    _ => CompletionStatus::AccessError,
                };
                (status, Vec::new(), Some(e))
            }
        };
        if wqe.signaled || status != CompletionStatus::Ok {
            self.cq.push(Completion {
                qp: self.id,
                seq: wqe.seq,
                verb,
                status,
                result,
                modeled_latency: latency,
                error,
            });
        }
    }

    fn execute_one_sided(&mut self, request: &WorkRequest) -> Result<Vec<u8>, FabricError> {
        let verb = request.verb();
        if !self.transport.supports_one_sided() {
            return Err(FabricError::UnsupportedVerb { verb, transport: self.transport });
        }
        let (remote, len) = match request {
            WorkRequest::Read { remote, len } => (*remote, *len),
            WorkRequest::Write { remote, payload } => (*remote, payload.len() as u64),
            WorkRequest::Cas { remote, .. } | WorkRequest::FetchAdd { remote, .. } => (*remote, 8),
            WorkRequest::Send { .. } => unreachable!("two-sided"),
        };
        if remote.node != self.remote {
            return Err(FabricError::Access { addr: remote, len });
        }
        if verb.is_atomic() && remote.offset % 8 != 0 {
            return Err(FabricError::Misaligned { addr: remote });
        }
        let region = self.fabric.inner.memory.read().resolve(remote, len)?;
        let result = match request {
            WorkRequest::Read { len, .. } => region.read(remote, *len as usize),
            WorkRequest::Write { payload, .. } => {
                region.write(remote, payload);
                Vec::new()
            }
            WorkRequest::Cas { compare, swap, .. } => {
                let old = region.update_word(remote, |cur| if cur == *compare { *swap } else { cur });
                old.to_le_bytes().to_vec()
            }
            WorkRequest::FetchAdd { delta, .. } => {
                let old = region.update_word(remote, |cur| cur.wrapping_add(*delta));
                old.to_le_bytes().to_vec()
            }
            WorkRequest::Send { .. } => unreachable!("two-sided"),
        };
        let model = &self.fabric.inner.model;
        let client = model.cpu_cycles(self.transport, verb, len, Side::Client);
        let server = model.cpu_cycles(self.transport, verb, len, Side::Server);
        let (out, inn) = match verb {
            Verb::Read => (0, len),
            Verb::Write => (len, 0),
            _ => (8, 8),
        };
        self.stats.bytes_out += out;
        self.stats.bytes_in += inn;
        self.stats.client_cycles += client;
        self.stats.remote_server_cycles += server;
        let metrics = &self.fabric.inner.metrics;
        metrics.record(self.local, self.transport, |c| {
            c.bytes_sent += out;
            c.bytes_received += inn;
            c.client_cycles += client;
        });
        metrics.record(self.remote, self.transport, |c| {
            c.bytes_sent += inn;
            c.bytes_received += out;
            c.server_cycles += server;
        });
        Ok(result)
    }

    fn execute_send(&mut self, request: &WorkRequest, latency: f64) -> Result<Vec<u8>, FabricError> {
        let WorkRequest::Send { payload } = request else { unreachable!("one-sided") };
        let (link, side) = self.link.as_ref().ok_or(FabricError::NotConnected)?;
        let peer = 1 - side;
        let posted = link.receives[peer].lock().pop_front().ok_or(FabricError::ReceiverNotReady)?;
        let end = link.ends[peer].get().ok_or(FabricError::NotConnected)?;
        let len = payload.len() as u64;
        if len > posted.capacity {
            let err = FabricError::Access { addr: RemoteAddress::new(end.node, 0), len };
            end.cq.push(Completion {
                qp: end.qp,
                seq: posted.seq,
                verb: Verb::Receive,
                status: CompletionStatus::AccessError,
                result: Vec::new(),
                modeled_latency: latency,
                error: Some(err.clone()),
            });
            return Err(err);
        }
        let model = &self.fabric.inner.model;
        let send_cycles = model.cpu_cycles(self.transport, Verb::Send, len, Side::Client);
        let recv_cycles = model.cpu_cycles(self.transport, Verb::Receive, len, Side::Server);
        self.stats.bytes_out += len;
        self.stats.client_cycles += send_cycles;
        {
            let mut s = end.stats.lock();
            s.bytes_in += len;
            s.server_cycles += recv_cycles;
        }
        let metrics = &self.fabric.inner.metrics;
        metrics.record(self.local, self.transport, |c| {
            c.bytes_sent += len;
            c.client_cycles += send_cycles;
        });
        metrics.record(end.node, self.transport, |c| {
            c.bytes_received += len;
            c.server_cycles += recv_cycles;
        });
        end.cq.push(Completion {
            qp: end.qp,
            seq: posted.seq,
            verb: Verb::Receive,
            status: CompletionStatus::Ok,
            result: payload.clone(),
            modeled_latency: latency,
            error: None,
        });
        Ok(Vec::new())
    }

    /// Posts a signaled WQE, drives the queue until it has executed and
    /// returns its completion.
    pub fn execute_signaled(&mut self, request: WorkRequest) -> Result<Completion, FabricError> {
        let seq = self.post(request, true);
        self.process_all();
        self.cq.take(self.id, seq).ok_or(FabricError::MissingCompletion { seq })?.into_result()
    }

    pub fn read(&mut self, remote: RemoteAddress, len: u64) -> Result<Vec<u8>, FabricError> {
        Ok(self.execute_signaled(WorkRequest::Read { remote, len })?.result)
    }

    pub fn write(&mut self, remote: RemoteAddress, payload: Vec<u8>) -> Result<(), FabricError> {
        self.execute_signaled(WorkRequest::Write { remote, payload }).map(drop)
    }

    /// Returns the word stored before the compare-and-swap.
    pub fn cas(&mut self, remote: RemoteAddress, compare: u64, swap: u64) -> Result<u64, FabricError> {
        let c = self.execute_signaled(WorkRequest::Cas { remote, compare, swap })?;
        Ok(c.word().expect("atomic result"))
    }

    pub fn fetch_add(&mut self, remote: RemoteAddress, delta: u64) -> Result<u64, FabricError> {
        let c = self.execute_signaled(WorkRequest::FetchAdd { remote, delta })?;
        Ok(c.word().expect("atomic result"))
    }

    /// Sends a message; the peer must already have posted a receive.
    pub fn send(&mut self, payload: Vec<u8>) -> Result<(), FabricError> {
        self.execute_signaled(WorkRequest::Send { payload }).map(drop)
    }

    /// Takes the oldest delivered message from this queue pair's completion
    /// queue.
    pub fn recv(&mut self) -> Result<Vec<u8>, FabricError> {
        let c = self.cq.take_receive(self.id).ok_or(FabricError::MissingCompletion { seq: u64::MAX })?;
        Ok(c.into_result()?.result)
    }
}

/// A client's view of the cluster: one RDMA queue pair per remote node and a
/// modeled clock the protocol layers advance.
pub struct Session {
    fabric: Fabric,
    node: NodeId,
    qps: BTreeMap<NodeId, QueuePair>,
    clock: f64,
    retired: QpStats,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("node", &self.node).field("clock", &self.clock).finish()
    }
}

impl Session {
    pub(crate) fn new(fabric: Fabric, node: NodeId) -> Self {
        Session { fabric, node, qps: BTreeMap::new(), clock: 0.0, retired: QpStats::default() }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn model(&self) -> &LatencyModel {
        self.fabric.model()
    }

    pub fn qp(&mut self, remote: NodeId) -> &mut QueuePair {
        let (fabric, node) = (&self.fabric, self.node);
        self.qps.entry(remote).or_insert_with(|| fabric.connect(node, remote))
    }

    /// Replaces the queue pair to `remote`, e.g. with a deferred one.
    pub fn install_qp(&mut self, qp: QueuePair) {
        assert_eq!(qp.local(), self.node);
        if let Some(old) = self.qps.insert(qp.remote(), qp) {
            self.retired += old.stats();
        }
    }

    /// Sum of all queue pair statistics of this session.
    pub fn stats(&self) -> QpStats {
        self.qps.values().fold(self.retired, |acc, qp| acc + qp.stats())
    }

    pub fn modeled_time(&self) -> f64 {
        self.clock
    }

    pub fn advance(&mut self, seconds: f64) {
        self.clock += seconds;
    }

    pub fn read(&mut self, addr: RemoteAddress, len: u64) -> Result<Vec<u8>, FabricError> {
        self.qp(addr.node).read(addr, len)
    }

    pub fn write(&mut self, addr: RemoteAddress, payload: Vec<u8>) -> Result<(), FabricError> {
        self.qp(addr.node).write(addr, payload)
    }

    /// Unsignaled WRITE; errors still surface as completions and are
    /// returned here.
    pub fn write_unsignaled(&mut self, addr: RemoteAddress, payload: Vec<u8>) -> Result<(), FabricError> {
        let qp = self.qp(addr.node);
        let seq = qp.post_write(addr, payload, false);
        qp.process_all();
        match qp.cq.take(qp.id, seq) {
            Some(c) => c.into_result().map(drop),
            None => Ok(()),
        }
    }

    pub fn cas(&mut self, addr: RemoteAddress, compare: u64, swap: u64) -> Result<u64, FabricError> {
        self.qp(addr.node).cas(addr, compare, swap)
    }

    pub fn fetch_add(&mut self, addr: RemoteAddress, delta: u64) -> Result<u64, FabricError> {
        self.qp(addr.node).fetch_add(addr, delta)
    }

    /// Client CPU time for `verbs` RDMA verbs.
    pub fn rdma_cpu_seconds(&self, verbs: u64) -> f64 {
        let m = self.model();
        m.cycles_to_seconds(verbs * m.rdma_cycles)
    }
}
