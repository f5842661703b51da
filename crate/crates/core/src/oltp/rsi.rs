//! Client-driven snapshot isolation over one-sided verbs.

use std::collections::HashMap;

use crate::fabric::{NodeId, QpStats, RemoteAddress, Session, Transport, Verb};
use crate::oracle::{OracleClient, TimestampVector};
use crate::store::{decode_header, encode_header, RecordBlock, Store, TableId};

use super::{
    txn_id, AbortReason, CommitReport, OltpError, Outcome, ProtocolTally, ReadItem, TxnDescriptor, WriteItem,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RsiConfig {
    /// Extra READs of a locked header before giving up.
    pub read_retries: u32,
}

impl Default for RsiConfig {
    fn default() -> Self {
        RsiConfig { read_retries: 10 }
    }
}

/// An open transaction.
#[derive(Debug, Clone)]
pub struct RsiTxn {
    desc: TxnDescriptor,
    blocks: HashMap<(TableId, u64), RecordBlock>,
}

impl RsiTxn {
    pub fn descriptor(&self) -> &TxnDescriptor {
        &self.desc
    }

    pub fn rid(&self) -> u64 {
        self.desc.rid
    }

    pub fn write(&mut self, table: TableId, key: u64, payload: Vec<u8>) -> Result<(), OltpError> {
        self.desc.buffer_write(table, key, payload)
    }

    pub fn insert(&mut self, table: TableId, payload: Vec<u8>) {
        self.desc.inserts.push(WriteItem { table, key: u64::MAX, payload });
    }
}

/// Result of a single READ of a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadAttempt {
    Value(Vec<u8>),
    Locked,
    Abort(AbortReason),
}

/// One client: a session, its oracle stripe and the store it talks to.
pub struct RsiClient {
    store: Store,
    oracle: OracleClient,
    session: Session,
    config: RsiConfig,
    seq: u64,
}

impl RsiClient {
    /// `client` is the 1-based oracle client number; `node` the compute node
    /// the session runs on.
    pub fn new(
        store: &Store,
        vector: &TimestampVector,
        client: u32,
        node: NodeId,
        config: RsiConfig,
    ) -> Result<Self, OltpError> {
        Ok(RsiClient {
            store: store.clone(),
            oracle: vector.client(client)?,
            session: store.fabric().open_session(node),
            config,
            seq: 0,
        })
    }

    pub fn client(&self) -> u32 {
        self.oracle.client()
    }

    pub fn session(&mut self) -> &mut Session {
        &mut self.session
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Starts a transaction at the current RID (one READ of the vector).
    pub fn begin(&mut self) -> Result<RsiTxn, OltpError> {
        let rid = self.oracle.current_rid(&mut self.session)?;
        self.seq += 1;
        Ok(RsiTxn { desc: TxnDescriptor::new(txn_id(self.client(), self.seq), self.client(), rid), blocks: HashMap::new() })
    }

    /// One READ of the record's block.
    pub fn try_read(&mut self, txn: &mut RsiTxn, table: TableId, key: u64) -> Result<ReadAttempt, OltpError> {
        if let Some(p) = txn.desc.written(table, key) {
            return Ok(ReadAttempt::Value(p.to_vec()));
        }
        if let Some(b) = txn.blocks.get(&(table, key)) {
            return Ok(ReadAttempt::Value(b.payload.clone()));
        }
        let block = self.store.read_block(&mut self.session, table, key)?;
        if block.lock {
            return Ok(ReadAttempt::Locked);
        }
        if block.cid > txn.desc.rid {
            return Ok(ReadAttempt::Abort(AbortReason::SnapshotUnavailable { table, key, head_cid: block.cid }));
        }
        let payload = block.payload.clone();
        txn.desc.reads.push(ReadItem { table, key, cid: block.cid });
        txn.blocks.insert((table, key), block);
        Ok(ReadAttempt::Value(payload))
    }

    /// Reads with bounded retries on a locked header. Abort reasons come back
    /// as [`OltpError::Aborted`]; the caller then calls [`Self::abort`].
    pub fn read(&mut self, txn: &mut RsiTxn, table: TableId, key: u64) -> Result<Vec<u8>, OltpError> {
        for _ in 0..=self.config.read_retries {
            match self.try_read(txn, table, key)? {
                ReadAttempt::Value(v) => return Ok(v),
                ReadAttempt::Abort(r) => return Err(OltpError::Aborted(r)),
                ReadAttempt::Locked => {}
            }
        }
        Err(OltpError::Aborted(AbortReason::LockContention { table, key }))
    }

    /// Ends a transaction that failed before commit. Consumes and publishes
    /// one timestamp so the RID keeps advancing.
    pub fn abort(&mut self, txn: RsiTxn, reason: AbortReason) -> Result<TxnDescriptor, OltpError> {
        let mut desc = txn.desc;
        let cid = self.oracle.next_cid()?;
        self.oracle.publish_commit(&mut self.session, cid)?;
        desc.outcome = Outcome::Aborted(reason);
        Ok(desc)
    }

    pub fn commit(&mut self, txn: RsiTxn) -> Result<CommitReport, OltpError> {
        let mut c = self.start_commit(txn)?;
        while !c.step(self)? {}
        Ok(c.finish(self))
    }

    /// A commit that advances one verb per [`RsiCommit::step`].
    pub fn start_commit(&mut self, txn: RsiTxn) -> Result<RsiCommit, OltpError> {
        let before = self.session.stats();
        let RsiTxn { mut desc, mut blocks } = txn;
        if desc.is_read_only() {
            desc.outcome = Outcome::Committed;
            return Ok(RsiCommit::finished(desc, before));
        }
        let cid = self.oracle.next_cid()?;
        desc.cid = Some(cid);
        let mut items = Vec::with_capacity(desc.writes.len());
        for w in &desc.writes {
            let addr = self.store.locate(w.table, w.key)?;
            let block = blocks.remove(&(w.table, w.key)).expect("written keys were read");
            items.push(LockItem { table: w.table, key: w.key, addr, block, payload: w.payload.clone() });
        }
        items.sort_by_key(|i| i.addr);
        let mut commit = RsiCommit {
            desc,
            cid,
            items,
            phase: Phase::Lock,
            next: 0,
            locked: 0,
            abort: None,
            before,
            phase_latency: [0.0; 3],
        };
        if commit.items.is_empty() {
            commit.advance_after_lock();
        }
        Ok(commit)
    }
}

#[derive(Debug, Clone)]
struct LockItem {
    table: TableId,
    key: u64,
    addr: RemoteAddress,
    block: RecordBlock,
    payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Lock,
    Allocate,
    Install,
    Rollback,
    Publish,
    Done,
}

/// Commit state machine. Each step issues at most one verb.
#[derive(Debug, Clone)]
pub struct RsiCommit {
    desc: TxnDescriptor,
    cid: u64,
    items: Vec<LockItem>,
    phase: Phase,
    next: usize,
    locked: usize,
    abort: Option<AbortReason>,
    before: QpStats,
    /// Slowest verb of the lock, install and rollback phases; verbs within a
    /// phase are posted together.
    phase_latency: [f64; 3],
}

impl RsiCommit {
    fn finished(desc: TxnDescriptor, before: QpStats) -> Self {
        RsiCommit {
            desc,
            cid: 0,
            items: Vec::new(),
            phase: Phase::Done,
            next: 0,
            locked: 0,
            abort: None,
            before,
            phase_latency: [0.0; 3],
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn descriptor(&self) -> &TxnDescriptor {
        &self.desc
    }

    fn charge(&mut self, client: &RsiClient, phase: usize, verb: Verb, size: u64) {
        let l = client.session.model().latency(Transport::Rdma, verb, size);
        self.phase_latency[phase] = self.phase_latency[phase].max(l);
    }

    fn fail(&mut self, reason: AbortReason) {
        self.abort = Some(reason);
        self.phase = Phase::Rollback;
        self.next = 0;
    }

    /// Executes the next verb. Returns true once the commit has finished.
    pub fn step(&mut self, client: &mut RsiClient) -> Result<bool, OltpError> {
        match self.phase {
            Phase::Lock => {
                let item = &self.items[self.next];
                let expected = encode_header(false, item.block.cid);
                let (addr, table, key) = (item.addr, item.table, item.key);
                let old = client.session.cas(addr, expected, encode_header(true, item.block.cid));
                self.charge(client, 0, Verb::Cas, 8);
                match old {
                    Ok(old) if old == expected => {
                        self.locked += 1;
                        self.next += 1;
                    }
                    Ok(old) => {
                        let (locked, found_cid) = decode_header(old);
                        self.fail(AbortReason::Validation { table, key, found_cid, locked });
                    }
                    Err(e) => self.fail(AbortReason::Fabric(e.to_string())),
                }
                if self.phase == Phase::Lock && self.next == self.items.len() {
                    self.advance_after_lock();
                }
            }
            Phase::Allocate => {
                let table = self.desc.inserts[self.next].table;
                let r = client.store.allocate(&mut client.session, table);
                self.charge(client, 0, Verb::FetchAdd, 8);
                match r {
                    Ok(key) => {
                        self.desc.inserts[self.next].key = key;
                        self.next += 1;
                        if self.next == self.desc.inserts.len() {
                            self.phase = Phase::Install;
                            self.next = 0;
                        }
                    }
                    Err(crate::store::StoreError::AllocationExhausted { .. }) => {
                        self.fail(AbortReason::Allocation { table })
                    }
                    Err(e) => self.fail(AbortReason::Fabric(e.to_string())),
                }
            }
            Phase::Install => {
                let n = self.items.len();
                if self.next < n {
                    let item = &self.items[self.next];
                    let bytes = item.block.with_new_version(self.cid, item.payload.clone()).encode();
                    let (addr, size) = (item.addr, bytes.len() as u64);
                    client.session.write(addr, bytes)?;
                    self.charge(client, 1, Verb::Write, size);
                } else {
                    let ins = &self.desc.inserts[self.next - n];
                    let (table, key) = (ins.table, ins.key);
                    client.store.write_fresh(&mut client.session, table, key, &ins.payload, self.cid)?;
                    let size = client.store.table(table)?.block_size as u64;
                    self.charge(client, 1, Verb::Write, size);
                }
                self.next += 1;
                if self.next == n + self.desc.inserts.len() {
                    self.phase = Phase::Publish;
                }
            }
            Phase::Rollback => {
                if self.next < self.locked {
                    let item = &self.items[self.next];
                    let header = encode_header(false, item.block.cid).to_le_bytes().to_vec();
                    client.session.write(item.addr, header)?;
                    self.charge(client, 2, Verb::Write, 8);
                    self.next += 1;
                }
                if self.next >= self.locked {
                    self.phase = Phase::Publish;
                }
            }
            Phase::Publish => {
                client.oracle.publish_commit(&mut client.session, self.cid)?;
                self.desc.outcome = match self.abort.take() {
                    None => Outcome::Committed,
                    Some(r) => Outcome::Aborted(r),
                };
                self.phase = Phase::Done;
            }
            Phase::Done => {}
        }
        Ok(self.phase == Phase::Done)
    }

    fn advance_after_lock(&mut self) {
        self.next = 0;
        self.phase = if self.desc.inserts.is_empty() { Phase::Install } else { Phase::Allocate };
    }

    /// Report for a finished commit.
    pub fn finish(mut self, client: &RsiClient) -> CommitReport {
        assert!(self.is_done(), "commit still in progress");
        let delta = client.session.stats() - self.before;
        let cpu = client.session.model().cycles_to_seconds(delta.client_cycles);
        let latency = self.phase_latency.iter().sum::<f64>() + cpu;
        if self.desc.outcome == Outcome::Active {
            self.desc.outcome = Outcome::Committed;
        }
        CommitReport { txn: self.desc, tally: ProtocolTally::from_stats(&delta), latency }
    }
}
