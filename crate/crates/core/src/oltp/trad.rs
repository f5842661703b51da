//! Coordinator-based snapshot isolation: a transaction manager (TM) obtains
//! a commit timestamp from a timestamp service (TS) and runs two-phase
//! commit against the resource managers (RMs) that own the records.
//!
//! Every message travels as an encoded SEND/RECEIVE over the configured
//! transport. The server handlers run inline on the calling client's thread,
//! each behind its own queue pairs, so message and cycle counts are exact per
//! transaction even with many concurrent clients.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::fabric::{Fabric, NodeId, QpStats, QueuePair, Transport, Verb};
use crate::store::TableId;

use super::{
    txn_id, AbortReason, CommitReport, OltpError, Outcome, ProtocolTally, ReadItem, TxnDescriptor, TxnId, WriteItem,
};

/// Placement of the protocol roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TradConfig {
    pub transport: Transport,
    pub tm: NodeId,
    pub ts: NodeId,
    pub rms: Vec<NodeId>,
}

#[derive(Debug, Default)]
struct Record {
    /// Ascending by cid.
    versions: Vec<(u64, Vec<u8>)>,
    lock: Option<TxnId>,
}

#[derive(Debug, Default)]
struct RmState {
    records: HashMap<(TableId, u64), Record>,
    next_local: HashMap<TableId, u64>,
}

#[derive(Debug)]
struct TsState {
    next: u64,
    finished: BTreeSet<u64>,
    rid: u64,
}

/// Shared server state of the baseline.
#[derive(Debug)]
pub struct TradCluster {
    fabric: Fabric,
    config: TradConfig,
    rms: Vec<Mutex<RmState>>,
    ts: Mutex<TsState>,
}

impl TradCluster {
    pub fn new(fabric: &Fabric, config: TradConfig) -> Arc<Self> {
        assert!(!config.rms.is_empty(), "at least one resource manager");
        Arc::new(TradCluster {
            fabric: fabric.clone(),
            rms: config.rms.iter().map(|_| Mutex::new(RmState::default())).collect(),
            config,
            ts: Mutex::new(TsState { next: 1, finished: BTreeSet::new(), rid: 0 }),
        })
    }

    pub fn config(&self) -> &TradConfig {
        &self.config
    }

    pub fn rm_of(&self, key: u64) -> usize {
        (key % self.rms.len() as u64) as usize
    }

    /// Installs genesis rows for keys `0..payloads.len()` directly at the RMs.
    pub fn bulk_load(&self, table: TableId, payloads: &[Vec<u8>]) {
        let r = self.rms.len() as u64;
        for (key, p) in payloads.iter().enumerate() {
            let mut rm = self.rms[self.rm_of(key as u64)].lock();
            rm.records.insert((table, key as u64), Record { versions: vec![(0, p.clone())], lock: None });
        }
        for (i, rm) in self.rms.iter().enumerate() {
            let used = (payloads.len() as u64 + r - 1 - i as u64) / r;
            let mut rm = rm.lock();
            let slot = rm.next_local.entry(table).or_default();
            *slot = (*slot).max(used);
        }
    }

    /// Newest committed version of a record, without any messaging.
    pub fn peek(&self, table: TableId, key: u64) -> Option<(u64, Vec<u8>)> {
        self.rms[self.rm_of(key)].lock().records.get(&(table, key)).and_then(|r| r.versions.last().cloned())
    }

    fn rid(&self) -> u64 {
        self.ts.lock().rid
    }

    fn rm_read(&self, rm: usize, table: TableId, key: u64, rid: u64) -> Option<(u64, Vec<u8>)> {
        let st = self.rms[rm].lock();
        let rec = st.records.get(&(table, key))?;
        rec.versions.iter().rev().find(|(c, _)| *c <= rid).cloned()
    }

    fn rm_prepare(&self, rm: usize, txn: TxnId, items: &[(TableId, u64, u64)]) -> bool {
        let mut st = self.rms[rm].lock();
        let ok = items.iter().all(|(t, k, observed)| match st.records.get(&(*t, *k)) {
            Some(r) => r.lock.is_none_or(|l| l == txn) && r.versions.last().map(|v| v.0) == Some(*observed),
            None => false,
        });
        if ok {
            for (t, k, _) in items {
                st.records.get_mut(&(*t, *k)).expect("validated").lock = Some(txn);
            }
        }
        ok
    }

    fn rm_commit(&self, rm: usize, txn: TxnId, cid: u64, writes: &[(TableId, u64, Vec<u8>)], inserts: &[(TableId, Vec<u8>)]) -> Vec<u64> {
        let r = self.rms.len() as u64;
        let mut st = self.rms[rm].lock();
        for (t, k, p) in writes {
            let rec = st.records.get_mut(&(*t, *k)).expect("prepared");
            debug_assert_eq!(rec.lock, Some(txn));
            rec.versions.push((cid, p.clone()));
            rec.lock = None;
        }
        let mut keys = Vec::with_capacity(inserts.len());
        for (t, p) in inserts {
            let local = st.next_local.entry(*t).or_default();
            let key = *local * r + rm as u64;
            *local += 1;
            st.records.insert((*t, key), Record { versions: vec![(cid, p.clone())], lock: None });
            keys.push(key);
        }
        keys
    }

    fn rm_abort(&self, rm: usize, txn: TxnId) {
        let mut st = self.rms[rm].lock();
        for rec in st.records.values_mut() {
            if rec.lock == Some(txn) {
                rec.lock = None;
            }
        }
    }

    fn ts_next_cid(&self) -> u64 {
        let mut ts = self.ts.lock();
        ts.next += 1;
        ts.next - 1
    }

    fn ts_finish(&self, cid: u64) {
        let mut ts = self.ts.lock();
        ts.finished.insert(cid);
        loop {
            let next = ts.rid + 1;
            if !ts.finished.remove(&next) {
                break;
            }
            ts.rid = next;
        }
    }
}

mod wire {
    //! Message encoding: a tag byte followed by little-endian fields.

    use super::OltpError;
    use crate::store::TableId;

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub enum Msg {
        RidRequest,
        RidReply { rid: u64 },
        Read { table: TableId, key: u64, rid: u64 },
        ReadReply { found: bool, cid: u64, payload: Vec<u8> },
        CommitRequest { txn: u64, rid: u64, writes: Vec<(TableId, u64, u64, Vec<u8>)>, inserts: Vec<(TableId, Vec<u8>)> },
        CidRequest,
        CidReply { cid: u64 },
        Prepare { txn: u64, items: Vec<(TableId, u64, u64)> },
        Vote { yes: bool },
        Commit { txn: u64, cid: u64, writes: Vec<(TableId, u64, Vec<u8>)>, inserts: Vec<(TableId, Vec<u8>)> },
        Abort { txn: u64 },
        Ack { keys: Vec<u64> },
        Finished { cid: u64 },
        Outcome { committed: bool },
    }

    #[derive(Default)]
    struct W(Vec<u8>);

    impl W {
        fn u8(&mut self, v: u8) {
            self.0.push(v);
        }
        fn u64(&mut self, v: u64) {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        fn bytes(&mut self, b: &[u8]) {
            self.0.extend_from_slice(&(b.len() as u32).to_le_bytes());
            self.0.extend_from_slice(b);
        }
        fn len(&mut self, n: usize) {
            self.0.extend_from_slice(&(n as u32).to_le_bytes());
        }
    }

    struct R<'a>(&'a [u8]);

    impl R<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8], OltpError> {
            if self.0.len() < n {
                return Err(OltpError::Message("truncated".into()));
            }
            let (a, b) = self.0.split_at(n);
            self.0 = b;
            Ok(a)
        }
        fn u8(&mut self) -> Result<u8, OltpError> {
            Ok(self.take(1)?[0])
        }
        fn u32(&mut self) -> Result<u32, OltpError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }
        fn u64(&mut self) -> Result<u64, OltpError> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }
        fn table(&mut self) -> Result<TableId, OltpError> {
            Ok(TableId(self.u32()?))
        }
        fn bytes(&mut self) -> Result<Vec<u8>, OltpError> {
            let n = self.u32()? as usize;
            Ok(self.take(n)?.to_vec())
        }
    }

    pub fn encode(m: &Msg) -> Vec<u8> {
        let mut w = W::default();
        let table = |w: &mut W, t: &TableId| w.0.extend_from_slice(&t.0.to_le_bytes());
        match m {
            Msg::RidRequest => w.u8(0),
            Msg::RidReply { rid } => {
                w.u8(1);
                w.u64(*rid);
            }
            Msg::Read { table: t, key, rid } => {
                w.u8(2);
                table(&mut w, t);
                w.u64(*key);
                w.u64(*rid);
            }
            Msg::ReadReply { found, cid, payload } => {
                w.u8(3);
                w.u8(*found as u8);
                w.u64(*cid);
                w.bytes(payload);
            }
            Msg::CommitRequest { txn, rid, writes, inserts } => {
                w.u8(4);
                w.u64(*txn);
                w.u64(*rid);
                w.len(writes.len());
                for (t, k, c, p) in writes {
                    table(&mut w, t);
                    w.u64(*k);
                    w.u64(*c);
                    w.bytes(p);
                }
                w.len(inserts.len());
                for (t, p) in inserts {
                    table(&mut w, t);
                    w.bytes(p);
                }
            }
            Msg::CidRequest => w.u8(5),
            Msg::CidReply { cid } => {
                w.u8(6);
                w.u64(*cid);
            }
            Msg::Prepare { txn, items } => {
                w.u8(7);
                w.u64(*txn);
                w.len(items.len());
                for (t, k, c) in items {
                    table(&mut w, t);
                    w.u64(*k);
                    w.u64(*c);
                }
            }
            Msg::Vote { yes } => {
                w.u8(8);
                w.u8(*yes as u8);
            }
            Msg::Commit { txn, cid, writes, inserts } => {
                w.u8(9);
                w.u64(*txn);
                w.u64(*cid);
                w.len(writes.len());
                for (t, k, p) in writes {
                    table(&mut w, t);
                    w.u64(*k);
                    w.bytes(p);
                }
                w.len(inserts.len());
                for (t, p) in inserts {
                    table(&mut w, t);
                    w.bytes(p);
                }
            }
            Msg::Abort { txn } => {
                w.u8(10);
                w.u64(*txn);
            }
            Msg::Ack { keys } => {
                w.u8(11);
                w.len(keys.len());
                for k in keys {
                    w.u64(*k);
                }
            }
            Msg::Finished { cid } => {
                w.u8(12);
                w.u64(*cid);
            }
            Msg::Outcome { committed } => {
                w.u8(13);
                w.u8(*committed as u8);
            }
        }
        w.0
    }

    pub fn decode(b: &[u8]) -> Result<Msg, OltpError> {
        let mut r = R(b);
        let m = match r.u8()? {
            0 => Msg::RidRequest,
            1 => Msg::RidReply { rid: r.u64()? },
            2 => Msg::Read { table: r.table()?, key: r.u64()?, rid: r.u64()? },
            3 => Msg::ReadReply { found: r.u8()? != 0, cid: r.u64()?, payload: r.bytes()? },
            4 => {
                let (txn, rid) = (r.u64()?, r.u64()?);
                let n = r.u32()?;
                let writes = (0..n)
                    .map(|_| Ok((r.table()?, r.u64()?, r.u64()?, r.bytes()?)))
                    .collect::<Result<_, OltpError>>()?;
                let n = r.u32()?;
                let inserts = (0..n).map(|_| Ok((r.table()?, r.bytes()?))).collect::<Result<_, OltpError>>()?;
                Msg::CommitRequest { txn, rid, writes, inserts }
            }
            5 => Msg::CidRequest,
            6 => Msg::CidReply { cid: r.u64()? },
            7 => {
                let txn = r.u64()?;
                let n = r.u32()?;
                let items = (0..n).map(|_| Ok((r.table()?, r.u64()?, r.u64()?))).collect::<Result<_, OltpError>>()?;
                Msg::Prepare { txn, items }
            }
            8 => Msg::Vote { yes: r.u8()? != 0 },
            9 => {
                let (txn, cid) = (r.u64()?, r.u64()?);
                let n = r.u32()?;
                let writes =
                    (0..n).map(|_| Ok((r.table()?, r.u64()?, r.bytes()?))).collect::<Result<_, OltpError>>()?;
                let n = r.u32()?;
                let inserts = (0..n).map(|_| Ok((r.table()?, r.bytes()?))).collect::<Result<_, OltpError>>()?;
                Msg::Commit { txn, cid, writes, inserts }
            }
            10 => Msg::Abort { txn: r.u64()? },
            11 => {
                let n = r.u32()?;
                Msg::Ack { keys: (0..n).map(|_| r.u64()).collect::<Result<_, _>>()? }
            }
            12 => Msg::Finished { cid: r.u64()? },
            13 => Msg::Outcome { committed: r.u8()? != 0 },
            t => return Err(OltpError::Message(format!("unknown tag {t}"))),
        };
        if !r.0.is_empty() {
            return Err(OltpError::Message("trailing bytes".into()));
        }
        Ok(m)
    }
}

use wire::Msg;

/// Largest message a receive buffer accepts.
const RECV_CAPACITY: u64 = 1 << 26;

/// Both ends of one connection.
struct Link {
    a: QueuePair,
    b: QueuePair,
}

impl Link {
    fn new(fabric: &Fabric, a: NodeId, b: NodeId, transport: Transport) -> Self {
        let (a, b) = fabric.connect_pair(a, b, transport);
        Link { a, b }
    }
}

/// Delivers `msg` from `from` to `to` and returns the decoded message with
/// its modeled one-way latency.
fn deliver(from: &mut QueuePair, to: &mut QueuePair, msg: &Msg) -> Result<(Msg, f64), OltpError> {
    let bytes = wire::encode(msg);
    let latency = from.model().latency(from.transport(), Verb::Send, bytes.len() as u64);
    to.post_receive(RECV_CAPACITY)?;
    from.send(bytes)?;
    Ok((wire::decode(&to.recv()?)?, latency))
}

/// An open baseline transaction.
#[derive(Debug, Clone)]
pub struct TradTxn {
    desc: TxnDescriptor,
}

impl TradTxn {
    pub fn descriptor(&self) -> &TxnDescriptor {
        &self.desc
    }

    pub fn write(&mut self, table: TableId, key: u64, payload: Vec<u8>) -> Result<(), OltpError> {
        self.desc.buffer_write(table, key, payload)
    }

    pub fn insert(&mut self, table: TableId, payload: Vec<u8>) {
        self.desc.inserts.push(WriteItem { table, key: u64::MAX, payload });
    }
}

/// A client of the baseline together with the server-side ends of all its
/// connections.
pub struct TradClient {
    cluster: Arc<TradCluster>,
    client: u32,
    seq: u64,
    next_insert_rm: usize,
    client_tm: Link,
    client_ts: Link,
    tm_ts: Link,
    tm_rm: Vec<Link>,
    client_rm: Vec<Link>,
}

impl TradClient {
    pub fn new(cluster: &Arc<TradCluster>, client: u32, node: NodeId) -> Self {
        let f = &cluster.fabric;
        let c = &cluster.config;
        let t = c.transport;
        TradClient {
            client,
            seq: 0,
            next_insert_rm: client as usize,
            client_tm: Link::new(f, node, c.tm, t),
            client_ts: Link::new(f, node, c.ts, t),
            tm_ts: Link::new(f, c.tm, c.ts, t),
            tm_rm: c.rms.iter().map(|&rm| Link::new(f, c.tm, rm, t)).collect(),
            client_rm: c.rms.iter().map(|&rm| Link::new(f, node, rm, t)).collect(),
            cluster: cluster.clone(),
        }
    }

    /// Asks the TS for the current read timestamp.
    pub fn begin(&mut self) -> Result<TradTxn, OltpError> {
        let Link { a, b } = &mut self.client_ts;
        deliver(a, b, &Msg::RidRequest)?;
        let rid = self.cluster.rid();
        let (reply, _) = deliver(b, a, &Msg::RidReply { rid })?;
        let Msg::RidReply { rid } = reply else { return Err(OltpError::Message("expected rid".into())) };
        self.seq += 1;
        Ok(TradTxn { desc: TxnDescriptor::new(txn_id(self.client, self.seq), self.client, rid) })
    }

    /// Snapshot read from the owning RM.
    pub fn read(&mut self, txn: &mut TradTxn, table: TableId, key: u64) -> Result<Vec<u8>, OltpError> {
        if let Some(p) = txn.desc.written(table, key) {
            return Ok(p.to_vec());
        }
        let rm = self.cluster.rm_of(key);
        let rid = txn.desc.rid;
        let Link { a, b } = &mut self.client_rm[rm];
        let (req, _) = deliver(a, b, &Msg::Read { table, key, rid })?;
        let Msg::Read { table, key, rid } = req else { return Err(OltpError::Message("expected read".into())) };
        let reply = match self.cluster.rm_read(rm, table, key, rid) {
            Some((cid, payload)) => Msg::ReadReply { found: true, cid, payload },
            None => Msg::ReadReply { found: false, cid: 0, payload: Vec::new() },
        };
        let (reply, _) = deliver(b, a, &reply)?;
        match reply {
            Msg::ReadReply { found: true, cid, payload } => {
                if txn.desc.read_cid(table, key).is_none() {
                    txn.desc.reads.push(ReadItem { table, key, cid });
                }
                Ok(payload)
            }
            Msg::ReadReply { found: false, .. } => {
                let head_cid = self.cluster.peek(table, key).map_or(0, |v| v.0);
                Err(OltpError::Aborted(AbortReason::SnapshotUnavailable { table, key, head_cid }))
            }
            _ => Err(OltpError::Message("expected read reply".into())),
        }
    }

    /// Ends a transaction before it reached the TM; nothing to undo.
    pub fn abort(&mut self, txn: TradTxn, reason: AbortReason) -> TxnDescriptor {
        let mut desc = txn.desc;
        desc.outcome = Outcome::Aborted(reason);
        desc
    }

    fn stats(&self) -> (QpStats, QpStats, Vec<QpStats>) {
        let tm = self.client_tm.b.stats() + self.tm_ts.a.stats() + self.tm_rm.iter().fold(QpStats::default(), |s, l| s + l.a.stats());
        let client = self.client_tm.a.stats();
        let rms = self.tm_rm.iter().map(|l| l.b.stats()).collect();
        (client, tm, rms)
    }

    pub fn commit(&mut self, txn: TradTxn) -> Result<CommitReport, OltpError> {
        let mut desc = txn.desc;
        if desc.is_read_only() {
            desc.outcome = Outcome::Committed;
            return Ok(CommitReport { txn: desc, tally: ProtocolTally::default(), latency: 0.0 });
        }
        let (c0, tm0, rm0) = self.stats();
        let cluster = self.cluster.clone();

        // [1] client -> TM.
        let writes: Vec<_> = desc
            .writes
            .iter()
            .map(|w| (w.table, w.key, desc.read_cid(w.table, w.key).expect("read before write"), w.payload.clone()))
            .collect();
        let inserts: Vec<_> = desc.inserts.iter().map(|w| (w.table, w.payload.clone())).collect();
        let request = Msg::CommitRequest { txn: desc.id, rid: desc.rid, writes, inserts };
        let (request, l_request) = deliver(&mut self.client_tm.a, &mut self.client_tm.b, &request)?;
        let Msg::CommitRequest { txn, writes, inserts, .. } = request else {
            return Err(OltpError::Message("expected commit request".into()));
        };

        // Group by RM; inserts go round-robin.
        let nrm = cluster.rms.len();
        let mut parts: Vec<(Vec<(TableId, u64, u64, Vec<u8>)>, Vec<(TableId, Vec<u8>)>)> = vec![Default::default(); nrm];
        for w in writes {
            parts[cluster.rm_of(w.1)].0.push(w);
        }
        let mut insert_rm = Vec::with_capacity(inserts.len());
        for ins in inserts {
            let rm = self.next_insert_rm % nrm;
            self.next_insert_rm += 1;
            insert_rm.push(rm);
            parts[rm].1.push(ins);
        }
        let involved: Vec<usize> = (0..nrm).filter(|&i| !parts[i].0.is_empty() || !parts[i].1.is_empty()).collect();

        // [2] TM <-> TS for the cid, in parallel with [3] prepare.
        let (_, l_cid_req) = deliver(&mut self.tm_ts.a, &mut self.tm_ts.b, &Msg::CidRequest)?;
        let (reply, l_cid_rep) = deliver(&mut self.tm_ts.b, &mut self.tm_ts.a, &Msg::CidReply { cid: cluster.ts_next_cid() })?;
        let Msg::CidReply { cid } = reply else { return Err(OltpError::Message("expected cid".into())) };
        desc.cid = Some(cid);

        let mut l_prepare: f64 = 0.0;
        let mut all_yes = true;
        let mut refused = None;
        for &i in &involved {
            let items = parts[i].0.iter().map(|(t, k, c, _)| (*t, *k, *c)).collect();
            let Link { a, b } = &mut self.tm_rm[i];
            let (msg, l1) = deliver(a, b, &Msg::Prepare { txn, items })?;
            let Msg::Prepare { txn, items } = msg else { return Err(OltpError::Message("expected prepare".into())) };
            let yes = cluster.rm_prepare(i, txn, &items);
            let (vote, l2) = deliver(b, a, &Msg::Vote { yes })?;
            l_prepare = l_prepare.max(l1 + l2);
            if vote != (Msg::Vote { yes: true }) {
                all_yes = false;
                refused.get_or_insert(cluster.config.rms[i]);
            }
        }

        // [4] second phase; the client is told in parallel.
        for &i in &involved {
            let Link { a, b } = &mut self.tm_rm[i];
            let msg = if all_yes {
                let writes = parts[i].0.iter().map(|(t, k, _, p)| (*t, *k, p.clone())).collect();
                Msg::Commit { txn, cid, writes, inserts: parts[i].1.clone() }
            } else {
                Msg::Abort { txn }
            };
            let (msg, _) = deliver(a, b, &msg)?;
            let keys = match msg {
                Msg::Commit { txn, cid, writes, inserts } => cluster.rm_commit(i, txn, cid, &writes, &inserts),
                Msg::Abort { txn } => {
                    cluster.rm_abort(i, txn);
                    Vec::new()
                }
                _ => return Err(OltpError::Message("expected commit or abort".into())),
            };
            let (ack, _) = deliver(b, a, &Msg::Ack { keys })?;
            let Msg::Ack { keys } = ack else { return Err(OltpError::Message("expected ack".into())) };
            let mut keys = keys.into_iter();
            for (j, &rm) in insert_rm.iter().enumerate() {
                if rm == i && all_yes {
                    desc.inserts[j].key = keys.next().expect("one key per insert");
                }
            }
        }
        let (outcome, l_outcome) =
            deliver(&mut self.client_tm.b, &mut self.client_tm.a, &Msg::Outcome { committed: all_yes })?;

        // [5] TM -> TS: the version is installed (or the cid is dead).
        let (_, _) = deliver(&mut self.tm_ts.a, &mut self.tm_ts.b, &Msg::Finished { cid })?;
        cluster.ts_finish(cid);

        desc.outcome = if outcome == (Msg::Outcome { committed: true }) {
            Outcome::Committed
        } else {
            Outcome::Aborted(AbortReason::VoteNo { rm: refused.unwrap_or(cluster.config.tm) })
        };

        let (c1, tm1, rm1) = self.stats();
        let client = c1 - c0;
        let tm = tm1 - tm0;
        let mut tally = ProtocolTally::from_stats(&client);
        tally.storage_cycles = 0;
        tally.servers.insert(cluster.config.tm, (tm.verb(Verb::Receive), tm.verb(Verb::Send)));
        let mut server_cycles = tm.client_cycles + tm.server_cycles;
        for (i, (a, b)) in rm1.iter().zip(&rm0).enumerate() {
            let d = *a - *b;
            if d.verb(Verb::Receive) + d.verb(Verb::Send) > 0 {
                let e = tally.servers.entry(cluster.config.rms[i]).or_default();
                e.0 += d.verb(Verb::Receive);
                e.1 += d.verb(Verb::Send);
                server_cycles += d.client_cycles + d.server_cycles;
                tally.storage_cycles += d.client_cycles + d.server_cycles;
            }
        }
        let cpu = self.cluster.fabric.model().cycles_to_seconds(server_cycles + client.client_cycles + client.server_cycles);
        let latency = l_request + (l_cid_req + l_cid_rep).max(l_prepare) + l_outcome + cpu;
        Ok(CommitReport { txn: desc, tally, latency })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: TableId = TableId(0);

    fn cluster(transport: Transport, rms: u32, rows: usize) -> (Fabric, Arc<TradCluster>) {
        let f = Fabric::new();
        let c = TradCluster::new(&f, TradConfig { transport, tm: 50, ts: 51, rms: (0..rms).collect() });
        c.bulk_load(T, &vec![vec![0; 8]; rows]);
        (f, c)
    }

    #[test]
    fn wire_round_trip() {
        let msgs = [
            Msg::RidRequest,
            Msg::ReadReply { found: true, cid: 7, payload: vec![1, 2, 3] },
            Msg::CommitRequest { txn: 1, rid: 2, writes: vec![(T, 3, 4, vec![5])], inserts: vec![(TableId(1), vec![6; 3])] },
            Msg::Prepare { txn: 9, items: vec![(T, 1, 2), (T, 4, 5)] },
            Msg::Commit { txn: 1, cid: 3, writes: vec![(T, 2, vec![])], inserts: vec![] },
            Msg::Ack { keys: vec![1, 2] },
            Msg::Outcome { committed: true },
        ];
        for m in msgs {
            assert_eq!(wire::decode(&wire::encode(&m)).unwrap(), m);
        }
        assert!(wire::decode(&[200]).is_err());
        assert!(wire::decode(&[6, 1]).is_err());
    }

    fn update(c: &mut TradClient, keys: &[u64], byte: u8) -> CommitReport {
        let mut t = c.begin().unwrap();
        for &k in keys {
            c.read(&mut t, T, k).unwrap();
            t.write(T, k, vec![byte; 8]).unwrap();
        }
        c.commit(t).unwrap()
    }

    #[test]
    fn message_counts_match_formula() {
        for n in 1..=3u64 {
            let (f, cl) = cluster(Transport::IpoEth, 3, 9);
            let mut c = TradClient::new(&cl, 1, 100);
            let keys: Vec<u64> = (0..n).collect();
            let r = update(&mut c, &keys, 1);
            assert!(r.txn.outcome.is_committed());
            assert_eq!((r.tally.m_r(), r.tally.m_s()), (2 + 4 * n, 3 + 4 * n), "n={n}");
            assert_eq!(r.tally.servers.len() as u64, n + 1);
            assert!(r.tally.storage_cycles > 0);
            assert!(f.metrics().node(0).server_cycles > 0);
        }
    }

    #[test]
    fn conflicting_prepare_votes_no() {
        let (_, cl) = cluster(Transport::Rdma, 2, 4);
        let mut c1 = TradClient::new(&cl, 1, 100);
        let mut c2 = TradClient::new(&cl, 2, 101);
        let mut t1 = c1.begin().unwrap();
        let mut t2 = c2.begin().unwrap();
        for (c, t) in [(&mut c1, &mut t1), (&mut c2, &mut t2)] {
            c.read(t, T, 0).unwrap();
            c.read(t, T, 1).unwrap();
            t.write(T, 0, vec![9; 8]).unwrap();
            t.write(T, 1, vec![9; 8]).unwrap();
        }
        assert!(c1.commit(t1).unwrap().txn.outcome.is_committed());
        let r2 = c2.commit(t2).unwrap();
        assert!(matches!(r2.txn.outcome, Outcome::Aborted(AbortReason::VoteNo { .. })));
        assert_eq!(cl.peek(T, 0).unwrap().0, 1);
        // Locks are free again and the cid is retired.
        let r3 = update(&mut c2, &[0, 1], 3);
        assert!(r3.txn.outcome.is_committed());
        assert_eq!(r3.txn.rid, 2);
    }

    #[test]
    fn abort_installs_nothing_anywhere() {
        let (_, cl) = cluster(Transport::Rdma, 2, 4);
        let mut c1 = TradClient::new(&cl, 1, 100);
        let mut c2 = TradClient::new(&cl, 2, 101);
        let mut t2 = c2.begin().unwrap();
        c2.read(&mut t2, T, 0).unwrap();
        c2.read(&mut t2, T, 1).unwrap();
        update(&mut c1, &[1], 5);
        t2.write(T, 0, vec![7; 8]).unwrap();
        t2.write(T, 1, vec![7; 8]).unwrap();
        assert!(!c2.commit(t2).unwrap().txn.outcome.is_committed());
        assert_eq!(cl.peek(T, 0).unwrap(), (0, vec![0; 8]));
        assert_eq!(cl.peek(T, 1).unwrap().1, vec![5; 8]);
    }

    #[test]
    fn refused_commit_with_inserts() {
        let (_, cl) = cluster(Transport::Rdma, 2, 4);
        let mut c1 = TradClient::new(&cl, 1, 100);
        let mut c2 = TradClient::new(&cl, 2, 101);
        let mut t2 = c2.begin().unwrap();
        c2.read(&mut t2, T, 0).unwrap();
        update(&mut c1, &[0], 5);
        t2.write(T, 0, vec![7; 8]).unwrap();
        t2.insert(TableId(1), vec![1; 8]);
        t2.insert(TableId(1), vec![2; 8]);
        let r = c2.commit(t2).unwrap();
        assert!(!r.txn.outcome.is_committed());
        assert!(r.txn.inserts.iter().all(|i| i.key == u64::MAX));
    }

    #[test]
    fn snapshot_reads_and_inserts() {
        let (_, cl) = cluster(Transport::IpoIb, 2, 4);
        let mut c1 = TradClient::new(&cl, 1, 100);
        let mut c2 = TradClient::new(&cl, 2, 101);
        let mut old = c2.begin().unwrap();
        let mut t = c1.begin().unwrap();
        c1.read(&mut t, T, 2).unwrap();
        t.write(T, 2, vec![4; 8]).unwrap();
        t.insert(TableId(1), vec![1; 8]);
        t.insert(TableId(1), vec![2; 8]);
        let r = c1.commit(t).unwrap();
        assert!(r.txn.outcome.is_committed());
        let keys: Vec<u64> = r.txn.inserts.iter().map(|i| i.key).collect();
        assert_eq!(keys.len(), 2);
        assert_ne!(keys[0], keys[1]);
        assert_eq!(c2.read(&mut old, T, 2).unwrap(), vec![0; 8]);
        let mut new = c2.begin().unwrap();
        assert_eq!(c2.read(&mut new, T, 2).unwrap(), vec![4; 8]);
    }

    #[test]
    fn latency_ordering_for_small_messages() {
        let mut lat = Vec::new();
        for t in [Transport::Rdma, Transport::IpoEth, Transport::IpoIb] {
            let (_, cl) = cluster(t, 3, 9);
            let mut c = TradClient::new(&cl, 1, 100);
            lat.push(update(&mut c, &[0, 1, 2], 1).latency);
        }
        assert!(lat[0] < lat[1] && lat[1] <= lat[2], "{lat:?}");
    }
}
