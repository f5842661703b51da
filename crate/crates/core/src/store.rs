//! Passive storage nodes: multi-version record blocks, the global dictionary
//! that places every key, and a fetch-add allocator for inserts.
//!
//! Block layout, all words little-endian, `w` = payload width in bytes,
//! `n` = slot count:
//!
//! ```text
//! offset 0            header   lock (bit 63) | cid (bits 0..63)
//! offset 8            payload  w bytes, newest version
//! offset 8+w          cid_1    older version, bit 63 always 0
//! offset 16+w         payload_1
//! ...                 n-1 older (cid, payload) pairs, newest first
//! ```
//!
//! An older slot with cid 0 is empty. Rows written by a bulk load carry the
//! genesis cid 0.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::fabric::{Fabric, FabricError, MemoryRegion, NodeId, RemoteAddress, Session};

pub const LOCK_BIT: u64 = 1 << 63;
pub const CID_MASK: u64 = LOCK_BIT - 1;

pub fn encode_header(lock: bool, cid: u64) -> u64 {
    debug_assert!(cid <= CID_MASK, "cid exceeds 63 bits");
    ((lock as u64) << 63) | (cid & CID_MASK)
}

pub fn decode_header(word: u64) -> (bool, u64) {
    (word & LOCK_BIT != 0, word & CID_MASK)
}

/// Bytes of a block with `slots` versions of `payload_width` bytes.
pub fn block_size(payload_width: usize, slots: usize) -> usize {
    slots * (8 + payload_width)
}

/// Slot count that fills a 16KiB block, but at least 2.
pub fn default_slot_count(payload_width: usize) -> usize {
    (16 * 1024 / (8 + payload_width)).max(2)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordBlock {
    pub lock: bool,
    pub cid: u64,
    pub payload: Vec<u8>,
    /// Older versions, newest first; always `slots - 1` entries.
    pub older: Vec<(u64, Vec<u8>)>,
}

impl RecordBlock {
    /// A block holding one unlocked version and empty older slots.
    pub fn fresh(cid: u64, payload: Vec<u8>, slots: usize) -> Self {
        let w = payload.len();
        RecordBlock { lock: false, cid, payload, older: vec![(0, vec![0; w]); slots - 1] }
    }

    pub fn slots(&self) -> usize {
        self.older.len() + 1
    }

    pub fn header(&self) -> u64 {
        encode_header(self.lock, self.cid)
    }

    pub fn encode(&self) -> Vec<u8> {
        let w = self.payload.len();
        let mut out = Vec::with_capacity(block_size(w, self.slots()));
        out.extend_from_slice(&self.header().to_le_bytes());
        out.extend_from_slice(&self.payload);
        for (cid, p) in &self.older {
            assert_eq!(p.len(), w, "older payload width");
            out.extend_from_slice(&(cid & CID_MASK).to_le_bytes());
            out.extend_from_slice(p);
        }
        out
    }

    pub fn decode(bytes: &[u8], payload_width: usize, slots: usize) -> Self {
        assert_eq!(bytes.len(), block_size(payload_width, slots), "block length");
        let stride = 8 + payload_width;
        let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let (lock, cid) = decode_header(word(0));
        let older = (1..slots)
            .map(|i| (word(i * stride) & CID_MASK, bytes[i * stride + 8..(i + 1) * stride].to_vec()))
            .collect();
        RecordBlock { lock, cid, payload: bytes[8..stride].to_vec(), older }
    }

    /// The block after installing `payload` as version `cid`: the old head
    /// moves into the first older slot and the oldest version falls off.
    pub fn with_new_version(&self, cid: u64, payload: Vec<u8>) -> Self {
        let mut older = Vec::with_capacity(self.older.len());
        if !self.older.is_empty() {
            older.push((self.cid, self.payload.clone()));
            older.extend(self.older[..self.older.len() - 1].iter().cloned());
        }
        RecordBlock { lock: false, cid, payload, older }
    }

    /// Newest version visible at `rid`, if the block still holds one.
    pub fn visible_at(&self, rid: u64) -> Option<(u64, &[u8])> {
        if self.cid <= rid {
            return Some((self.cid, &self.payload));
        }
        // An empty older slot (cid 0) only counts if it is the genesis row,
        // which is indistinguishable; treat it as unavailable.
        self.older.iter().find(|(c, _)| *c != 0 && *c <= rid).map(|(c, p)| (*c, &p[..]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TableId(pub u32);

/// Requested shape of a table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSpec {
    pub name: String,
    pub payload_width: usize,
    pub slots: usize,
    /// Blocks reserved on every storage node.
    pub capacity_per_node: u64,
}

impl TableSpec {
    /// A single-version table.
    pub fn new(name: impl Into<String>, payload_width: usize, capacity_per_node: u64) -> Self {
        TableSpec { name: name.into(), payload_width, slots: 1, capacity_per_node }
    }

    pub fn with_slots(mut self, slots: usize) -> Self {
        self.slots = slots;
        self
    }

    pub fn with_default_slots(mut self) -> Self {
        self.slots = default_slot_count(self.payload_width);
        self
    }
}

#[derive(Debug, Clone)]
pub struct TableLayout {
    pub id: TableId,
    pub spec: TableSpec,
    pub block_size: usize,
    /// Block region per storage node, in dictionary node order.
    pub blocks: Vec<MemoryRegion>,
    /// Next-free counter per storage node.
    pub allocators: Vec<RemoteAddress>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("unknown table {0:?}")]
    UnknownTable(TableId),
    #[error("key {key} is outside the key space of table {table:?}")]
    KeyOutOfRange { table: TableId, key: u64 },
    #[error("table {table:?} has no free blocks left on storage node {node}")]
    AllocationExhausted { table: TableId, node: NodeId },
    #[error("payload is {got} bytes, table stores {expected}")]
    PayloadWidth { expected: usize, got: usize },
    #[error("invalid table spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// Where every record of every table lives. Key `k` lives on storage node
/// `k mod N` at local index `k / N`.
#[derive(Debug, Clone)]
pub struct GlobalDictionary {
    nodes: Vec<NodeId>,
    tables: Vec<TableLayout>,
}

impl GlobalDictionary {
    pub fn storage_nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn tables(&self) -> &[TableLayout] {
        &self.tables
    }

    pub fn table(&self, id: TableId) -> Result<&TableLayout, StoreError> {
        self.tables.get(id.0 as usize).ok_or(StoreError::UnknownTable(id))
    }

    pub fn table_by_name(&self, name: &str) -> Option<&TableLayout> {
        self.tables.iter().find(|t| t.spec.name == name)
    }

    /// Index into [`Self::storage_nodes`] holding `key`.
    pub fn partition(&self, key: u64) -> usize {
        (key % self.nodes.len() as u64) as usize
    }

    pub fn locate(&self, table: TableId, key: u64) -> Result<RemoteAddress, StoreError> {
        let t = self.table(table)?;
        let n = self.nodes.len() as u64;
        let (part, local) = ((key % n) as usize, key / n);
        if local >= t.spec.capacity_per_node {
            return Err(StoreError::KeyOutOfRange { table, key });
        }
        Ok(t.blocks[part].addr(local * t.block_size as u64))
    }

    /// Number of keys in `0..count` that land on partition `part`.
    fn keys_below(&self, count: u64, part: usize) -> u64 {
        let n = self.nodes.len() as u64;
        (count + n - 1 - part as u64) / n
    }
}

/// Handle on the storage layer. Cheap to clone.
#[derive(Debug, Clone)]
pub struct Store {
    fabric: Fabric,
    dict: Arc<GlobalDictionary>,
    next_insert_node: Arc<AtomicU64>,
}

impl Store {
    /// Registers block and allocator regions for every table on every
    /// storage node.
    pub fn new(fabric: &Fabric, storage_nodes: &[NodeId], specs: &[TableSpec]) -> Result<Self, StoreError> {
        if storage_nodes.is_empty() {
            return Err(StoreError::InvalidSpec("no storage nodes".into()));
        }
        let mut tables = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            if spec.slots == 0 || spec.capacity_per_node == 0 {
                return Err(StoreError::InvalidSpec(format!("table {} needs slots and capacity", spec.name)));
            }
            let bs = block_size(spec.payload_width, spec.slots);
            let mut blocks = Vec::new();
            let mut allocators = Vec::new();
            for &node in storage_nodes {
                blocks.push(fabric.register_region(node, spec.capacity_per_node * bs as u64)?);
                allocators.push(fabric.register_region(node, 8)?.addr(0));
            }
            tables.push(TableLayout { id: TableId(i as u32), spec: spec.clone(), block_size: bs, blocks, allocators });
        }
        let dict = GlobalDictionary { nodes: storage_nodes.to_vec(), tables };
        Ok(Store { fabric: fabric.clone(), dict: Arc::new(dict), next_insert_node: Arc::new(AtomicU64::new(0)) })
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn dictionary(&self) -> &GlobalDictionary {
        &self.dict
    }

    pub fn table(&self, id: TableId) -> Result<&TableLayout, StoreError> {
        self.dict.table(id)
    }

    pub fn locate(&self, table: TableId, key: u64) -> Result<RemoteAddress, StoreError> {
        self.dict.locate(table, key)
    }

    /// Writes genesis rows for keys `0..payloads.len()` and moves every
    /// allocator past them.
    pub fn bulk_load(&self, session: &mut Session, table: TableId, payloads: &[Vec<u8>]) -> Result<(), StoreError> {
        let t = self.dict.table(table)?;
        for (key, p) in payloads.iter().enumerate() {
            self.check_width(t, p)?;
            let block = RecordBlock::fresh(0, p.clone(), t.spec.slots);
            session.write(self.dict.locate(table, key as u64)?, block.encode())?;
        }
        for (part, &alloc) in t.allocators.iter().enumerate() {
            let used = self.dict.keys_below(payloads.len() as u64, part);
            session.write(alloc, used.to_le_bytes().to_vec())?;
        }
        Ok(())
    }

    /// One READ of the whole block.
    pub fn read_block(&self, session: &mut Session, table: TableId, key: u64) -> Result<RecordBlock, StoreError> {
        let t = self.dict.table(table)?;
        let addr = self.dict.locate(table, key)?;
        let bytes = session.read(addr, t.block_size as u64)?;
        Ok(RecordBlock::decode(&bytes, t.spec.payload_width, t.spec.slots))
    }

    /// Reserves a fresh key on partition `part` with one FETCH_ADD.
    pub fn allocate_on(&self, session: &mut Session, table: TableId, part: usize) -> Result<u64, StoreError> {
        let t = self.dict.table(table)?;
        let local = session.fetch_add(t.allocators[part], 1)?;
        if local >= t.spec.capacity_per_node {
            return Err(StoreError::AllocationExhausted { table, node: self.dict.nodes[part] });
        }
        Ok(local * self.dict.nodes.len() as u64 + part as u64)
    }

    /// Reserves a fresh key, spreading inserts round-robin over the nodes and
    /// moving on to the next node when one is full.
    pub fn allocate(&self, session: &mut Session, table: TableId) -> Result<u64, StoreError> {
        let n = self.dict.nodes.len();
        let start = self.next_insert_node.fetch_add(1, Ordering::Relaxed) as usize;
        let mut last = None;
        for i in 0..n {
            match self.allocate_on(session, table, (start + i) % n) {
                Err(e @ StoreError::AllocationExhausted { .. }) => last = Some(e),
                r => return r,
            }
        }
        Err(last.expect("at least one storage node"))
    }

    /// Writes a fresh block with header (0, cid) for an allocated key.
    pub fn write_fresh(
        &self,
        session: &mut Session,
        table: TableId,
        key: u64,
        payload: &[u8],
        cid: u64,
    ) -> Result<(), StoreError> {
        let t = self.dict.table(table)?;
        self.check_width(t, payload)?;
        let block = RecordBlock::fresh(cid, payload.to_vec(), t.spec.slots);
        session.write(self.dict.locate(table, key)?, block.encode())?;
        Ok(())
    }

    /// FETCH_ADD then WRITE. Inserts never conflict.
    pub fn insert_block(
        &self,
        session: &mut Session,
        table: TableId,
        payload: &[u8],
        cid: u64,
    ) -> Result<u64, StoreError> {
        let t = self.dict.table(table)?;
        self.check_width(t, payload)?;
        let key = self.allocate(session, table)?;
        self.write_fresh(session, table, key, payload, cid)?;
        Ok(key)
    }

    pub fn check_width(&self, t: &TableLayout, payload: &[u8]) -> Result<(), StoreError> {
        if payload.len() != t.spec.payload_width {
            return Err(StoreError::PayloadWidth { expected: t.spec.payload_width, got: payload.len() });
        }
        Ok(())
    }

    /// Decodes a block straight from memory without charging metrics.
    pub fn peek_block(&self, table: TableId, key: u64) -> Result<RecordBlock, StoreError> {
        let t = self.dict.table(table)?;
        let bytes = self.fabric.peek(self.dict.locate(table, key)?, t.block_size as u64)?;
        Ok(RecordBlock::decode(&bytes, t.spec.payload_width, t.spec.slots))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::Verb;
    use std::collections::HashSet;

    fn store(nodes: &[NodeId], spec: TableSpec) -> (Fabric, Store) {
        let f = Fabric::new();
        let s = Store::new(&f, nodes, &[spec]).unwrap();
        (f, s)
    }

    #[test]
    fn header_examples() {
        assert_eq!(encode_header(false, 20003), 20003);
        assert_eq!(encode_header(true, 24401), (1 << 63) + 24401);
        assert_eq!(encode_header(false, 0), 0);
        assert_eq!(decode_header((1 << 63) + 24401), (true, 24401));
    }

    #[test]
    fn block_layout_is_byte_exact() {
        let b = RecordBlock {
            lock: true,
            cid: 30000,
            payload: vec![0xaa; 4],
            older: vec![(20003, vec![0xbb; 4]), (0, vec![0; 4])],
        };
        let bytes = b.encode();
        assert_eq!(bytes.len(), block_size(4, 3));
        assert_eq!(&bytes[0..8], &encode_header(true, 30000).to_le_bytes());
        assert_eq!(&bytes[8..12], &[0xaa; 4]);
        assert_eq!(&bytes[12..20], &20003u64.to_le_bytes());
        assert_eq!(RecordBlock::decode(&bytes, 4, 3), b);
    }

    #[test]
    fn version_shift() {
        let b = RecordBlock::fresh(20003, vec![1], 3);
        let b2 = b.with_new_version(30000, vec![2]);
        assert_eq!((b2.cid, b2.payload.clone()), (30000, vec![2]));
        assert_eq!(b2.older, vec![(20003, vec![1]), (0, vec![0])]);
        let b3 = b2.with_new_version(40000, vec![3]);
        assert_eq!(b3.older, vec![(30000, vec![2]), (20003, vec![1])]);
        assert_eq!(b3.visible_at(35000), Some((30000, &[2u8][..])));
        assert_eq!(b3.visible_at(100), None);
        let single = RecordBlock::fresh(5, vec![9], 1).with_new_version(6, vec![8]);
        assert!(single.older.is_empty());
    }

    #[test]
    fn slot_count_rule() {
        assert_eq!(default_slot_count(1024), 15);
        assert_eq!(default_slot_count(16 * 1024), 2);
        let spec = TableSpec::new("t", 1024, 4).with_default_slots();
        assert_eq!(block_size(spec.payload_width, spec.slots), 15 * 1032);
        assert!(block_size(spec.payload_width, spec.slots) <= 16 * 1024);
    }

    #[test]
    fn modulo_partitioning() {
        let (_, s) = store(&[10, 11, 12], TableSpec::new("t", 8, 100));
        let mut per_node = [0; 3];
        for k in 0..9 {
            let a = s.locate(TableId(0), k).unwrap();
            per_node[(a.node - 10) as usize] += 1;
            assert_eq!(a, s.locate(TableId(0), k).unwrap());
        }
        assert_eq!(per_node, [3, 3, 3]);
        assert_eq!(s.locate(TableId(1), 0), Err(StoreError::UnknownTable(TableId(1))));
        assert!(matches!(s.locate(TableId(0), 300), Err(StoreError::KeyOutOfRange { .. })));
    }

    #[test]
    fn addresses_are_disjoint() {
        let (_, s) = store(&[0, 1, 2, 3], TableSpec::new("t", 24, 2500).with_slots(2));
        let bs = s.table(TableId(0)).unwrap().block_size as u64;
        let mut addrs: Vec<_> = (0..10_000).map(|k| s.locate(TableId(0), k).unwrap()).collect();
        addrs.sort();
        for w in addrs.windows(2) {
            assert!(w[0].node != w[1].node || w[1].offset - w[0].offset >= bs);
        }
    }

    #[test]
    fn read_and_insert_accounting() {
        let (f, s) = store(&[0, 1], TableSpec::new("t", 16, 8));
        let mut sess = f.open_session(100);
        let before = f.metrics();
        let key = s.insert_block(&mut sess, TableId(0), &[7; 16], 20003).unwrap();
        let d = f.metrics().since(&before).node(100);
        assert_eq!((d.verb(Verb::FetchAdd), d.verb(Verb::Write)), (1, 1));
        let before = f.metrics();
        let b = s.read_block(&mut sess, TableId(0), key).unwrap();
        let d = f.metrics().since(&before);
        assert_eq!((d.total().verb(Verb::Read), d.total().bytes_received), (1, 24));
        assert_eq!((b.lock, b.cid, b.payload), (false, 20003, vec![7; 16]));
        assert_eq!(f.metrics().node(0).server_cycles + f.metrics().node(1).server_cycles, 0);
    }

    #[test]
    fn inserts_follow_bulk_load_and_exhaust() {
        let (f, s) = store(&[0, 1], TableSpec::new("t", 8, 3));
        let mut sess = f.open_session(100);
        s.bulk_load(&mut sess, TableId(0), &vec![vec![1; 8]; 3]).unwrap();
        let mut keys = HashSet::new();
        for _ in 0..3 {
            keys.insert(s.insert_block(&mut sess, TableId(0), &[2; 8], 5).unwrap());
        }
        assert_eq!(keys, HashSet::from([3, 4, 5]));
        let err = (0..2).map(|_| s.insert_block(&mut sess, TableId(0), &[2; 8], 5)).find_map(Result::err);
        assert!(matches!(err, Some(StoreError::AllocationExhausted { .. })));
        assert!(matches!(
            s.insert_block(&mut sess, TableId(0), &[2; 4], 5),
            Err(StoreError::PayloadWidth { expected: 8, got: 4 })
        ));
    }

    #[test]
    fn concurrent_inserts_get_distinct_keys() {
        let (f, s) = store(&[0, 1, 2], TableSpec::new("t", 8, 1000));
        let keys: Vec<u64> = std::thread::scope(|sc| {
            let hs: Vec<_> = (0..8)
                .map(|c| {
                    let (f, s) = (f.clone(), s.clone());
                    sc.spawn(move || {
                        let mut sess = f.open_session(100 + c);
                        (0..200).map(|_| s.insert_block(&mut sess, TableId(0), &[c as u8; 8], 1).unwrap()).collect::<Vec<_>>()
                    })
                })
                .collect();
            hs.into_iter().flat_map(|h| h.join().unwrap()).collect()
        });
        let distinct: HashSet<_> = keys.iter().collect();
        assert_eq!(distinct.len(), keys.len());
    }
}
