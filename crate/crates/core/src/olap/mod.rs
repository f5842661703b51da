//! Distributed joins and aggregations over the fabric.
//!
//! A cluster has `p` compute nodes, each holding one horizontal partition
//! of every input, and `p` storage nodes that only expose memory. The
//! shared-nothing operators ([`join::ghj`], [`join::ghj_bloom`],
//! [`agg::agg_hierarchical`]) move data between compute nodes with
//! SEND/RECEIVE. The one-sided operators ([`join::rdma_ghj`], [`join::rrj`],
//! [`agg::agg_rdma`]) write into storage-node memory with RDMA WRITEs and
//! read it back in their second phase.
//!
//! Hash functions are a splitmix64 finalizer over the key xor a seed.

pub mod agg;
pub mod bloom;
pub mod join;
pub mod oracle;

use thiserror::Error;

use crate::fabric::{Fabric, FabricError, NodeId};

pub use bloom::BloomFilter;

/// Node id of the first storage node; storage node `i` is `STORAGE_BASE + i`.
pub const STORAGE_BASE: NodeId = 1_000;

pub fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn hash_key(key: u64, seed: u64) -> u64 {
    mix64(key ^ mix64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OlapError {
    #[error("input has {got} partitions but the cluster has {nodes} nodes")]
    Partitions { got: usize, nodes: usize },
    #[error("payload widths differ across partitions")]
    Width,
    #[error("{what} overflowed its reserved region on node {node}")]
    RegionOverflow { what: &'static str, node: NodeId },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// Compute and storage nodes of one operator run.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub fabric: Fabric,
    pub compute: Vec<NodeId>,
    pub storage: Vec<NodeId>,
}

impl Cluster {
    pub fn new(nodes: usize) -> Self {
        Cluster::with_fabric(Fabric::new(), nodes)
    }

    pub fn with_fabric(fabric: Fabric, nodes: usize) -> Self {
        assert!(nodes > 0, "a cluster needs at least one node");
        Cluster {
            fabric,
            compute: (0..nodes as NodeId).collect(),
            storage: (0..nodes as NodeId).map(|i| STORAGE_BASE + i).collect(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.compute.len()
    }

    pub fn is_storage(&self, node: NodeId) -> bool {
        self.storage.contains(&node)
    }
}

/// Tuples held by one node: 64-bit keys plus fixed-width payloads stored
/// back to back.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Chunk {
    pub payload_width: usize,
    pub keys: Vec<u64>,
    pub payloads: Vec<u8>,
}

impl Chunk {
    pub fn new(payload_width: usize) -> Self {
        Chunk { payload_width, keys: Vec::new(), payloads: Vec::new() }
    }

    pub fn with_capacity(payload_width: usize, tuples: usize) -> Self {
        Chunk { payload_width, keys: Vec::with_capacity(tuples), payloads: Vec::with_capacity(tuples * payload_width) }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn tuple_width(&self) -> usize {
        8 + self.payload_width
    }

    pub fn push(&mut self, key: u64, payload: &[u8]) {
        assert_eq!(payload.len(), self.payload_width, "payload width");
        self.keys.push(key);
        self.payloads.extend_from_slice(payload);
    }

    pub fn payload(&self, i: usize) -> &[u8] {
        &self.payloads[i * self.payload_width..(i + 1) * self.payload_width]
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[u8])> + '_ {
        (0..self.len()).map(move |i| (self.keys[i], self.payload(i)))
    }

    /// Appends tuple `i` in wire format: key little-endian, then payload.
    pub fn encode_tuple(&self, i: usize, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.keys[i].to_le_bytes());
        out.extend_from_slice(self.payload(i));
    }

    /// Appends every whole tuple in `bytes`.
    pub fn extend_from_wire(&mut self, bytes: &[u8]) {
        let w = self.tuple_width();
        debug_assert_eq!(bytes.len() % w, 0, "partial tuple on the wire");
        for t in bytes.chunks_exact(w) {
            self.keys.push(u64::from_le_bytes(t[..8].try_into().expect("8 bytes")));
            self.payloads.extend_from_slice(&t[8..]);
        }
    }

    pub fn append(&mut self, other: &Chunk) {
        assert_eq!(other.payload_width, self.payload_width, "payload width");
        self.keys.extend_from_slice(&other.keys);
        self.payloads.extend_from_slice(&other.payloads);
    }
}

/// A relation partitioned horizontally over the compute nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub payload_width: usize,
    pub parts: Vec<Chunk>,
}

impl Relation {
    pub fn new(payload_width: usize, nodes: usize) -> Self {
        Relation { payload_width, parts: vec![Chunk::new(payload_width); nodes] }
    }

    /// Deals tuples round-robin over `nodes` partitions.
    pub fn round_robin<'a>(payload_width: usize, nodes: usize, tuples: impl IntoIterator<Item = (u64, &'a [u8])>) -> Self {
        let mut r = Relation::new(payload_width, nodes);
        for (i, (k, p)) in tuples.into_iter().enumerate() {
            r.parts[i % nodes].push(k, p);
        }
        r
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(Chunk::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tuple_width(&self) -> usize {
        8 + self.payload_width
    }

    pub fn bytes(&self) -> u64 {
        (self.len() * self.tuple_width()) as u64
    }

    pub fn tuples(&self) -> impl Iterator<Item = (u64, &[u8])> + '_ {
        self.parts.iter().flat_map(Chunk::iter)
    }

    fn check(&self, cluster: &Cluster) -> Result<(), OlapError> {
        if self.parts.len() != cluster.nodes() {
            return Err(OlapError::Partitions { got: self.parts.len(), nodes: cluster.nodes() });
        }
        if self.parts.iter().any(|p| p.payload_width != self.payload_width) {
            return Err(OlapError::Width);
        }
        Ok(())
    }
}

/// One output row of a join.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JoinMatch {
    pub key: u64,
    pub r: Vec<u8>,
    pub s: Vec<u8>,
}

/// Sorts matches so two results can be compared as multisets.
pub fn canonical(mut matches: Vec<JoinMatch>) -> Vec<JoinMatch> {
    matches.sort_unstable();
    matches
}
