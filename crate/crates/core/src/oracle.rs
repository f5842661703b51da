//! Bitvector timestamp service.
//!
//! Commit timestamps are pre-assigned round-robin: with `C` clients, client
//! `c` (1-based) owns timestamps `c, c + C, c + 2C, ...`. Committing sets the
//! timestamp's bit; the read timestamp (RID) is the longest prefix of set
//! bits.
//!
//! Physically each client owns a byte-disjoint stripe of one registered
//! region, bit `k` of stripe `c` standing for timestamp `k*C + c`. Publishing
//! is a one-byte WRITE of the client's own stripe, and computing the RID is a
//! single READ of the whole region.

use thiserror::Error;

use crate::fabric::{Fabric, FabricError, MemoryRegion, NodeId, Session};

pub const DEFAULT_BITS: u64 = 60_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("client {client} is not in 1..={clients}")]
    UnknownClient { client: u32, clients: u32 },
    #[error("timestamp vector exhausted for client {client}")]
    WouldWrap { client: u32 },
    #[error("timestamp {cid} was not handed to client {client}")]
    NotOwned { client: u32, cid: u64 },
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// Shared description of the vector. Cheap to clone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimestampVector {
    region: MemoryRegion,
    clients: u32,
    bits: u64,
    stripe_bytes: u64,
}

impl TimestampVector {
    pub fn new(fabric: &Fabric, node: NodeId, clients: u32) -> Result<Self, OracleError> {
        Self::with_bits(fabric, node, clients, DEFAULT_BITS)
    }

    pub fn with_bits(fabric: &Fabric, node: NodeId, clients: u32, bits: u64) -> Result<Self, OracleError> {
        if clients == 0 {
            return Err(OracleError::UnknownClient { client: 0, clients });
        }
        let per_client = bits.div_ceil(clients as u64);
        let stripe_bytes = per_client.div_ceil(8).max(1);
        let region = fabric.register_region(node, stripe_bytes * clients as u64)?;
        Ok(TimestampVector { region, clients, bits, stripe_bytes })
    }

    pub fn clients(&self) -> u32 {
        self.clients
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn region(&self) -> MemoryRegion {
        self.region
    }

    /// Handle for client `client` (1-based). Each client id must be used by
    /// exactly one handle at a time.
    pub fn client(&self, client: u32) -> Result<OracleClient, OracleError> {
        if client == 0 || client > self.clients {
            return Err(OracleError::UnknownClient { client, clients: self.clients });
        }
        Ok(OracleClient { vector: *self, client, handed: 0, stripe: vec![0; self.stripe_bytes as usize] })
    }

    /// Highest `t` such that timestamps `1..=t` are all committed, from one
    /// READ of the vector.
    pub fn current_rid(&self, session: &mut Session) -> Result<u64, OracleError> {
        let bytes = session.read(self.region.addr(0), self.region.length)?;
        Ok(self.rid_of(&bytes))
    }

    /// RID of a raw copy of the vector region.
    pub fn rid_of(&self, bytes: &[u8]) -> u64 {
        let c = self.clients as u64;
        let mut rid = self.bits;
        for (i, stripe) in bytes.chunks(self.stripe_bytes as usize).enumerate() {
            let prefix = leading_ones(stripe);
            rid = rid.min(prefix * c + i as u64);
        }
        rid
    }

    /// Position of timestamp `cid` as (client index, bit within stripe).
    fn position(&self, cid: u64) -> (u64, u64) {
        ((cid - 1) % self.clients as u64, (cid - 1) / self.clients as u64)
    }
}

/// Count of consecutive set bits from bit 0 (LSB of byte 0) onwards.
fn leading_ones(bytes: &[u8]) -> u64 {
    let mut n = 0;
    for &b in bytes {
        if b == 0xff {
            n += 8;
        } else {
            return n + b.trailing_ones() as u64;
        }
    }
    n
}

/// A client's private view of its stripe.
#[derive(Debug, Clone)]
pub struct OracleClient {
    vector: TimestampVector,
    client: u32,
    handed: u64,
    stripe: Vec<u8>,
}

impl OracleClient {
    pub fn client(&self) -> u32 {
        self.client
    }

    pub fn vector(&self) -> &TimestampVector {
        &self.vector
    }

    /// The client's next owned timestamp. Purely local.
    pub fn next_cid(&mut self) -> Result<u64, OracleError> {
        let cid = self.handed * self.vector.clients as u64 + self.client as u64;
        if cid > self.vector.bits {
            return Err(OracleError::WouldWrap { client: self.client });
        }
        self.handed += 1;
        Ok(cid)
    }

    /// Sets the bit of `cid` with one unsignaled WRITE of the stripe byte.
    pub fn publish_commit(&mut self, session: &mut Session, cid: u64) -> Result<(), OracleError> {
        let not_owned = OracleError::NotOwned { client: self.client, cid };
        if cid == 0 || cid > self.vector.bits {
            return Err(not_owned);
        }
        let (owner, bit) = self.vector.position(cid);
        if owner != (self.client - 1) as u64 || bit >= self.handed {
            return Err(not_owned);
        }
        let byte = (bit / 8) as usize;
        self.stripe[byte] |= 1 << (bit % 8);
        let offset = owner * self.vector.stripe_bytes + byte as u64;
        session.write_unsignaled(self.vector.region.addr(offset), vec![self.stripe[byte]])?;
        Ok(())
    }

    pub fn current_rid(&self, session: &mut Session) -> Result<u64, OracleError> {
        self.vector.current_rid(session)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::Verb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_rid(committed: &[bool]) -> u64 {
        committed.iter().skip(1).take_while(|&&b| b).count() as u64
    }

    #[test]
    fn round_robin_assignment() {
        let f = Fabric::new();
        let v = TimestampVector::new(&f, 0, 3).unwrap();
        let mut c1 = v.client(1).unwrap();
        assert_eq!((0..3).map(|_| c1.next_cid().unwrap()).collect::<Vec<_>>(), vec![1, 4, 7]);
        assert_eq!(v.client(3).unwrap().next_cid().unwrap(), 3);
        let single = TimestampVector::new(&f, 0, 1).unwrap();
        let mut c = single.client(1).unwrap();
        assert_eq!((0..3).map(|_| c.next_cid().unwrap()).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(matches!(v.client(4), Err(OracleError::UnknownClient { .. })));
    }

    #[test]
    fn rid_examples() {
        let f = Fabric::new();
        let v = TimestampVector::new(&f, 0, 1).unwrap();
        let mut s = f.open_session(9);
        assert_eq!(v.current_rid(&mut s).unwrap(), 0);
        let mut c = v.client(1).unwrap();
        let cids: Vec<u64> = (0..5).map(|_| c.next_cid().unwrap()).collect();
        for cid in [1, 2, 3, 5] {
            c.publish_commit(&mut s, cids[cid - 1]).unwrap();
        }
        assert_eq!(v.current_rid(&mut s).unwrap(), 3);
        c.publish_commit(&mut s, 4).unwrap();
        assert_eq!(v.current_rid(&mut s).unwrap(), 5);
    }

    #[test]
    fn publish_is_idempotent_and_one_sided() {
        let f = Fabric::new();
        let v = TimestampVector::new(&f, 0, 3).unwrap();
        let mut s = f.open_session(9);
        let mut c1 = v.client(1).unwrap();
        c1.next_cid().unwrap();
        let four = c1.next_cid().unwrap();
        let before = f.metrics();
        c1.publish_commit(&mut s, four).unwrap();
        let once = f.peek(v.region().addr(0), v.region().length).unwrap();
        c1.publish_commit(&mut s, four).unwrap();
        assert_eq!(f.peek(v.region().addr(0), v.region().length).unwrap(), once);
        let d = f.metrics().since(&before);
        assert_eq!(d.node(0).server_cycles, 0);
        assert_eq!(d.node(9).verb(Verb::Write), 2);
        assert_eq!(s.stats().unsignaled_writes, 2);
        assert!(matches!(c1.publish_commit(&mut s, 2), Err(OracleError::NotOwned { .. })));
        assert!(matches!(c1.publish_commit(&mut s, 7), Err(OracleError::NotOwned { .. })));
    }

    #[test]
    fn wrap_is_an_error() {
        let f = Fabric::new();
        let v = TimestampVector::with_bits(&f, 0, 2, 5).unwrap();
        let mut c = v.client(2).unwrap();
        assert_eq!((c.next_cid().unwrap(), c.next_cid().unwrap()), (2, 4));
        assert_eq!(c.next_cid(), Err(OracleError::WouldWrap { client: 2 }));
    }

    #[test]
    fn full_prefix_matches_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for clients in [1u32, 3, 7, 16] {
            let f = Fabric::new();
            let v = TimestampVector::new(&f, 0, clients).unwrap();
            let mut s = f.open_session(9);
            let mut handles: Vec<_> = (1..=clients).map(|c| v.client(c).unwrap()).collect();
            let k = rng.gen_range(1..=DEFAULT_BITS);
            let mut committed = vec![false; DEFAULT_BITS as usize + 1];
            for cid in 1..=k {
                let h = &mut handles[((cid - 1) % clients as u64) as usize];
                assert_eq!(h.next_cid().unwrap(), cid);
                h.publish_commit(&mut s, cid).unwrap();
                committed[cid as usize] = true;
            }
            assert_eq!(v.current_rid(&mut s).unwrap(), k);
            assert_eq!(naive_rid(&committed), k);
        }
    }

    #[test]
    fn random_gaps_match_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let clients = rng.gen_range(1..6u32);
            let f = Fabric::new();
            let v = TimestampVector::with_bits(&f, 0, clients, 200).unwrap();
            let mut s = f.open_session(9);
            let mut handles: Vec<_> = (1..=clients).map(|c| v.client(c).unwrap()).collect();
            let mut committed = vec![false; 201];
            let mut last = 0;
            for cid in 1..=200u64 {
                let h = &mut handles[((cid - 1) % clients as u64) as usize];
                h.next_cid().unwrap();
                if rng.gen_bool(0.9) {
                    h.publish_commit(&mut s, cid).unwrap();
                    committed[cid as usize] = true;
                }
                let rid = v.current_rid(&mut s).unwrap();
                assert_eq!(rid, naive_rid(&committed));
                assert!(rid >= last);
                last = rid;
            }
        }
    }
}
