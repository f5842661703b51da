use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::RwLock;

use super::{FabricError, NodeId, RemoteAddress};

/// Descriptor of a registered region. The bytes themselves live inside the
/// fabric and are only reachable through verbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemoryRegion {
    pub node: NodeId,
    pub base: u64,
    pub length: u64,
}

impl MemoryRegion {
    /// Address `offset` bytes into the region.
    pub fn addr(&self, offset: u64) -> RemoteAddress {
        debug_assert!(offset <= self.length);
        RemoteAddress::new(self.node, self.base + offset)
    }

    pub fn end(&self) -> u64 {
        self.base + self.length
    }

    pub fn contains(&self, addr: RemoteAddress, len: u64) -> bool {
        addr.node == self.node && addr.offset >= self.base && addr.offset.saturating_add(len) <= self.end()
    }
}

pub(crate) struct Region {
    pub(crate) desc: MemoryRegion,
    pub(crate) bytes: RwLock<Vec<u8>>,
}

#[derive(Default)]
struct NodeMemory {
    regions: BTreeMap<u64, Arc<Region>>,
    high_water: u64,
}

#[derive(Default)]
pub(crate) struct Memory {
    nodes: HashMap<NodeId, NodeMemory>,
}

impl Memory {
    pub(crate) fn register(&mut self, node: NodeId, base: Option<u64>, length: u64) -> Result<MemoryRegion, FabricError> {
        if length == 0 {
            return Err(FabricError::EmptyRegion);
        }
        let mem = self.nodes.entry(node).or_default();
        let base = base.unwrap_or(mem.high_water);
        let end = base.checked_add(length).ok_or(FabricError::Overlap { node, base, length })?;
        let before = mem.regions.range(..end).next_back();
        if let Some((_, r)) = before {
            if r.desc.end() > base {
                return Err(FabricError::Overlap { node, base, length });
            }
        }
        let desc = MemoryRegion { node, base, length };
        let bytes = RwLock::new(vec![0u8; length as usize]);
        mem.regions.insert(base, Arc::new(Region { desc, bytes }));
        mem.high_water = mem.high_water.max(end);
        Ok(desc)
    }

    /// The region holding `[addr, addr + len)`, if any single region does.
    pub(crate) fn resolve(&self, addr: RemoteAddress, len: u64) -> Result<Arc<Region>, FabricError> {
        let err = FabricError::Access { addr, len };
        let mem = self.nodes.get(&addr.node).ok_or(err.clone())?;
        let (_, region) = mem.regions.range(..=addr.offset).next_back().ok_or(err.clone())?;
        if region.desc.contains(addr, len) {
            Ok(region.clone())
        } else {
            Err(err)
        }
    }

    pub(crate) fn read(&self, addr: RemoteAddress, len: u64) -> Result<Vec<u8>, FabricError> {
        let region = self.resolve(addr, len)?;
        let start = (addr.offset - region.desc.base) as usize;
        let bytes = region.bytes.read();
        Ok(bytes[start..start + len as usize].to_vec())
    }

    pub(crate) fn regions(&self, node: NodeId) -> Vec<MemoryRegion> {
        self.nodes
            .get(&node)
            .map(|m| m.regions.values().map(|r| r.desc).collect())
            .unwrap_or_default()
    }
}

impl Region {
    fn local(&self, addr: RemoteAddress) -> usize {
        (addr.offset - self.desc.base) as usize
    }

    pub(crate) fn read(&self, addr: RemoteAddress, len: usize) -> Vec<u8> {
        let start = self.local(addr);
        self.bytes.read()[start..start + len].to_vec()
    }

    pub(crate) fn write(&self, addr: RemoteAddress, payload: &[u8]) {
        let start = self.local(addr);
        self.bytes.write()[start..start + payload.len()].copy_from_slice(payload);
    }

    /// Applies `f` to the little-endian word at `addr` under the region's
    /// write lock and returns the previous value.
    pub(crate) fn update_word(&self, addr: RemoteAddress, f: impl FnOnce(u64) -> u64) -> u64 {
        let start = self.local(addr);
        let mut bytes = self.bytes.write();
        let word: &mut [u8] = &mut bytes[start..start + 8];
        let old = u64::from_le_bytes(word.try_into().expect("8-byte slice"));
        word.copy_from_slice(&f(old).to_le_bytes());
        old
    }
}
