use std::collections::BTreeMap;

use parking_lot::Mutex;

use super::{NodeId, Transport, Verb};

/// Counters of one node on one transport.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeCounters {
    /// Verbs posted by this node, indexed like [`Verb::ALL`].
    pub verbs: [u64; 6],
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Cycles charged for verbs this node initiated.
    pub client_cycles: u64,
    /// Cycles charged for verbs where this node was the passive peer.
    pub server_cycles: u64,
}

impl NodeCounters {
    pub fn verb(&self, verb: Verb) -> u64 {
        self.verbs[verb.index()]
    }

    fn merge(&mut self, other: &NodeCounters) {
        for (a, b) in self.verbs.iter_mut().zip(other.verbs) {
            *a += b;
        }
        self.bytes_sent += other.bytes_sent;
        self.bytes_received += other.bytes_received;
        self.client_cycles += other.client_cycles;
        self.server_cycles += other.server_cycles;
    }
}

/// Fabric-wide instrumentation. All counters only grow.
#[derive(Debug, Default)]
pub struct FabricMetrics {
    counters: Mutex<BTreeMap<(NodeId, Transport), NodeCounters>>,
}

impl FabricMetrics {
    pub(crate) fn record(&self, node: NodeId, transport: Transport, f: impl FnOnce(&mut NodeCounters)) {
        let mut map = self.counters.lock();
        f(map.entry((node, transport)).or_default());
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot { rows: self.counters.lock().iter().map(|(&(n, t), c)| (n, t, *c)).collect() }
    }
}

/// Point-in-time copy of [`FabricMetrics`], ordered by (node, transport).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetricsSnapshot {
    pub rows: Vec<(NodeId, Transport, NodeCounters)>,
}

impl MetricsSnapshot {
    pub const CSV_HEADER: &'static str = "node,transport,read,write,send,receive,cas,fetch_add,bytes_sent,bytes_received,client_cycles,server_cycles";

    pub fn node(&self, node: NodeId) -> NodeCounters {
        self.total_where(|n, _| n == node)
    }

    pub fn total(&self) -> NodeCounters {
        self.total_where(|_, _| true)
    }

    pub fn total_where(&self, mut pred: impl FnMut(NodeId, Transport) -> bool) -> NodeCounters {
        let mut acc = NodeCounters::default();
        for (n, t, c) in &self.rows {
            if pred(*n, *t) {
                acc.merge(c);
            }
        }
        acc
    }

    /// Counter growth since `earlier`.
    pub fn since(&self, earlier: &MetricsSnapshot) -> MetricsSnapshot {
        let base: BTreeMap<_, _> = earlier.rows.iter().map(|(n, t, c)| ((*n, *t), *c)).collect();
        let rows = self
            .rows
            .iter()
            .map(|(n, t, c)| {
                let b = base.get(&(*n, *t)).copied().unwrap_or_default();
                let mut d = *c;
                for (x, y) in d.verbs.iter_mut().zip(b.verbs) {
                    *x -= y;
                }
                d.bytes_sent -= b.bytes_sent;
                d.bytes_received -= b.bytes_received;
                d.client_cycles -= b.client_cycles;
                d.server_cycles -= b.server_cycles;
                (*n, *t, d)
            })
            .collect();
        MetricsSnapshot { rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (n, t, c) in &self.rows {
            let v = c.verbs;
            out.push_str(&format!(
                "{n},{t},{},{},{},{},{},{},{},{},{},{}\n",
                v[0], v[1], v[2], v[3], v[4], v[5], c.bytes_sent, c.bytes_received, c.client_cycles, c.server_cycles
            ));
        }
        out
    }
}
