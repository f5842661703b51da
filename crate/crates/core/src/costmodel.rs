//! Closed-form cost and throughput models for distributed joins and
//! transaction processing over the three transports.
//!
//! Join costs are in seconds and only count memory and network traffic;
//! CPU work for hashing and partitioning is ignored.

use std::fmt::Write as _;

use thiserror::Error;

use crate::fabric::Transport;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("parameter `{0}` must be strictly positive")]
    NonPositive(&'static str),
    #[error("offered load 6*lambda*t = {0} is outside the model's domain [0, 1)")]
    ModelDomain(f64),
    #[error("a conflict needs at least one record")]
    NoRecords,
}

/// Machine constants used by every formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    /// Seconds per byte touched in local memory.
    pub c_mem: f64,
    /// Seconds per byte shipped, per transport.
    pub c_net_rdma: f64,
    pub c_net_ipoib: f64,
    pub c_net_ipoeth: f64,
    /// CPU cycles spent per message.
    pub cycles_m: f64,
    /// Cycles per second of one core.
    pub cycles_c: f64,
    /// Cores per node.
    pub cores: f64,
    /// Bloom filter false-positive rate.
    pub epsilon: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            c_mem: 1e-9,
            c_net_rdma: 1.47e-10,
            c_net_ipoib: 2.86e-10,
            c_net_ipoeth: 8e-9,
            cycles_m: 3750.0,
            cycles_c: 2.2e9,
            cores: 8.0,
            epsilon: 0.1,
        }
    }
}

/// Cardinality and tuple width of a relation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationShape {
    pub tuples: f64,
    pub width: f64,
}

impl RelationShape {
    pub fn new(tuples: u64, width: u64) -> Self {
        RelationShape { tuples: tuples as f64, width: width as f64 }
    }

    pub fn bytes(&self) -> f64 {
        self.tuples * self.width
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        let fields = [
            ("c_mem", self.c_mem),
            ("c_net_rdma", self.c_net_rdma),
            ("c_net_ipoib", self.c_net_ipoib),
            ("c_net_ipoeth", self.c_net_ipoeth),
            ("cycles_m", self.cycles_m),
            ("cycles_c", self.cycles_c),
            ("cores", self.cores),
            ("epsilon", self.epsilon),
        ];
        match fields.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            Some((name, _)) => Err(CostError::NonPositive(name)),
            None => Ok(()),
        }
    }

    pub fn c_net(&self, transport: Transport) -> f64 {
        match transport {
            Transport::Rdma => self.c_net_rdma,
            Transport::IpoIb => self.c_net_ipoib,
            Transport::IpoEth => self.c_net_ipoeth,
        }
    }

    pub fn with_c_net(mut self, transport: Transport, c_net: f64) -> Self {
        match transport {
            Transport::Rdma => self.c_net_rdma = c_net,
            Transport::IpoIb => self.c_net_ipoib = c_net,
            Transport::IpoEth => self.c_net_ipoeth = c_net,
        }
        self
    }

    pub fn t_mem(&self, r: RelationShape) -> f64 {
        r.bytes() * self.c_mem
    }

    pub fn t_net(&self, r: RelationShape, transport: Transport) -> f64 {
        r.bytes() * self.c_net(transport)
    }

    /// Read at the sender, ship, materialize at the receiver.
    pub fn t_part(&self, r: RelationShape, transport: Transport) -> f64 {
        r.bytes() * (2.0 * self.c_mem + self.c_net(transport))
    }

    /// Two radix passes over both inputs.
    pub fn t_join_local(&self, r: RelationShape, s: RelationShape) -> f64 {
        2.0 * self.c_mem * (r.bytes() + s.bytes())
    }

    pub fn t_ghj(&self, r: RelationShape, s: RelationShape, transport: Transport) -> f64 {
        let closed = (r.bytes() + s.bytes()) * (4.0 * self.c_mem + self.c_net(transport));
        debug_assert!(
            rel_eq(closed, self.t_part(r, transport) + self.t_part(s, transport) + self.t_join_local(r, s)),
            "t_ghj closed form diverges from its phases"
        );
        closed
    }

    /// Fraction of tuples that pass a Bloom filter when a fraction `sel`
    /// has a join partner.
    pub fn sel_eff(&self, sel: f64) -> f64 {
        (sel + self.epsilon).min(1.0)
    }

    pub fn t_ghj_bloom(&self, r: RelationShape, s: RelationShape, sel: f64, transport: Transport) -> f64 {
        self.t_ghj_bloom_eff(r, s, self.sel_eff(sel), transport)
    }

    /// Semi-join reduced GHJ at a given pass fraction: one scan to build and
    /// apply the filters, then a GHJ over the survivors.
    pub fn t_ghj_bloom_eff(&self, r: RelationShape, s: RelationShape, sel_eff: f64, transport: Transport) -> f64 {
        let bytes = r.bytes() + s.bytes();
        let closed = bytes * (self.c_mem + 4.0 * sel_eff * self.c_mem + sel_eff * self.c_net(transport));
        debug_assert!(
            rel_eq(closed, bytes * self.c_mem + sel_eff * self.t_ghj(r, s, transport)),
            "t_ghj_bloom closed form diverges from its phases"
        );
        closed
    }

    /// Partitioning writes straight into remote memory, so only the sender's
    /// scan is paid.
    pub fn t_rdma_ghj(&self, r: RelationShape, s: RelationShape) -> f64 {
        let closed = 3.0 * self.c_mem * (r.bytes() + s.bytes());
        debug_assert!(rel_eq(closed, self.t_mem(r) + self.t_mem(s) + self.t_join_local(r, s)));
        closed
    }

    /// The remote radix pass doubles as the first radix pass of the local
    /// join.
    pub fn t_rrj(&self, r: RelationShape, s: RelationShape) -> f64 {
        2.0 * self.c_mem * (r.bytes() + s.bytes())
    }

    /// Pass fraction at which the reduced and plain GHJ cost the same.
    /// Reduction wins below it.
    pub fn crossover(&self, transport: Transport) -> f64 {
        let c_net = self.c_net(transport);
        (3.0 * self.c_mem + c_net) / (4.0 * self.c_mem + c_net)
    }

    /// [`Self::crossover`] found by bisection on the cost curves instead of
    /// the closed form.
    pub fn crossover_numeric(&self, transport: Transport) -> f64 {
        let shape = RelationShape { tuples: 1.0, width: 1.0 };
        let gap = |x: f64| self.t_ghj_bloom_eff(shape, shape, x, transport) - self.t_ghj(shape, shape, transport);
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gap(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

fn rel_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Chance that a transaction touching `records` hot records conflicts, with
/// arrival rate `lambda` and service time `t`.
pub fn conflict_probability(lambda: f64, t: f64, records: u32) -> Result<f64, CostError> {
    if records == 0 {
        return Err(CostError::NoRecords);
    }
    let p = 6.0 * lambda * t;
    if !(0.0..1.0).contains(&p) {
        return Err(CostError::ModelDomain(p));
    }
    Ok(1.0 - (1.0 - p).powi(records as i32))
}

/// Message-bound throughput of a cluster of `nodes` servers, each with
/// `cores` cores at `cycles_c`, where a distributed transaction exchanges
/// `5 + 8n` messages of `cycles_m` cycles each.
pub fn trx_upper_bound(cores: f64, cycles_c: f64, nodes: u32, cycles_m: f64) -> f64 {
    let n = nodes as f64;
    cores * cycles_c * (n + 1.0) / ((5.0 + 8.0 * n) * cycles_m)
}

pub fn bandwidth_bound(bandwidth_bytes_per_s: f64, bytes_per_txn: f64) -> f64 {
    bandwidth_bytes_per_s / bytes_per_txn
}

pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;
pub const KIB: f64 = 1024.0;

/// Algorithms covered by [`emit_cost_curves`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinAlgorithm {
    Ghj,
    GhjBloom,
    RdmaGhj,
    Rrj,
}

impl JoinAlgorithm {
    pub const ALL: [JoinAlgorithm; 4] = [JoinAlgorithm::Ghj, JoinAlgorithm::GhjBloom, JoinAlgorithm::RdmaGhj, JoinAlgorithm::Rrj];

    pub fn name(self) -> &'static str {
        match self {
            JoinAlgorithm::Ghj => "ghj",
            JoinAlgorithm::GhjBloom => "ghj_bloom",
            JoinAlgorithm::RdmaGhj => "rdma_ghj",
            JoinAlgorithm::Rrj => "rrj",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub sel: f64,
    pub algorithm: JoinAlgorithm,
    pub transport: Transport,
    pub cost_seconds: f64,
}

pub const CURVES_HEADER: &str = "sel,algorithm,transport,cost_seconds";

/// Evaluates every join cost over `sels` (raw join selectivities) for
/// each transport. Rows are ordered by sel, then transport, then algorithm.
/// The one-sided algorithms only appear under RDMA.
pub fn emit_cost_curves(params: &CostParams, r: RelationShape, s: RelationShape, sels: &[f64]) -> Vec<CostRow> {
    let mut rows = Vec::new();
    for &sel in sels {
        for transport in Transport::ALL {
            for algorithm in JoinAlgorithm::ALL {
                let cost_seconds = match algorithm {
                    JoinAlgorithm::Ghj => params.t_ghj(r, s, transport),
                    JoinAlgorithm::GhjBloom => params.t_ghj_bloom(r, s, sel, transport),
                    JoinAlgorithm::RdmaGhj if transport == Transport::Rdma => params.t_rdma_ghj(r, s),
                    JoinAlgorithm::Rrj if transport == Transport::Rdma => params.t_rrj(r, s),
                    _ => continue,
                };
                rows.push(CostRow { sel, algorithm, transport, cost_seconds });
            }
        }
    }
    rows
}

pub fn curves_csv(rows: &[CostRow]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for row in rows {
        writeln!(out, "{},{},{},{:e}", row.sel, row.algorithm.name(), row.transport, row.cost_seconds).expect("string write");
    }
    out
}

/// A named scalar produced by one of the throughput models.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub name: String,
    pub value: f64,
}

pub const BOUNDS_HEADER: &str = "bound,value";

/// Throughput bounds and crossovers under `params`.
pub fn bounds(params: &CostParams) -> Vec<BoundRow> {
    let row = |name: &str, value| BoundRow { name: name.to_string(), value };
    let mut out = vec![
        row("trx_upper_bound_n3", trx_upper_bound(params.cores, params.cycles_c, 3, params.cycles_m)),
        row("trx_upper_bound_n4", trx_upper_bound(params.cores, params.cycles_c, 4, params.cycles_m)),
        row("bandwidth_bound_10gbe", bandwidth_bound(1.25 * GIB, 6.0 * KIB)),
        row("bandwidth_bound_rsi", bandwidth_bound(13.8e9, 6.0 * KIB)),
    ];
    for t in Transport::ALL {
        out.push(row(&format!("crossover_{t}"), params.crossover(t)));
    }
    out
}

pub fn bounds_csv(rows: &[BoundRow]) -> String {
    let mut out = String::from(BOUNDS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{}", r.name, r.value).expect("string write");
    }
    out
}
