//! Distributed group-by aggregation over `(group, value)` rows.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use crate::fabric::{MetricsSnapshot, RemoteAddress, Transport};

use super::join::{FlushStats, Messenger, RemoteWriter};
use super::{hash_key, Cluster, OlapError};

/// Decomposable aggregate functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggFn {
    Sum,
    Count,
    Min,
    Max,
}

impl AggFn {
    pub const ALL: [AggFn; 4] = [AggFn::Sum, AggFn::Count, AggFn::Min, AggFn::Max];

    pub fn name(self) -> &'static str {
        match self {
            AggFn::Sum => "sum",
            AggFn::Count => "count",
            AggFn::Min => "min",
            AggFn::Max => "max",
        }
    }

    /// Partial aggregate of a single row.
    pub fn init(self, v: i64) -> i64 {
        match self {
            AggFn::Count => 1,
            _ => v,
        }
    }

    pub fn update(self, acc: i64, v: i64) -> i64 {
        match self {
            AggFn::Sum => acc.wrapping_add(v),
            AggFn::Count => acc + 1,
            AggFn::Min => acc.min(v),
            AggFn::Max => acc.max(v),
        }
    }

    /// Combines two partial aggregates.
    pub fn merge(self, a: i64, b: i64) -> i64 {
        match self {
            AggFn::Sum | AggFn::Count => a.wrapping_add(b),
            AggFn::Min => a.min(b),
            AggFn::Max => a.max(b),
        }
    }
}

impl std::str::FromStr for AggFn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AggFn::ALL.into_iter().find(|f| f.name() == s.to_ascii_lowercase()).ok_or_else(|| format!("unknown aggregate `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggConfig {
    /// Transport of the hierarchical union.
    pub transport: Transport,
    pub message_bytes: usize,
    /// Groups a worker's pre-aggregation table holds before it spills.
    pub table_capacity: usize,
    pub workers_per_node: usize,
    /// Overflow partitions; must exceed the total worker count. Defaults to
    /// twice the worker count.
    pub partitions: Option<usize>,
    pub buffer_bytes: usize,
    pub signal_every: u32,
    /// Head room of overflow regions over an even share of the rows.
    pub overflow_slack: f64,
    pub seed: u64,
}

impl Default for AggConfig {
    fn default() -> Self {
        AggConfig {
            transport: Transport::Rdma,
            message_bytes: 32 * 1024,
            table_capacity: 4096,
            workers_per_node: 2,
            partitions: None,
            buffer_bytes: 2 * 1024,
            signal_every: 16,
            overflow_slack: 2.0,
            seed: 0xa66,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AggOutput {
    pub groups: BTreeMap<u64, i64>,
    pub metrics: MetricsSnapshot,
    /// Fabric activity of the pre-aggregation phase.
    pub phase1_metrics: MetricsSnapshot,
    /// Partial rows produced by the first phase across all nodes.
    pub union_rows: u64,
    /// Partial rows that crossed the network.
    pub shipped_rows: u64,
    /// Times a pre-aggregation table filled up and spilled.
    pub overflow_flushes: u64,
    pub partitions: usize,
    pub workers: usize,
    pub flushes: FlushStats,
    pub wall_seconds: f64,
}

const ROW: usize = 16;

fn encode_rows(rows: &[(u64, i64)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.len() * ROW);
    for (g, v) in rows {
        out.extend_from_slice(&g.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_rows(bytes: &[u8]) -> impl Iterator<Item = (u64, i64)> + '_ {
    bytes.chunks_exact(ROW).map(|r| {
        (u64::from_le_bytes(r[..8].try_into().expect("8 bytes")), i64::from_le_bytes(r[8..].try_into().expect("8 bytes")))
    })
}

fn local_aggregate(rows: &[(u64, i64)], f: AggFn) -> Vec<(u64, i64)> {
    let mut t: HashMap<u64, i64> = HashMap::new();
    for &(g, v) in rows {
        t.entry(g).and_modify(|a| *a = f.update(*a, v)).or_insert_with(|| f.init(v));
    }
    let mut out: Vec<(u64, i64)> = t.into_iter().collect();
    out.sort_unstable();
    out
}

/// Every node aggregates its partition; the partial results are shipped to
/// the first node and aggregated again there.
pub fn agg_hierarchical(cluster: &Cluster, parts: &[Vec<(u64, i64)>], f: AggFn, config: &AggConfig) -> Result<AggOutput, OlapError> {
    check_parts(cluster, parts)?;
    let (t0, start) = (Instant::now(), cluster.fabric.metrics());
    let partials: Vec<Vec<(u64, i64)>> = std::thread::scope(|scope| {
        let hs: Vec<_> = parts.iter().map(|p| scope.spawn(move || local_aggregate(p, f))).collect();
        hs.into_iter().map(|h| h.join().expect("aggregation worker")).collect()
    });
    let phase1_metrics = cluster.fabric.metrics().since(&start);
    let mut m = Messenger::new(cluster, config.transport);
    let per_message = (config.message_bytes / ROW).max(1);
    let mut groups = BTreeMap::new();
    let mut shipped = 0;
    let mut merge = |g: u64, v: i64| {
        groups.entry(g).and_modify(|a| *a = f.merge(*a, v)).or_insert(v);
    };
    for (i, rows) in partials.iter().enumerate() {
        if i == 0 {
            rows.iter().for_each(|&(g, v)| merge(g, v));
            continue;
        }
        for batch in rows.chunks(per_message) {
            let got = m.deliver(i, 0, encode_rows(batch))?;
            decode_rows(&got).for_each(|(g, v)| merge(g, v));
            shipped += batch.len() as u64;
        }
    }
    Ok(AggOutput {
        groups,
        metrics: cluster.fabric.metrics().since(&start),
        phase1_metrics,
        union_rows: partials.iter().map(|p| p.len() as u64).sum(),
        shipped_rows: shipped,
        overflow_flushes: 0,
        partitions: 1,
        workers: cluster.nodes(),
        flushes: FlushStats::default(),
        wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

fn check_parts(cluster: &Cluster, parts: &[Vec<(u64, i64)>]) -> Result<(), OlapError> {
    if parts.len() != cluster.nodes() {
        return Err(OlapError::Partitions { got: parts.len(), nodes: cluster.nodes() });
    }
    Ok(())
}

/// Remote overflow area of one worker for one partition.
#[derive(Debug, Clone, Copy)]
struct Spill {
    addr: RemoteAddress,
    capacity: u64,
}

struct WorkerResult {
    filled: Vec<u64>,
    overflow_flushes: u64,
    partial_rows: u64,
    flushes: FlushStats,
}

/// Pre-aggregates `rows` in a table of bounded size, spilling the whole
/// table into the partitioned remote areas whenever a new group does not fit.
fn pre_aggregate(
    writer: &mut RemoteWriter,
    rows: &[(u64, i64)],
    f: AggFn,
    spills: &[Spill],
    config: &AggConfig,
) -> Result<WorkerResult, OlapError> {
    let p = spills.len();
    let cap = (config.buffer_bytes / ROW).max(1) * ROW;
    let mut buffers: Vec<Vec<u8>> = vec![Vec::new(); p];
    let mut filled = vec![0u64; p];
    let mut flush = |writer: &mut RemoteWriter, q: usize, buf: Vec<u8>, last: bool| -> Result<(), OlapError> {
        let s = spills[q];
        if filled[q] + buf.len() as u64 > s.capacity {
            return Err(OlapError::RegionOverflow { what: "aggregation overflow partition", node: s.addr.node });
        }
        let at = s.addr.add(filled[q]);
        filled[q] += buf.len() as u64;
        writer.write(at, buf, last)
    };
    let mut spill = |writer: &mut RemoteWriter, table: &mut HashMap<u64, i64>, buffers: &mut [Vec<u8>], last: bool| {
        let mut drained: Vec<(u64, i64)> = table.drain().collect();
        drained.sort_unstable();
        let n = drained.len() as u64;
        for (g, v) in drained {
            let q = (hash_key(g, config.seed) % p as u64) as usize;
            buffers[q].extend_from_slice(&g.to_le_bytes());
            buffers[q].extend_from_slice(&v.to_le_bytes());
            if buffers[q].len() >= cap {
                flush(writer, q, std::mem::take(&mut buffers[q]), false)?;
            }
        }
        if last {
            for (q, b) in buffers.iter_mut().enumerate().filter(|(_, b)| !b.is_empty()) {
                flush(writer, q, std::mem::take(b), true)?;
                writer.stats.final_flushes += 1;
            }
        }
        Ok::<u64, OlapError>(n)
    };
    let mut table: HashMap<u64, i64> = HashMap::with_capacity(config.table_capacity);
    let mut overflow_flushes = 0;
    let mut partial_rows = 0;
    for &(g, v) in rows {
        if let Some(a) = table.get_mut(&g) {
            *a = f.update(*a, v);
            continue;
        }
        if table.len() >= config.table_capacity {
            partial_rows += spill(writer, &mut table, &mut buffers, false)?;
            overflow_flushes += 1;
        }
        table.insert(g, f.init(v));
    }
    partial_rows += spill(writer, &mut table, &mut buffers, true)?;
    Ok(WorkerResult { filled, overflow_flushes, partial_rows, flushes: writer.stats })
}

/// Cache-sized per-worker pre-aggregation with one-sided spills into
/// hash-partitioned storage-node areas, then a parallel post-aggregation
/// with more partitions than workers.
pub fn agg_rdma(cluster: &Cluster, parts: &[Vec<(u64, i64)>], f: AggFn, config: &AggConfig) -> Result<AggOutput, OlapError> {
    check_parts(cluster, parts)?;
    let per_node = config.workers_per_node;
    let workers = cluster.nodes() * per_node;
    let p = config.partitions.unwrap_or(2 * workers);
    if per_node == 0 || config.table_capacity == 0 || config.signal_every == 0 {
        return Err(OlapError::Config("workers, table capacity and signal interval must be positive".into()));
    }
    if p <= workers {
        return Err(OlapError::Config(format!("{p} partitions do not exceed {workers} workers")));
    }
    let (t0, start) = (Instant::now(), cluster.fabric.metrics());

    // Worker (node i, thread t) takes the t-th contiguous slice of part i.
    let slices: Vec<(usize, &[(u64, i64)])> = parts
        .iter()
        .enumerate()
        .flat_map(|(i, rows)| {
            let per = rows.len().div_ceil(per_node).max(1);
            (0..per_node).map(move |t| (i, rows.get(t * per..((t + 1) * per).min(rows.len())).unwrap_or(&[])))
        })
        .collect();
    let mut spills: Vec<Vec<Spill>> = Vec::with_capacity(workers);
    for &(_, rows) in &slices {
        let share = (rows.len() as f64 * config.overflow_slack / p as f64).ceil() as u64;
        let capacity = (share + config.table_capacity.min(rows.len()) as u64) * ROW as u64;
        let mut row = Vec::with_capacity(p);
        for q in 0..p {
            let node = cluster.storage[q % cluster.storage.len()];
            let region = cluster.fabric.register_region(node, capacity.max(ROW as u64))?;
            row.push(Spill { addr: region.addr(0), capacity });
        }
        spills.push(row);
    }

    let results: Vec<Result<WorkerResult, OlapError>> = std::thread::scope(|scope| {
        let hs: Vec<_> = slices
            .iter()
            .zip(&spills)
            .map(|(&(i, rows), sp)| {
                let session = cluster.fabric.open_session(cluster.compute[i]);
                scope.spawn(move || pre_aggregate(&mut RemoteWriter::new(session, config.signal_every), rows, f, sp, config))
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("aggregation worker")).collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let phase1_metrics = cluster.fabric.metrics().since(&start);

    // Partition q is post-aggregated by worker q mod W, which reads every
    // worker's spill for q.
    let merged: Vec<Result<BTreeMap<u64, i64>, OlapError>> = std::thread::scope(|scope| {
        let hs: Vec<_> = (0..workers)
            .map(|w| {
                let mut session = cluster.fabric.open_session(cluster.compute[w / per_node]);
                let (spills, results) = (&spills, &results);
                scope.spawn(move || {
                    let mut out = BTreeMap::new();
                    for q in (w..p).step_by(workers) {
                        let mut t: HashMap<u64, i64> = HashMap::new();
                        for (sp, res) in spills.iter().zip(results) {
                            if res.filled[q] == 0 {
                                continue;
                            }
                            for (g, v) in decode_rows(&session.read(sp[q].addr, res.filled[q])?) {
                                t.entry(g).and_modify(|a| *a = f.merge(*a, v)).or_insert(v);
                            }
                        }
                        out.extend(t);
                    }
                    Ok(out)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("post-aggregation worker")).collect()
    });
    let mut groups = BTreeMap::new();
    for m in merged {
        groups.extend(m?);
    }
    let mut flushes = FlushStats::default();
    results.iter().for_each(|r| flushes += r.flushes);
    Ok(AggOutput {
        groups,
        metrics: cluster.fabric.metrics().since(&start),
        phase1_metrics,
        union_rows: results.iter().map(|r| r.partial_rows).sum(),
        shipped_rows: results.iter().map(|r| r.partial_rows).sum(),
        overflow_flushes: results.iter().map(|r| r.overflow_flushes).sum(),
        partitions: p,
        workers,
        flushes,
        wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::olap::oracle::hash_aggregate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(rng: &mut ChaCha8Rng, nodes: usize, rows: usize, distinct: u64) -> Vec<Vec<(u64, i64)>> {
        (0..nodes).map(|_| (0..rows).map(|_| (rng.gen_range(0..distinct), rng.gen_range(-1000..1000))).collect()).collect()
    }

    fn oracle(parts: &[Vec<(u64, i64)>], f: AggFn) -> BTreeMap<u64, i64> {
        hash_aggregate(parts.iter().flatten(), f)
    }

    #[test]
    fn single_group_sums_everything() {
        let parts = vec![vec![(7, 1), (7, 2)], vec![(7, 3)], vec![]];
        let cfg = AggConfig::default();
        let h = agg_hierarchical(&Cluster::new(3), &parts, AggFn::Sum, &cfg).unwrap();
        assert_eq!(h.groups, BTreeMap::from([(7, 6)]));
        let r = agg_rdma(&Cluster::new(3), &parts, AggFn::Sum, &cfg).unwrap();
        assert_eq!(r.groups, h.groups);
        assert_eq!(r.overflow_flushes, 0);
    }

    #[test]
    fn hierarchical_ships_at_most_nodes_times_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parts = data(&mut rng, 4, 5_000, 64);
        let out = agg_hierarchical(&Cluster::new(4), &parts, AggFn::Max, &AggConfig::default()).unwrap();
        assert!(out.union_rows <= 4 * 64);
        assert!(out.shipped_rows <= 3 * 64);
        assert_eq!(out.groups, oracle(&parts, AggFn::Max));
    }

    #[test]
    fn both_match_oracle_for_every_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for distinct in [1, 16, 256, 4096, 1 << 16] {
            let parts = data(&mut rng, 3, 20_000, distinct);
            for f in AggFn::ALL {
                let want = oracle(&parts, f);
                let cfg = AggConfig { table_capacity: 512, ..AggConfig::default() };
                assert_eq!(agg_hierarchical(&Cluster::new(3), &parts, f, &cfg).unwrap().groups, want, "{distinct} {f:?}");
                assert_eq!(agg_rdma(&Cluster::new(3), &parts, f, &cfg).unwrap().groups, want, "{distinct} {f:?}");
            }
        }
    }

    #[test]
    fn many_groups_spill_and_stay_correct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let parts = data(&mut rng, 2, 100_000, 1 << 20);
        let cluster = Cluster::new(2);
        let out = agg_rdma(&cluster, &parts, AggFn::Sum, &AggConfig::default()).unwrap();
        assert!(out.overflow_flushes > 0);
        assert!(out.partitions > out.workers);
        assert_eq!(out.groups, oracle(&parts, AggFn::Sum));
        let p1 = out.phase1_metrics.total_where(|n, _| cluster.is_storage(n));
        assert_eq!(p1.server_cycles, 0);
        assert!(out.flushes.largest_write <= 2048);
        assert!(out.flushes.signaled < out.flushes.writes);
    }

    #[test]
    fn partition_count_must_exceed_workers() {
        let parts = vec![vec![(1, 1)]; 2];
        let cfg = AggConfig { partitions: Some(4), ..AggConfig::default() };
        assert!(matches!(agg_rdma(&Cluster::new(2), &parts, AggFn::Sum, &cfg), Err(OlapError::Config(_))));
        let cfg = AggConfig { partitions: Some(5), ..cfg };
        assert!(agg_rdma(&Cluster::new(2), &parts, AggFn::Sum, &cfg).is_ok());
    }

    #[test]
    fn exhausted_overflow_area_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let parts = data(&mut rng, 1, 10_000, 10_000);
        let cfg = AggConfig { table_capacity: 8, overflow_slack: 0.01, partitions: Some(3), ..AggConfig::default() };
        let err = agg_rdma(&Cluster::new(1), &parts, AggFn::Count, &cfg).unwrap_err();
        assert!(matches!(err, OlapError::RegionOverflow { .. }), "{err}");
    }

    #[test]
    fn parse_functions() {
        assert_eq!("SUM".parse::<AggFn>().unwrap(), AggFn::Sum);
        assert!("avg".parse::<AggFn>().is_err());
    }
}
