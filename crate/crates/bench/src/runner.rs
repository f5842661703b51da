//! Experiment runners.

use std::collections::BTreeMap;
use std::time::Instant;

use nam_core::costmodel::{bounds, bounds_csv, curves_csv, emit_cost_curves, CostParams, JoinAlgorithm, RelationShape};
use nam_core::fabric::{Fabric, NodeId, Transport};
use nam_core::olap::agg::{agg_hierarchical, agg_rdma, AggConfig};
use nam_core::olap::join::{ghj, ghj_bloom, rdma_ghj, rrj, JoinConfig, JoinOutput};
use nam_core::olap::oracle::{hash_aggregate, nested_loop_join};
use nam_core::olap::{canonical, Cluster, OlapError, Relation};
use nam_core::oltp::checker::{brute_force_si, check_history};
use nam_core::oltp::history::HistoryEntry;
use nam_core::oltp::rsi::{RsiClient, RsiConfig, RsiTxn};
use nam_core::oltp::trad::{TradClient, TradCluster, TradConfig, TradTxn};
use nam_core::oltp::{AbortReason, CommitReport, OltpError, TxnDescriptor};
use nam_core::oracle::{TimestampVector, DEFAULT_BITS};
use nam_core::store::{Store, TableId, TableSpec};

use crate::config::{AggOperator, ExperimentConfig, Protocol};
use crate::report::{AlgorithmRun, LatencyStats, RunReport, Verdict};
use crate::workload::{gen_agg_input, gen_join_input, gen_oltp_workload, product_rows, take_stock, CheckoutTxn, ORDERLINE_BYTES, ORDER_BYTES};
use crate::BenchError;

pub const PRODUCTS: TableId = TableId(0);
pub const ORDERS: TableId = TableId(1);
pub const ORDERLINES: TableId = TableId(2);

/// Compute node of client `c` (1-based).
pub fn client_node(c: u32) -> NodeId {
    100 + c
}

pub const TM_NODE: NodeId = 900;
pub const TS_NODE: NodeId = 901;

/// Shared shape of the two protocol clients.
trait CheckoutClient {
    type Txn;
    fn begin(&mut self) -> Result<Self::Txn, OltpError>;
    fn read(&mut self, txn: &mut Self::Txn, key: u64) -> Result<Vec<u8>, OltpError>;
    fn write(&mut self, txn: &mut Self::Txn, key: u64, payload: Vec<u8>) -> Result<(), OltpError>;
    fn insert(&mut self, txn: &mut Self::Txn, table: TableId, payload: Vec<u8>);
    fn commit(&mut self, txn: Self::Txn) -> Result<CommitReport, OltpError>;
    fn abort(&mut self, txn: Self::Txn, reason: AbortReason) -> Result<TxnDescriptor, OltpError>;
}

impl CheckoutClient for RsiClient {
    type Txn = RsiTxn;
    fn begin(&mut self) -> Result<RsiTxn, OltpError> {
        RsiClient::begin(self)
    }
    fn read(&mut self, txn: &mut RsiTxn, key: u64) -> Result<Vec<u8>, OltpError> {
        RsiClient::read(self, txn, PRODUCTS, key)
    }
    fn write(&mut self, txn: &mut RsiTxn, key: u64, payload: Vec<u8>) -> Result<(), OltpError> {
        txn.write(PRODUCTS, key, payload)
    }
    fn insert(&mut self, txn: &mut RsiTxn, table: TableId, payload: Vec<u8>) {
        txn.insert(table, payload)
    }
    fn commit(&mut self, txn: RsiTxn) -> Result<CommitReport, OltpError> {
        RsiClient::commit(self, txn)
    }
    fn abort(&mut self, txn: RsiTxn, reason: AbortReason) -> Result<TxnDescriptor, OltpError> {
        RsiClient::abort(self, txn, reason)
    }
}

impl CheckoutClient for TradClient {
    type Txn = TradTxn;
    fn begin(&mut self) -> Result<TradTxn, OltpError> {
        TradClient::begin(self)
    }
    fn read(&mut self, txn: &mut TradTxn, key: u64) -> Result<Vec<u8>, OltpError> {
        TradClient::read(self, txn, PRODUCTS, key)
    }
    fn write(&mut self, txn: &mut TradTxn, key: u64, payload: Vec<u8>) -> Result<(), OltpError> {
        txn.write(PRODUCTS, key, payload)
    }
    fn insert(&mut self, txn: &mut TradTxn, table: TableId, payload: Vec<u8>) {
        txn.insert(table, payload)
    }
    fn commit(&mut self, txn: TradTxn) -> Result<CommitReport, OltpError> {
        TradClient::commit(self, txn)
    }
    fn abort(&mut self, txn: TradTxn, reason: AbortReason) -> Result<TxnDescriptor, OltpError> {
        Ok(TradClient::abort(self, txn, reason))
    }
}

/// What one client thread produced.
#[derive(Debug, Default)]
struct ClientLog {
    history: Vec<HistoryEntry>,
    latencies: Vec<f64>,
    reports: Vec<CommitReport>,
    aborted: u64,
    abort_kinds: BTreeMap<String, u64>,
}

fn run_checkout<C: CheckoutClient>(client: &mut C, t: &CheckoutTxn) -> Result<Result<CommitReport, TxnDescriptor>, OltpError> {
    let mut txn = client.begin()?;
    for (&key, &q) in t.products.iter().zip(&t.quantities) {
        let row = match client.read(&mut txn, key) {
            Ok(row) => row,
            Err(OltpError::Aborted(reason)) => return client.abort(txn, reason).map(Err),
            Err(e) => return Err(e),
        };
        client.write(&mut txn, key, take_stock(&row, q))?;
    }
    client.insert(&mut txn, ORDERS, t.order.clone());
    for l in &t.lines {
        client.insert(&mut txn, ORDERLINES, l.clone());
    }
    client.commit(txn).map(Ok)
}

fn client_loop<C: CheckoutClient>(client: &mut C, txns: &[CheckoutTxn]) -> Result<ClientLog, OltpError> {
    let mut log = ClientLog::default();
    for t in txns {
        let desc = match run_checkout(client, t)? {
            Ok(report) => {
                let d = report.txn.clone();
                if d.outcome.is_committed() {
                    log.latencies.push(report.latency);
                    log.reports.push(report);
                }
                d
            }
            Err(d) => d,
        };
        let entry = HistoryEntry::from(&desc);
        if !entry.committed {
            log.aborted += 1;
            *log.abort_kinds.entry(entry.reason.clone().unwrap_or_default()).or_default() += 1;
        }
        log.history.push(entry);
        // Keeps clients at a similar pace; a straggler holds back every
        // snapshot.
        std::thread::yield_now();
    }
    Ok(log)
}

fn spawn_clients<C: CheckoutClient + Send>(clients: Vec<C>, workload: &[Vec<CheckoutTxn>]) -> Result<Vec<ClientLog>, BenchError> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = clients
            .into_iter()
            .zip(workload)
            .map(|(mut c, txns)| scope.spawn(move || client_loop(&mut c, txns)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("client thread").map_err(BenchError::from)).collect()
    })
}

fn per_node(total: u64, nodes: usize) -> u64 {
    total.div_ceil(nodes as u64) + 1
}

/// Runs the checkout workload with closed-loop clients, one thread each.
/// Aborted transactions are not retried.
pub fn run_oltp(config: &ExperimentConfig) -> Result<RunReport, BenchError> {
    config.validate()?;
    let fabric = Fabric::with_model(config.latency_model());
    let workload = gen_oltp_workload(config);
    let products = product_rows(config);
    let storage: Vec<NodeId> = (0..config.nodes as NodeId).collect();
    let total = config.clients as u64 * config.txns_per_client;

    let logs = match config.protocol {
        Protocol::Rsi => {
            if config.transport != Transport::Rdma {
                return Err(BenchError::Config("rsi needs the rdma transport".into()));
            }
            let specs = [
                TableSpec::new("product", config.product_bytes, per_node(config.products, config.nodes)).with_slots(config.slots),
                TableSpec::new("order", ORDER_BYTES, per_node(total, config.nodes)).with_slots(1),
                TableSpec::new("orderline", ORDERLINE_BYTES, per_node(3 * total, config.nodes)).with_slots(1),
            ];
            let store = Store::new(&fabric, &storage, &specs)?;
            let mut loader = fabric.open_session(999);
            store.bulk_load(&mut loader, PRODUCTS, &products)?;
            let bits = DEFAULT_BITS.max(config.clients as u64 * (config.txns_per_client + 1));
            let vector = TimestampVector::with_bits(&fabric, storage[0], config.clients, bits)?;
            let rsi = RsiConfig { read_retries: config.read_retries };
            let clients = (1..=config.clients)
                .map(|c| RsiClient::new(&store, &vector, c, client_node(c), rsi))
                .collect::<Result<Vec<_>, _>>()?;
            spawn_clients(clients, &workload)?
        }
        Protocol::Trad => {
            let cluster = TradCluster::new(
                &fabric,
                TradConfig { transport: config.transport, tm: TM_NODE, ts: TS_NODE, rms: storage.clone() },
            );
            cluster.bulk_load(PRODUCTS, &products);
            let clients: Vec<_> = (1..=config.clients).map(|c| TradClient::new(&cluster, c, client_node(c))).collect();
            spawn_clients(clients, &workload)?
        }
    };

    let mut report = RunReport {
        label: format!("oltp {} over {} ({} nodes, {} clients)", config.protocol, config.transport, config.nodes, config.clients),
        ..RunReport::default()
    };
    let mut latencies = Vec::new();
    let mut reports = Vec::new();
    for log in logs {
        report.history.extend(log.history);
        latencies.extend(log.latencies);
        reports.extend(log.reports);
        report.aborted += log.aborted;
        for (k, n) in log.abort_kinds {
            *report.abort_kinds.entry(k).or_default() += n;
        }
    }
    report.attempted = report.history.len() as u64;
    report.committed = report.history.iter().filter(|e| e.committed).count() as u64;
    report.latency = LatencyStats::from_samples(latencies);
    report.metrics = fabric.metrics();
    report.tally = sum_tallies(&reports);
    report.verdicts = oltp_verdicts(config, &report, &reports);
    Ok(report)
}

fn sum_tallies(reports: &[CommitReport]) -> BTreeMap<String, u64> {
    let mut t = BTreeMap::new();
    for r in reports {
        let x = &r.tally;
        for (k, v) in [
            ("reads", x.reads),
            ("cas", x.cas),
            ("fetch_adds", x.fetch_adds),
            ("signaled_writes", x.signaled_writes),
            ("unsignaled_writes", x.unsignaled_writes),
            ("sends", x.sends),
            ("receives", x.receives),
            ("server_messages_received", x.m_r()),
            ("server_messages_sent", x.m_s()),
            ("storage_cycles", x.storage_cycles),
        ] {
            *t.entry(k.to_string()).or_default() += v;
        }
    }
    t
}

fn oltp_verdicts(config: &ExperimentConfig, report: &RunReport, reports: &[CommitReport]) -> Vec<Verdict> {
    let mut out = Vec::new();
    out.push(Verdict::new(
        "accounting",
        report.committed + report.aborted == report.attempted,
        format!("{} + {} of {}", report.committed, report.aborted, report.attempted),
    ));
    let violations = check_history(&report.history);
    out.push(Verdict::new(
        "si_history",
        violations.is_empty(),
        match violations.first() {
            None => format!("{} transactions checked", report.history.len()),
            Some(v) => format!("{} violations, first: {v}", violations.len()),
        },
    ));
    if report.attempted <= 6 {
        out.push(Verdict::new("si_brute_force", brute_force_si(&report.history), "exhaustive search over begin/commit orders"));
    }
    let bad = match config.protocol {
        Protocol::Rsi => reports.iter().filter(|r| !rsi_tally_exact(r)).count(),
        Protocol::Trad => reports.iter().filter(|r| !trad_tally_exact(r)).count(),
    };
    out.push(Verdict::new("message_counts", bad == 0, format!("{bad} committed transactions off the formula")));
    out
}

/// W CAS and W + I signaled WRITEs for W updates and I inserts, I
/// FETCH_ADDs, one unsignaled WRITE for the timestamp, no storage CPU.
pub fn rsi_tally_exact(r: &CommitReport) -> bool {
    let (w, i) = (r.txn.writes.len() as u64, r.txn.inserts.len() as u64);
    let t = &r.tally;
    (t.cas, t.signaled_writes, t.unsignaled_writes, t.fetch_adds, t.reads, t.sends, t.storage_cycles) == (w, w + i, 1, i, 0, 0, 0)
}

/// m_r = 2 + 4n and m_s = 3 + 4n over the n resource managers involved.
pub fn trad_tally_exact(r: &CommitReport) -> bool {
    let n = r.tally.servers.len() as u64 - 1;
    r.tally.m_r() == 2 + 4 * n && r.tally.m_s() == 3 + 4 * n
}

fn cost_of(p: &CostParams, a: JoinAlgorithm, r: &Relation, s: &Relation, sel: f64, t: Transport) -> f64 {
    let (r, s) = (RelationShape::new(r.len() as u64, r.tuple_width() as u64), RelationShape::new(s.len() as u64, s.tuple_width() as u64));
    match a {
        JoinAlgorithm::Ghj => p.t_ghj(r, s, t),
        JoinAlgorithm::GhjBloom => p.t_ghj_bloom(r, s, sel, t),
        JoinAlgorithm::RdmaGhj => p.t_rdma_ghj(r, s),
        JoinAlgorithm::Rrj => p.t_rrj(r, s),
    }
}

pub fn join_with(a: JoinAlgorithm, cluster: &Cluster, r: &Relation, s: &Relation, cfg: &JoinConfig) -> Result<JoinOutput, OlapError> {
    match a {
        JoinAlgorithm::Ghj => ghj(cluster, r, s, cfg),
        JoinAlgorithm::GhjBloom => ghj_bloom(cluster, r, s, cfg),
        JoinAlgorithm::RdmaGhj => rdma_ghj(cluster, r, s, cfg),
        JoinAlgorithm::Rrj => rrj(cluster, r, s, cfg),
    }
}

/// Generates R and S, runs the selected algorithms on fresh clusters and
/// checks them against each other and, for small inputs, the nested loop.
pub fn run_olap_join(config: &ExperimentConfig) -> Result<RunReport, BenchError> {
    config.validate()?;
    let (r, s) = gen_join_input(config);
    let cfg = JoinConfig { transport: config.transport, epsilon: config.cost.epsilon, seed: config.seed, ..JoinConfig::default() };
    let mut report = RunReport {
        label: format!(
            "olap-join |R|={} |S|={} sel={} over {} ({} nodes)",
            config.r_tuples, config.s_tuples, config.selectivity, config.transport, config.nodes
        ),
        ..RunReport::default()
    };
    let mut results = Vec::new();
    let mut total = nam_core::fabric::MetricsSnapshot::default();
    for &a in &config.join_algorithms {
        let cluster = Cluster::with_fabric(Fabric::with_model(config.latency_model()), config.nodes);
        let start = Instant::now();
        let out = join_with(a, &cluster, &r, &s, &cfg)?;
        let wall = start.elapsed().as_secs_f64();
        let storage_cycles = out.metrics.total_where(|n, _| cluster.is_storage(n)).server_cycles;
        total.rows.extend(out.metrics.rows.iter().cloned());
        report.algorithms.push(AlgorithmRun {
            name: a.name().to_string(),
            wall_seconds: wall,
            modeled_seconds: Some(cost_of(&config.cost, a, &r, &s, config.selectivity, config.transport)),
            result_rows: out.matches.len() as u64,
            shipped_bytes: out.shuffled_bytes,
            storage_cycles,
            metrics: out.metrics.clone(),
        });
        results.push((a, canonical(out.matches)));
    }
    report.metrics = total;
    let cards: Vec<usize> = results.iter().map(|(_, m)| m.len()).collect();
    let agree = results.windows(2).all(|w| w[0].1 == w[1].1);
    report.verdicts.push(Verdict::new("algorithms_agree", agree, format!("result cardinalities {cards:?}")));
    if config.r_tuples.max(config.s_tuples) <= config.oracle_threshold {
        let oracle = nested_loop_join(&r, &s);
        let wrong: Vec<&str> = results.iter().filter(|(_, m)| *m != oracle).map(|(a, _)| a.name()).collect();
        report.verdicts.push(Verdict::new(
            "nested_loop_oracle",
            wrong.is_empty(),
            if wrong.is_empty() { format!("{} matches", oracle.len()) } else { format!("mismatch: {}", wrong.join(",")) },
        ));
    }
    Ok(report)
}

/// Runs the selected aggregation operators and checks them against a
/// single-threaded hash aggregation.
pub fn run_olap_agg(config: &ExperimentConfig) -> Result<RunReport, BenchError> {
    config.validate()?;
    let parts = gen_agg_input(config);
    let cfg = AggConfig {
        transport: config.transport,
        table_capacity: config.table_capacity,
        workers_per_node: config.workers_per_node,
        seed: config.seed,
        ..AggConfig::default()
    };
    let mut report = RunReport {
        label: format!(
            "olap-agg {} rows={} distinct={} over {} ({} nodes)",
            config.agg_fn.name(),
            config.agg_rows,
            config.distinct_keys,
            config.transport,
            config.nodes
        ),
        ..RunReport::default()
    };
    let oracle = hash_aggregate(parts.iter().flatten(), config.agg_fn);
    let mut wrong = Vec::new();
    for &op in &config.agg_operators {
        let cluster = Cluster::with_fabric(Fabric::with_model(config.latency_model()), config.nodes);
        let start = Instant::now();
        let out = match op {
            AggOperator::Hierarchical => agg_hierarchical(&cluster, &parts, config.agg_fn, &cfg)?,
            AggOperator::Rdma => agg_rdma(&cluster, &parts, config.agg_fn, &cfg)?,
        };
        let wall = start.elapsed().as_secs_f64();
        report.metrics.rows.extend(out.metrics.rows.iter().cloned());
        report.algorithms.push(AlgorithmRun {
            name: op.name().to_string(),
            wall_seconds: wall,
            modeled_seconds: None,
            result_rows: out.groups.len() as u64,
            shipped_bytes: out.shipped_rows * 16,
            storage_cycles: out.metrics.total_where(|n, _| cluster.is_storage(n)).server_cycles,
            metrics: out.metrics.clone(),
        });
        if out.groups != oracle {
            wrong.push(op.name());
        }
    }
    report.verdicts.push(Verdict::new(
        "hash_aggregate_oracle",
        wrong.is_empty(),
        if wrong.is_empty() { format!("{} groups", oracle.len()) } else { format!("mismatch: {}", wrong.join(",")) },
    ));
    Ok(report)
}

/// Cost curves over the configured selectivity grid and the throughput
/// bounds, both as CSV.
pub fn run_costmodel(config: &ExperimentConfig) -> Result<(String, String), BenchError> {
    config.validate()?;
    let w = 8 + config.payload_width as u64;
    let rows = emit_cost_curves(
        &config.cost,
        RelationShape::new(config.r_tuples, w),
        RelationShape::new(config.s_tuples, w),
        &config.sel_grid,
    );
    Ok((curves_csv(&rows), bounds_csv(&bounds(&config.cost))))
}
