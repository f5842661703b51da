//! Experiment configuration: `key = value` files plus overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nam_core::costmodel::{CostParams, JoinAlgorithm};
use nam_core::fabric::{LatencyModel, Transport};
use nam_core::olap::agg::AggFn;

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Rsi,
    Trad,
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rsi" => Ok(Protocol::Rsi),
            "trad" | "2pc" => Ok(Protocol::Trad),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Rsi => "rsi",
            Protocol::Trad => "trad",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggOperator {
    Hierarchical,
    Rdma,
}

impl AggOperator {
    pub const ALL: [AggOperator; 2] = [AggOperator::Hierarchical, AggOperator::Rdma];

    pub fn name(self) -> &'static str {
        match self {
            AggOperator::Hierarchical => "hierarchical",
            AggOperator::Rdma => "rdma",
        }
    }
}

pub fn parse_join_algorithm(s: &str) -> Result<JoinAlgorithm, String> {
    JoinAlgorithm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown join algorithm `{s}`"))
}

fn parse_agg_operator(s: &str) -> Result<AggOperator, String> {
    AggOperator::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown aggregation operator `{s}`"))
}

/// Everything a run needs. The seed fully determines generated data.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub protocol: Protocol,
    pub transport: Transport,
    /// Storage nodes for OLTP, compute/storage node pairs for OLAP.
    pub nodes: usize,
    pub clients: u32,
    pub txns_per_client: u64,
    pub products: u64,
    pub product_bytes: usize,
    /// Versions kept per record block.
    pub slots: usize,
    pub read_retries: u32,
    pub r_tuples: u64,
    pub s_tuples: u64,
    /// Fraction of S tuples that find a partner in R.
    pub selectivity: f64,
    pub payload_width: usize,
    pub join_algorithms: Vec<JoinAlgorithm>,
    pub agg_operators: Vec<AggOperator>,
    pub agg_fn: AggFn,
    pub agg_rows: u64,
    pub distinct_keys: u64,
    pub workers_per_node: usize,
    pub table_capacity: usize,
    /// Brute-force checks run only on inputs up to this size.
    pub oracle_threshold: u64,
    /// Selectivities for the cost curves.
    pub sel_grid: Vec<f64>,
    pub cost: CostParams,
    /// (transport, flat latency in seconds, bytes per second).
    pub latency_overrides: Vec<(Transport, f64, f64)>,
    pub cpu_hz: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            protocol: Protocol::Rsi,
            transport: Transport::Rdma,
            nodes: 3,
            clients: 4,
            txns_per_client: 1000,
            products: 10_000,
            product_bytes: 1024,
            slots: 1,
            read_retries: 10,
            r_tuples: 100_000,
            s_tuples: 100_000,
            selectivity: 1.0,
            payload_width: 8,
            join_algorithms: JoinAlgorithm::ALL.to_vec(),
            agg_operators: AggOperator::ALL.to_vec(),
            agg_fn: AggFn::Sum,
            agg_rows: 100_000,
            distinct_keys: 4096,
            workers_per_node: 2,
            table_capacity: 4096,
            oracle_threshold: 100_000,
            sel_grid: vec![0.25, 0.5, 0.75, 1.0],
            cost: CostParams::default(),
            latency_overrides: Vec::new(),
            cpu_hz: None,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, BenchError> {
    value.parse().map_err(|_| BenchError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn list<T>(value: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

impl ExperimentConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), BenchError> {
        let value = value.trim();
        let cfg = |e: String| BenchError::Config(format!("`{key}`: {e}"));
        match key.trim() {
            "seed" => self.seed = num(key, value)?,
            "protocol" => self.protocol = value.parse().map_err(cfg)?,
            "transport" => self.transport = value.parse().map_err(cfg)?,
            "nodes" => self.nodes = num(key, value)?,
            "clients" => self.clients = num(key, value)?,
            "txns_per_client" | "txns" => self.txns_per_client = num(key, value)?,
            "products" => self.products = num(key, value)?,
            "product_bytes" => self.product_bytes = num(key, value)?,
            "slots" => self.slots = num(key, value)?,
            "read_retries" => self.read_retries = num(key, value)?,
            "r_tuples" => self.r_tuples = num(key, value)?,
            "s_tuples" => self.s_tuples = num(key, value)?,
            "tuples" => {
                self.r_tuples = num(key, value)?;
                self.s_tuples = self.r_tuples;
            }
            "selectivity" => self.selectivity = num(key, value)?,
            "payload_width" => self.payload_width = num(key, value)?,
            "join_algorithms" => {
                self.join_algorithms =
                    if value == "all" { JoinAlgorithm::ALL.to_vec() } else { list(value, parse_join_algorithm).map_err(cfg)? }
            }
            "agg_operators" => {
                self.agg_operators =
                    if value == "all" { AggOperator::ALL.to_vec() } else { list(value, parse_agg_operator).map_err(cfg)? }
            }
            "agg_fn" => self.agg_fn = value.parse().map_err(cfg)?,
            "agg_rows" => self.agg_rows = num(key, value)?,
            "distinct_keys" => self.distinct_keys = num(key, value)?,
            "workers_per_node" => self.workers_per_node = num(key, value)?,
            "table_capacity" => self.table_capacity = num(key, value)?,
            "oracle_threshold" => self.oracle_threshold = num(key, value)?,
            "sel_grid" => self.sel_grid = list(value, |s| s.parse().map_err(|_| format!("bad number `{s}`"))).map_err(cfg)?,
            "c_mem" => self.cost.c_mem = num(key, value)?,
            "c_net_rdma" => self.cost.c_net_rdma = num(key, value)?,
            "c_net_ipoib" => self.cost.c_net_ipoib = num(key, value)?,
            "c_net_ipoeth" => self.cost.c_net_ipoeth = num(key, value)?,
            "cycles_m" => self.cost.cycles_m = num(key, value)?,
            "cycles_c" => self.cost.cycles_c = num(key, value)?,
            "cores" => self.cost.cores = num(key, value)?,
            "epsilon" => self.cost.epsilon = num(key, value)?,
            "cpu_hz" => self.cpu_hz = Some(num(key, value)?),
            k if k.starts_with("latency.") => {
                let t: Transport = k["latency.".len()..].parse().map_err(cfg)?;
                let (flat, bw) = value
                    .split_once(',')
                    .ok_or_else(|| cfg("expected `<flat seconds>,<bytes per second>`".into()))?;
                let entry = (t, num(key, flat.trim())?, num(key, bw.trim())?);
                self.latency_overrides.retain(|o| o.0 != t);
                self.latency_overrides.push(entry);
            }
            other => return Err(BenchError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), BenchError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BenchError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, BenchError> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let positive = [
            ("nodes", self.nodes as u64),
            ("clients", self.clients as u64),
            ("txns_per_client", self.txns_per_client),
            ("slots", self.slots as u64),
            ("r_tuples", self.r_tuples),
            ("s_tuples", self.s_tuples),
            ("agg_rows", self.agg_rows),
            ("distinct_keys", self.distinct_keys),
            ("workers_per_node", self.workers_per_node as u64),
            ("table_capacity", self.table_capacity as u64),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(BenchError::Config(format!("`{k}` must be positive")));
        }
        if self.product_bytes < 8 {
            return Err(BenchError::Config("`product_bytes` must be at least 8".into()));
        }
        if self.products < 3 {
            return Err(BenchError::Config("`products` must be at least 3".into()));
        }
        if !(0.0..=1.0).contains(&self.selectivity) {
            return Err(BenchError::Config("`selectivity` must lie in [0, 1]".into()));
        }
        if self.sel_grid.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(BenchError::Config("`sel_grid` values must lie in [0, 1]".into()));
        }
        if self.join_algorithms.is_empty() || self.agg_operators.is_empty() {
            return Err(BenchError::Config("nothing to run".into()));
        }
        for &(t, flat, bw) in &self.latency_overrides {
            if !(flat > 0.0 && bw > 0.0) {
                return Err(BenchError::Config(format!("latency.{t}: values must be positive")));
            }
        }
        self.cost.validate().map_err(|e| BenchError::Config(e.to_string()))
    }

    /// The default model with this config's overrides applied.
    pub fn latency_model(&self) -> LatencyModel {
        let mut m = LatencyModel::default();
        for &(t, flat, bw) in &self.latency_overrides {
            m.override_shape(t, flat, bw);
        }
        if let Some(hz) = self.cpu_hz {
            m.cpu_hz = hz;
        }
        m
    }
}
