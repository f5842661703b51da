use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use nam_bench::{run_costmodel, run_olap_agg, run_olap_join, run_oltp, ExperimentConfig, RunReport};

#[derive(Parser)]
#[command(name = "nam-bench", version, about = "Run NAM database experiments on the simulated fabric")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Checkout transactions under rsi or trad.
    Oltp(Common),
    /// Distributed joins against the nested-loop oracle.
    OlapJoin(Common),
    /// Distributed aggregation against a hash aggregation.
    OlapAgg(Common),
    /// Cost curves and throughput bounds.
    Costmodel {
        #[command(flatten)]
        common: Common,
        /// Where to write the bounds CSV; printed after the curves otherwise.
        #[arg(long)]
        bounds_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` config file, applied before any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report (or curves) CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fabric counters of the run as CSV.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Keep the transaction history log here.
    #[arg(long)]
    history_out: Option<PathBuf>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    transport: Option<String>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    clients: Option<u32>,
    #[arg(long)]
    txns: Option<u64>,
    #[arg(long)]
    products: Option<u64>,
    #[arg(long)]
    product_bytes: Option<usize>,
    #[arg(long)]
    r_tuples: Option<u64>,
    #[arg(long)]
    s_tuples: Option<u64>,
    #[arg(long)]
    selectivity: Option<f64>,
    #[arg(long)]
    payload_width: Option<usize>,
    /// Comma-separated, or `all`.
    #[arg(long)]
    algorithms: Option<String>,
    /// Comma-separated, or `all`.
    #[arg(long)]
    operators: Option<String>,
    #[arg(long)]
    agg_fn: Option<String>,
    #[arg(long)]
    agg_rows: Option<u64>,
    #[arg(long)]
    distinct_keys: Option<u64>,
    #[arg(long)]
    oracle_threshold: Option<u64>,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        if let Some(p) = &self.config {
            c.apply_file(p)?;
        }
        let flags: [(&str, Option<String>); 18] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("protocol", self.protocol.clone()),
            ("transport", self.transport.clone()),
            ("nodes", self.nodes.map(|v| v.to_string())),
            ("clients", self.clients.map(|v| v.to_string())),
            ("txns_per_client", self.txns.map(|v| v.to_string())),
            ("products", self.products.map(|v| v.to_string())),
            ("product_bytes", self.product_bytes.map(|v| v.to_string())),
            ("r_tuples", self.r_tuples.map(|v| v.to_string())),
            ("s_tuples", self.s_tuples.map(|v| v.to_string())),
            ("selectivity", self.selectivity.map(|v| v.to_string())),
            ("payload_width", self.payload_width.map(|v| v.to_string())),
            ("join_algorithms", self.algorithms.clone()),
            ("agg_operators", self.operators.clone()),
            ("agg_fn", self.agg_fn.clone()),
            ("agg_rows", self.agg_rows.map(|v| v.to_string())),
            ("distinct_keys", self.distinct_keys.map(|v| v.to_string())),
            ("oracle_threshold", self.oracle_threshold.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn emit(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn finish(common: &Common, report: &RunReport) -> Result<ExitCode> {
    emit(common.out.as_ref(), &report.to_csv())?;
    if let Some(p) = &common.metrics_out {
        fs::write(p, report.metrics.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &common.history_out {
        fs::write(p, nam_core::oltp::history::format_log(&report.history))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    eprint!("{}", report.summary());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Oltp(c) => finish(c, &run_oltp(&c.config()?)?),
        Command::OlapJoin(c) => finish(c, &run_olap_join(&c.config()?)?),
        Command::OlapAgg(c) => finish(c, &run_olap_agg(&c.config()?)?),
        Command::Costmodel { common, bounds_out } => {
            let (curves, bounds) = run_costmodel(&common.config()?)?;
            emit(common.out.as_ref(), &curves)?;
            match bounds_out {
                Some(p) => fs::write(p, &bounds).with_context(|| format!("writing {}", p.display()))?,
                None if common.out.is_none() => print!("\n{bounds}"),
                None => print!("{bounds}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
