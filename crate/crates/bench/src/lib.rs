//! Workload generators, experiment runners and reports for the nam-core
//! protocols and operators.

pub mod config;
pub mod report;
pub mod runner;
pub mod workload;

use thiserror::Error;

pub use config::{AggOperator, ExperimentConfig, Protocol};
pub use report::{AlgorithmRun, LatencyStats, RunReport, Verdict};
pub use runner::{run_costmodel, run_olap_agg, run_olap_join, run_oltp};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Oltp(#[from] nam_core::oltp::OltpError),
    #[error(transparent)]
    Olap(#[from] nam_core::olap::OlapError),
    #[error(transparent)]
    Store(#[from] nam_core::store::StoreError),
    #[error(transparent)]
    Oracle(#[from] nam_core::oracle::OracleError),
}
