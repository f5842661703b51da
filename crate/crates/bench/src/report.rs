//! Run results and their CSV and text renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nam_core::fabric::MetricsSnapshot;
use nam_core::oltp::history::HistoryEntry;

/// Outcome of one correctness check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(check: &str, passed: bool, detail: impl Into<String>) -> Self {
        Verdict { check: check.to_string(), passed, detail: detail.into() }
    }
}

/// Modeled commit latencies of committed transactions, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LatencyStats {
    pub samples: u64,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_samples(mut xs: Vec<f64>) -> Self {
        if xs.is_empty() {
            return LatencyStats::default();
        }
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        // Nearest rank.
        let pct = |p: f64| xs[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        LatencyStats { samples: n as u64, mean: xs.iter().sum::<f64>() / n as f64, p50: pct(0.5), p99: pct(0.99), max: xs[n - 1] }
    }
}

/// One operator execution in an OLAP run.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmRun {
    pub name: String,
    pub wall_seconds: f64,
    /// Cost model estimate for the same input; absent where no model exists.
    pub modeled_seconds: Option<f64>,
    pub result_rows: u64,
    pub shipped_bytes: u64,
    /// Cycles charged to storage nodes as the passive side.
    pub storage_cycles: u64,
    pub metrics: MetricsSnapshot,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub label: String,
    pub attempted: u64,
    pub committed: u64,
    pub aborted: u64,
    pub abort_kinds: BTreeMap<String, u64>,
    pub latency: LatencyStats,
    /// Protocol counters summed over committed transactions.
    pub tally: BTreeMap<String, u64>,
    pub metrics: MetricsSnapshot,
    pub algorithms: Vec<AlgorithmRun>,
    pub verdicts: Vec<Verdict>,
    pub history: Vec<HistoryEntry>,
}

pub const REPORT_HEADER: &str = "kind,name,value";

impl RunReport {
    pub fn abort_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.aborted as f64 / self.attempted as f64
        }
    }

    /// True when every enabled check passed.
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn verdict(&self, check: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.check == check)
    }

    pub fn algorithm(&self, name: &str) -> Option<&AlgorithmRun> {
        self.algorithms.iter().find(|a| a.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        let mut row = |kind: &str, name: &str, value: String| writeln!(out, "{kind},{name},{value}").expect("string write");
        row("run", "label", self.label.clone());
        if self.attempted > 0 {
            row("txn", "attempted", self.attempted.to_string());
            row("txn", "committed", self.committed.to_string());
            row("txn", "aborted", self.aborted.to_string());
            row("txn", "abort_rate", format!("{:.6}", self.abort_rate()));
            for (k, n) in &self.abort_kinds {
                row("abort", k, n.to_string());
            }
            let l = &self.latency;
            row("latency", "mean_seconds", format!("{:e}", l.mean));
            row("latency", "p50_seconds", format!("{:e}", l.p50));
            row("latency", "p99_seconds", format!("{:e}", l.p99));
            row("latency", "max_seconds", format!("{:e}", l.max));
            for (k, n) in &self.tally {
                row("tally", k, n.to_string());
            }
        }
        for a in &self.algorithms {
            row("algorithm", &format!("{}.wall_seconds", a.name), format!("{:e}", a.wall_seconds));
            if let Some(m) = a.modeled_seconds {
                row("algorithm", &format!("{}.modeled_seconds", a.name), format!("{m:e}"));
            }
            row("algorithm", &format!("{}.result_rows", a.name), a.result_rows.to_string());
            row("algorithm", &format!("{}.shipped_bytes", a.name), a.shipped_bytes.to_string());
            row("algorithm", &format!("{}.storage_cycles", a.name), a.storage_cycles.to_string());
        }
        for v in &self.verdicts {
            row("verdict", &v.check, if v.passed { "pass".into() } else { "fail".into() });
        }
        out
    }

    /// Human-readable digest.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "== {} ==", self.label).expect("string write");
        if self.attempted > 0 {
            let l = &self.latency;
            writeln!(
                s,
                "txns: {} attempted, {} committed, {} aborted ({:.2}%)",
                self.attempted,
                self.committed,
                self.aborted,
                100.0 * self.abort_rate()
            )
            .expect("string write");
            writeln!(s, "commit latency: mean {:.2} us, p50 {:.2} us, p99 {:.2} us", l.mean * 1e6, l.p50 * 1e6, l.p99 * 1e6)
                .expect("string write");
            if self.committed > 0 {
                let per: Vec<String> =
                    self.tally.iter().map(|(k, n)| format!("{k}={:.2}", *n as f64 / self.committed as f64)).collect();
                writeln!(s, "per committed txn: {}", per.join(" ")).expect("string write");
            }
        }
        for a in &self.algorithms {
            let model = a.modeled_seconds.map_or(String::new(), |m| format!(", modeled {:.4} s", m));
            writeln!(
                s,
                "{:<14} {:>9.4} s wall{model}, {} rows, {} bytes shipped",
                a.name, a.wall_seconds, a.result_rows, a.shipped_bytes
            )
            .expect("string write");
        }
        for v in &self.verdicts {
            writeln!(s, "[{}] {}: {}", if v.passed { "ok" } else { "FAILED" }, v.check, v.detail).expect("string write");
        }
        s
    }
}
