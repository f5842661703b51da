//! Line-per-transaction history log.
//!
//! ```text
//! txn=<id> client=<c> rid=<rid> cid=<cid|-> outcome=<committed|aborted:<kind>> reads=<t:k@cid,...|-> writes=<t:k,...|-> inserts=<t:k,...|->
//! ```

use std::fmt::Write as _;

use thiserror::Error;

use crate::store::TableId;

use super::{Outcome, TxnDescriptor, TxnId};

/// The part of a transaction the checkers look at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub id: TxnId,
    pub client: u32,
    pub rid: u64,
    pub cid: Option<u64>,
    pub committed: bool,
    /// Abort kind, if aborted.
    pub reason: Option<String>,
    pub reads: Vec<(TableId, u64, u64)>,
    pub writes: Vec<(TableId, u64)>,
    pub inserts: Vec<(TableId, u64)>,
}

impl From<&TxnDescriptor> for HistoryEntry {
    fn from(t: &TxnDescriptor) -> Self {
        let (committed, reason) = match &t.outcome {
            Outcome::Committed => (true, None),
            Outcome::Aborted(r) => (false, Some(r.kind().to_string())),
            Outcome::Active => (false, Some("active".to_string())),
        };
        HistoryEntry {
            id: t.id,
            client: t.client,
            rid: t.rid,
            cid: t.cid,
            committed,
            reason,
            reads: t.reads.iter().map(|r| (r.table, r.key, r.cid)).collect(),
            writes: t.writes.iter().map(|w| (w.table, w.key)).collect(),
            inserts: t.inserts.iter().map(|w| (w.table, w.key)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("history line {line}: {msg}")]
pub struct HistoryParseError {
    pub line: usize,
    pub msg: String,
}

fn join_keys(items: &[(TableId, u64)]) -> String {
    if items.is_empty() {
        return "-".into();
    }
    items.iter().map(|(t, k)| format!("{}:{k}", t.0)).collect::<Vec<_>>().join(",")
}

impl HistoryEntry {
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        let cid = self.cid.map_or("-".to_string(), |c| c.to_string());
        let outcome = match (&self.committed, &self.reason) {
            (true, _) => "committed".to_string(),
            (false, Some(r)) => format!("aborted:{r}"),
            (false, None) => "aborted".to_string(),
        };
        let reads = if self.reads.is_empty() {
            "-".to_string()
        } else {
            self.reads.iter().map(|(t, k, c)| format!("{}:{k}@{c}", t.0)).collect::<Vec<_>>().join(",")
        };
        write!(
            s,
            "txn={} client={} rid={} cid={cid} outcome={outcome} reads={reads} writes={} inserts={}",
            self.id,
            self.client,
            self.rid,
            join_keys(&self.writes),
            join_keys(&self.inserts)
        )
        .expect("string write");
        s
    }

    pub fn parse(line: &str, lineno: usize) -> Result<Self, HistoryParseError> {
        let err = |msg: String| HistoryParseError { line: lineno, msg };
        let mut e = HistoryEntry {
            id: 0,
            client: 0,
            rid: 0,
            cid: None,
            committed: false,
            reason: None,
            reads: Vec::new(),
            writes: Vec::new(),
            inserts: Vec::new(),
        };
        let num = |v: &str| v.parse::<u64>().map_err(|_| err(format!("bad number {v:?}")));
        let key = |v: &str| -> Result<(TableId, u64), HistoryParseError> {
            let (t, k) = v.split_once(':').ok_or_else(|| err(format!("bad key {v:?}")))?;
            Ok((TableId(num(t)? as u32), num(k)?))
        };
        let mut seen = 0;
        for field in line.split_whitespace() {
            let (name, value) = field.split_once('=').ok_or_else(|| err(format!("bad field {field:?}")))?;
            let list = value.split(',').filter(|_| value != "-");
            match name {
                "txn" => e.id = num(value)?,
                "client" => e.client = num(value)? as u32,
                "rid" => e.rid = num(value)?,
                "cid" => e.cid = if value == "-" { None } else { Some(num(value)?) },
                "outcome" => match value.split_once(':') {
                    _ if value == "committed" => e.committed = true,
                    Some(("aborted", r)) => e.reason = Some(r.to_string()),
                    None if value == "aborted" => {}
                    _ => return Err(err(format!("bad outcome {value:?}"))),
                },
                "reads" => {
                    for r in list {
                        let (k, c) = r.split_once('@').ok_or_else(|| err(format!("bad read {r:?}")))?;
                        let (t, k) = key(k)?;
                        e.reads.push((t, k, num(c)?));
                    }
                }
                "writes" => e.writes = list.map(key).collect::<Result<_, _>>()?,
                "inserts" => e.inserts = list.map(key).collect::<Result<_, _>>()?,
                _ => return Err(err(format!("unknown field {name:?}"))),
            }
            seen += 1;
        }
        if seen != 8 {
            return Err(err(format!("expected 8 fields, got {seen}")));
        }
        Ok(e)
    }
}

pub fn format_log(entries: &[HistoryEntry]) -> String {
    entries.iter().map(|e| e.to_line() + "\n").collect()
}

pub fn parse_log(text: &str) -> Result<Vec<HistoryEntry>, HistoryParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| HistoryEntry::parse(l, i + 1))
        .collect()
}
