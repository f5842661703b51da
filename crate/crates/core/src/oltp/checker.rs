//! Snapshot isolation checks over recorded histories.
//!
//! [`check_history`] uses the recorded timestamps and scales to long runs.
//! [`brute_force_si`] ignores timestamps entirely and searches for any
//! ordering of begin and commit events that explains what every
//! transaction read; it is exponential and meant for a handful of
//! transactions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use crate::store::TableId;

use super::history::HistoryEntry;
use super::{TxnId, GENESIS_CID};

type Key = (TableId, u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Two concurrent committed transactions updated the same record.
    ConcurrentWriters { a: TxnId, b: TxnId, table: TableId, key: u64 },
    /// A read returned a version no committed transaction produced.
    UnknownVersion { txn: TxnId, table: TableId, key: u64, cid: u64 },
    /// A read returned a version written by an aborted transaction.
    AbortedVisible { txn: TxnId, writer: TxnId, table: TableId, key: u64 },
    /// A read returned a version newer than the snapshot.
    FutureRead { txn: TxnId, table: TableId, key: u64, cid: u64, rid: u64 },
    /// A read skipped a committed version inside the snapshot.
    StaleRead { txn: TxnId, table: TableId, key: u64, observed: u64, missed: u64 },
    /// A commit timestamp not above the read timestamp.
    CidBelowRid { txn: TxnId },
    DuplicateCid { a: TxnId, b: TxnId, cid: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

fn concurrent(a: &HistoryEntry, b: &HistoryEntry) -> bool {
    let (ca, cb) = (a.cid.unwrap_or(0), b.cid.unwrap_or(0));
    a.rid < cb && b.rid < ca
}

/// Every violation found; empty means the history is snapshot isolated.
pub fn check_history(entries: &[HistoryEntry]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut by_cid: HashMap<u64, &HistoryEntry> = HashMap::new();
    for e in entries {
        if let Some(c) = e.cid {
            if c <= e.rid {
                out.push(Violation::CidBelowRid { txn: e.id });
            }
            if let Some(prev) = by_cid.insert(c, e) {
                out.push(Violation::DuplicateCid { a: prev.id, b: e.id, cid: c });
            }
        }
    }
    // Committed writers of every key, ordered by cid.
    let mut writers: HashMap<Key, BTreeMap<u64, &HistoryEntry>> = HashMap::new();
    for e in entries.iter().filter(|e| e.committed) {
        if let Some(c) = e.cid {
            for k in e.writes.iter().chain(&e.inserts) {
                writers.entry(*k).or_default().insert(c, e);
            }
        }
    }
    for (&(table, key), ws) in &writers {
        let ws: Vec<&HistoryEntry> = ws.values().copied().collect();
        for (i, a) in ws.iter().enumerate() {
            for b in &ws[i + 1..] {
                if concurrent(a, b) && a.writes.contains(&(table, key)) && b.writes.contains(&(table, key)) {
                    out.push(Violation::ConcurrentWriters { a: a.id, b: b.id, table, key });
                }
            }
        }
    }
    for e in entries {
        for &(table, key, cid) in &e.reads {
            if cid > e.rid {
                out.push(Violation::FutureRead { txn: e.id, table, key, cid, rid: e.rid });
                continue;
            }
            let ws = writers.get(&(table, key));
            if cid != GENESIS_CID && !ws.is_some_and(|w| w.contains_key(&cid)) {
                match by_cid.get(&cid) {
                    Some(w) if !w.committed => {
                        out.push(Violation::AbortedVisible { txn: e.id, writer: w.id, table, key })
                    }
                    _ => out.push(Violation::UnknownVersion { txn: e.id, table, key, cid }),
                }
                continue;
            }
            if let Some((&missed, _)) = ws.filter(|_| cid < e.rid).and_then(|w| w.range(cid + 1..=e.rid).next()) {
                out.push(Violation::StaleRead { txn: e.id, table, key, observed: cid, missed });
            }
        }
    }
    out
}

/// Whether some sequence of begin and commit events explains the history
/// under snapshot isolation: each transaction reads the latest version
/// committed before its begin, and no two committed transactions with
/// overlapping updates overlap in time. Timestamps are only used to tell
/// which version a read returned.
pub fn brute_force_si(entries: &[HistoryEntry]) -> bool {
    assert!(entries.len() <= 16, "brute force is exponential");
    let n = entries.len();
    // Version identity: (key, cid) -> committed writer index.
    let mut producer: HashMap<(Key, u64), usize> = HashMap::new();
    for (i, e) in entries.iter().enumerate().filter(|(_, e)| e.committed) {
        if let Some(c) = e.cid {
            for k in e.writes.iter().chain(&e.inserts) {
                producer.insert((*k, c), i);
            }
        }
    }
    let mut reads: Vec<Vec<(Key, Option<usize>)>> = Vec::with_capacity(n);
    for e in entries {
        let mut rs = Vec::new();
        for &(t, k, c) in &e.reads {
            let w = if c == GENESIS_CID {
                None
            } else {
                match producer.get(&((t, k), c)) {
                    Some(&w) => Some(w),
                    None => return false,
                }
            };
            rs.push(((t, k), w));
        }
        reads.push(rs);
    }
    let writes: Vec<HashSet<Key>> =
        entries.iter().map(|e| e.writes.iter().chain(&e.inserts).copied().collect()).collect();
    let committed: Vec<bool> = entries.iter().map(|e| e.committed).collect();
    let mut search = Search { n, reads, writes, committed, failed: HashSet::new() };
    search.dfs(&mut State { begun: 0, done: 0, order: Vec::new(), snapshot: vec![0; n] })
}

#[derive(Clone)]
struct State {
    begun: u32,
    /// Committed (or, for aborted transactions, finished) set.
    done: u32,
    order: Vec<usize>,
    /// Committed set at each transaction's begin.
    snapshot: Vec<u32>,
}

struct Search {
    n: usize,
    reads: Vec<Vec<(Key, Option<usize>)>>,
    writes: Vec<HashSet<Key>>,
    committed: Vec<bool>,
    failed: HashSet<(u32, u32, Vec<Option<usize>>, Vec<u32>)>,
}

impl Search {
    fn last_writer(&self, order: &[usize], key: &Key) -> Option<usize> {
        order.iter().rev().copied().find(|&j| self.writes[j].contains(key))
    }

    fn memo_key(&self, s: &State) -> (u32, u32, Vec<Option<usize>>, Vec<u32>) {
        let mut keys: Vec<&Key> = self.reads.iter().flatten().map(|(k, _)| k).collect();
        keys.sort();
        keys.dedup();
        let last = keys.iter().map(|k| self.last_writer(&s.order, k)).collect();
        let open = (0..self.n)
            .filter(|&i| s.begun & (1 << i) != 0 && s.done & (1 << i) == 0)
            .map(|i| s.snapshot[i])
            .collect();
        (s.begun, s.done, last, open)
    }

    fn dfs(&mut self, s: &mut State) -> bool {
        let all = (1u32 << self.n) - 1;
        if s.done == all {
            return true;
        }
        let key = self.memo_key(s);
        if self.failed.contains(&key) {
            return false;
        }
        for i in 0..self.n {
            let bit = 1 << i;
            if s.begun & bit == 0 {
                // Begin: every read must see the latest committed writer.
                let ok = self.reads[i].iter().all(|(k, w)| self.last_writer(&s.order, k) == *w);
                if !ok {
                    continue;
                }
                let committed_now = s.order.iter().fold(0u32, |m, &j| m | (1 << j));
                let saved = s.snapshot[i];
                s.snapshot[i] = committed_now;
                s.begun |= bit;
                if !self.committed[i] {
                    // Aborted transactions only need a consistent snapshot.
                    s.done |= bit;
                }
                if self.dfs(s) {
                    return true;
                }
                s.begun &= !bit;
                s.done &= !bit;
                s.snapshot[i] = saved;
            } else if s.done & bit == 0 {
                // Commit: no transaction that committed since our begin may
                // have written what we write.
                let since = s.order.iter().copied().filter(|&j| s.snapshot[i] & (1 << j) == 0);
                let conflict = since.into_iter().any(|j| !self.writes[i].is_disjoint(&self.writes[j]));
                if conflict {
                    continue;
                }
                s.done |= bit;
                s.order.push(i);
                if self.dfs(s) {
                    return true;
                }
                s.order.pop();
                s.done &= !bit;
            }
        }
        self.failed.insert(key);
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: TableId = TableId(0);

    fn entry(id: u64, rid: u64, cid: Option<u64>, committed: bool, reads: &[(u64, u64)], writes: &[u64]) -> HistoryEntry {
        HistoryEntry {
            id,
            client: 1,
            rid,
            cid,
            committed,
            reason: (!committed).then(|| "validation".into()),
            reads: reads.iter().map(|&(k, c)| (T, k, c)).collect(),
            writes: writes.iter().map(|&k| (T, k)).collect(),
            inserts: vec![],
        }
    }

    #[test]
    fn serial_history_passes() {
        let h = vec![
            entry(1, 0, Some(1), true, &[(0, 0)], &[0]),
            entry(2, 1, Some(2), true, &[(0, 1), (1, 0)], &[0, 1]),
            entry(3, 2, None, true, &[(0, 2), (1, 2)], &[]),
        ];
        assert!(check_history(&h).is_empty());
        assert!(brute_force_si(&h));
    }

    #[test]
    fn lost_update_rejected() {
        let h = vec![entry(1, 0, Some(1), true, &[(0, 0)], &[0]), entry(2, 0, Some(2), true, &[(0, 0)], &[0])];
        assert!(matches!(check_history(&h)[..], [Violation::ConcurrentWriters { .. }]));
        assert!(!brute_force_si(&h));
        let mut ok = h.clone();
        ok[1].committed = false;
        assert!(check_history(&ok).is_empty());
        assert!(brute_force_si(&ok));
    }

    #[test]
    fn write_skew_is_allowed() {
        let h = vec![
            entry(1, 0, Some(1), true, &[(0, 0), (1, 0)], &[0]),
            entry(2, 0, Some(2), true, &[(0, 0), (1, 0)], &[1]),
        ];
        assert!(check_history(&h).is_empty());
        assert!(brute_force_si(&h));
    }

    #[test]
    fn fractured_read_rejected() {
        let h = vec![
            entry(1, 0, Some(1), true, &[(0, 0), (1, 0)], &[0, 1]),
            entry(2, 1, None, true, &[(0, 1), (1, 0)], &[]),
        ];
        assert!(matches!(check_history(&h)[..], [Violation::StaleRead { .. }]));
        assert!(!brute_force_si(&h));
    }

    #[test]
    fn aborted_version_visible_rejected() {
        let h = vec![entry(1, 0, Some(1), false, &[(0, 0)], &[0]), entry(2, 1, None, true, &[(0, 1)], &[])];
        assert!(matches!(check_history(&h)[..], [Violation::AbortedVisible { .. }]));
        assert!(!brute_force_si(&h));
    }

    #[test]
    fn future_read_and_bad_cid() {
        let h = vec![entry(1, 0, Some(1), true, &[(0, 0)], &[0]), entry(2, 0, Some(0), true, &[(0, 1)], &[])];
        let v = check_history(&h);
        assert!(v.iter().any(|x| matches!(x, Violation::FutureRead { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::CidBelowRid { .. })));
    }
}
