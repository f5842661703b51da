//! Linearizability check for histories on a single 64-bit word.

use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WordOp {
    Read,
    Write(u64),
    Cas { expected: u64, swap: u64 },
    FetchAdd(u64),
}

impl WordOp {
    /// Returns (new value, value the operation reports).
    fn apply(self, cur: u64) -> (u64, Option<u64>) {
        match self {
            WordOp::Read => (cur, Some(cur)),
            WordOp::Write(v) => (v, None),
            WordOp::Cas { expected, swap } => (if cur == expected { swap } else { cur }, Some(cur)),
            WordOp::FetchAdd(d) => (cur.wrapping_add(d), Some(cur)),
        }
    }
}

/// One completed operation. `invoked` and `returned` are logical timestamps
/// from a shared counter; an operation that returned before another was
/// invoked must be ordered before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordEvent {
    pub op: WordOp,
    /// Observed result; ignored for writes.
    pub result: u64,
    pub invoked: u64,
    pub returned: u64,
}

/// Whether some total order consistent with real time explains every result.
pub fn is_linearizable(initial: u64, history: &[WordEvent]) -> bool {
    linearization(initial, history).is_some()
}

/// A witness order (indices into `history`), if one exists. Histories of at
/// most 64 events.
pub fn linearization(initial: u64, history: &[WordEvent]) -> Option<Vec<usize>> {
    assert!(history.len() <= 64, "history too long");
    let full: u64 = if history.len() == 64 { u64::MAX } else { (1u64 << history.len()) - 1 };
    let mut seen = HashSet::new();
    let mut order = Vec::with_capacity(history.len());
    search(history, full, initial, &mut seen, &mut order).then_some(order)
}

fn search(h: &[WordEvent], remaining: u64, value: u64, seen: &mut HashSet<(u64, u64)>, order: &mut Vec<usize>) -> bool {
    if remaining == 0 {
        return true;
    }
    if !seen.insert((remaining, value)) {
        return false;
    }
    // Only minimal events may go next: nothing remaining returned before them.
    let min_return = (0..h.len())
        .filter(|i| remaining & (1 << i) != 0)
        .map(|i| h[i].returned)
        .min()
        .unwrap_or(u64::MAX);
    for i in 0..h.len() {
        if remaining & (1 << i) == 0 || h[i].invoked > min_return {
            continue;
        }
        let (next, reported) = h[i].op.apply(value);
        if reported.is_some_and(|r| r != h[i].result) {
            continue;
        }
        order.push(i);
        if search(h, remaining & !(1 << i), next, seen, order) {
            return true;
        }
        order.pop();
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(op: WordOp, result: u64, invoked: u64, returned: u64) -> WordEvent {
        WordEvent { op, result, invoked, returned }
    }

    #[test]
    fn sequential_history() {
        let h = [ev(WordOp::FetchAdd(1), 0, 0, 1), ev(WordOp::FetchAdd(1), 1, 2, 3), ev(WordOp::Read, 2, 4, 5)];
        assert_eq!(linearization(0, &h), Some(vec![0, 1, 2]));
    }

    #[test]
    fn concurrent_reorder_allowed() {
        let h = [ev(WordOp::FetchAdd(1), 1, 0, 3), ev(WordOp::FetchAdd(1), 0, 1, 2)];
        assert_eq!(linearization(0, &h), Some(vec![1, 0]));
    }

    #[test]
    fn real_time_violation_rejected() {
        let h = [ev(WordOp::FetchAdd(1), 1, 0, 1), ev(WordOp::FetchAdd(1), 0, 2, 3)];
        assert!(!is_linearizable(0, &h));
    }

    #[test]
    fn duplicate_cas_winners_rejected() {
        let cas = WordOp::Cas { expected: 0, swap: 7 };
        let h = [ev(cas, 0, 0, 5), ev(cas, 0, 1, 6)];
        assert!(!is_linearizable(0, &h));
    }
}
