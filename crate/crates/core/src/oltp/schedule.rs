//! Verb-granular scheduling of scripted RSI transactions, for exhaustive and
//! randomized interleaving tests.

use rand::Rng;

use crate::fabric::Fabric;
use crate::oracle::TimestampVector;
use crate::store::{Store, TableId, TableSpec};

use super::rsi::{ReadAttempt, RsiClient, RsiCommit, RsiConfig, RsiTxn};
use super::{AbortReason, OltpError, TxnDescriptor};

/// Keys a transaction reads, then the subset it updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnScript {
    pub reads: Vec<u64>,
    pub writes: Vec<u64>,
}

impl TxnScript {
    pub fn new(reads: &[u64], writes: &[u64]) -> Self {
        assert!(writes.iter().all(|w| reads.contains(w)), "no blind writes");
        TxnScript { reads: reads.to_vec(), writes: writes.to_vec() }
    }
}

pub const TABLE: TableId = TableId(0);
const WIDTH: usize = 8;

enum State {
    Begin,
    Read { txn: RsiTxn, next: usize, retries: u32 },
    Commit(Box<RsiCommit>),
    Done(Box<TxnDescriptor>),
}

/// A cluster with one client per script, stepped one verb at a time.
pub struct Simulation {
    scripts: Vec<TxnScript>,
    clients: Vec<RsiClient>,
    states: Vec<State>,
    retries: u32,
    store: Store,
}

impl Simulation {
    pub fn new(scripts: &[TxnScript], keys: u64) -> Result<Self, OltpError> {
        let fabric = Fabric::new();
        let store = Store::new(&fabric, &[0, 1], &[TableSpec::new("kv", WIDTH, keys.div_ceil(2).max(1))])?;
        let mut loader = fabric.open_session(9_999);
        store.bulk_load(&mut loader, TABLE, &vec![vec![0; WIDTH]; keys as usize])?;
        let n = scripts.len() as u32;
        let vector = TimestampVector::with_bits(&fabric, 0, n, 64 * n as u64)?;
        let config = RsiConfig::default();
        let clients = (1..=n)
            .map(|c| RsiClient::new(&store, &vector, c, 100 + c, config))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Simulation {
            scripts: scripts.to_vec(),
            clients,
            states: scripts.iter().map(|_| State::Begin).collect(),
            retries: config.read_retries,
            store,
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Transactions that still have steps left.
    pub fn runnable(&self) -> Vec<usize> {
        (0..self.states.len()).filter(|&i| !matches!(self.states[i], State::Done(_))).collect()
    }

    /// Runs one step (at most one verb, plus local work) of transaction `i`.
    pub fn step(&mut self, i: usize) -> Result<(), OltpError> {
        let client = &mut self.clients[i];
        let state = std::mem::replace(&mut self.states[i], State::Begin);
        self.states[i] = match state {
            State::Begin => State::Read { txn: client.begin()?, next: 0, retries: 0 },
            State::Read { mut txn, next, retries } => {
                let key = self.scripts[i].reads[next];
                match client.try_read(&mut txn, TABLE, key)? {
                    ReadAttempt::Value(_) if next + 1 < self.scripts[i].reads.len() => {
                        State::Read { txn, next: next + 1, retries: 0 }
                    }
                    ReadAttempt::Value(_) => {
                        let stamp = txn.descriptor().id.to_le_bytes().to_vec();
                        for &k in &self.scripts[i].writes {
                            txn.write(TABLE, k, stamp.clone())?;
                        }
                        let c = client.start_commit(txn)?;
                        if c.is_done() {
                            State::Done(Box::new(c.finish(client).txn))
                        } else {
                            State::Commit(Box::new(c))
                        }
                    }
                    ReadAttempt::Locked if retries < self.retries => State::Read { txn, next, retries: retries + 1 },
                    ReadAttempt::Locked => {
                        let r = AbortReason::LockContention { table: TABLE, key };
                        State::Done(Box::new(client.abort(txn, r)?))
                    }
                    ReadAttempt::Abort(r) => State::Done(Box::new(client.abort(txn, r)?)),
                }
            }
            State::Commit(mut c) => {
                if c.step(client)? {
                    State::Done(Box::new(c.finish(client).txn))
                } else {
                    State::Commit(c)
                }
            }
            done @ State::Done(_) => done,
        };
        Ok(())
    }

    /// Descriptors of all transactions, once every one has finished.
    pub fn history(&self) -> Option<Vec<TxnDescriptor>> {
        self.states
            .iter()
            .map(|s| match s {
                State::Done(d) => Some((**d).clone()),
                _ => None,
            })
            .collect()
    }

    /// Whether transaction `i` has finished its reads.
    pub fn past_reads(&self, i: usize) -> bool {
        matches!(self.states[i], State::Commit(_) | State::Done(_))
    }

    pub fn is_done(&self, i: usize) -> bool {
        matches!(self.states[i], State::Done(_))
    }

    /// Runs to completion, picking the next transaction with `pick`.
    pub fn run_with(&mut self, mut pick: impl FnMut(&[usize]) -> usize) -> Result<Vec<TxnDescriptor>, OltpError> {
        loop {
            let r = self.runnable();
            if r.is_empty() {
                return Ok(self.history().expect("all done"));
            }
            let i = pick(&r);
            self.step(i)?;
        }
    }
}

/// One run under a uniformly random schedule.
pub fn random_schedule(scripts: &[TxnScript], keys: u64, rng: &mut impl Rng) -> Result<Vec<TxnDescriptor>, OltpError> {
    Simulation::new(scripts, keys)?.run_with(|r| r[rng.gen_range(0..r.len())])
}

/// Runs whole phases in the given event order. Each transaction appears
/// twice: its first occurrence runs begin and all reads, its second the
/// entire commit.
pub fn run_events(scripts: &[TxnScript], keys: u64, order: &[usize]) -> Result<Vec<TxnDescriptor>, OltpError> {
    let mut sim = Simulation::new(scripts, keys)?;
    let mut seen = vec![false; scripts.len()];
    for &i in order {
        if !seen[i] {
            seen[i] = true;
            while !sim.past_reads(i) {
                sim.step(i)?;
            }
        } else {
            while !sim.is_done(i) {
                sim.step(i)?;
            }
        }
    }
    for i in 0..scripts.len() {
        while !sim.is_done(i) {
            sim.step(i)?;
        }
    }
    Ok(sim.history().expect("all done"))
}

/// Every sequence in which each of `n` transactions appears exactly twice.
pub fn event_orders(n: usize) -> Vec<Vec<usize>> {
    fn rec(left: &mut [u8], cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == 2 * left.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..left.len() {
            if left[i] > 0 {
                left[i] -= 1;
                cur.push(i);
                rec(left, cur, out);
                cur.pop();
                left[i] += 1;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut vec![2; n], &mut Vec::new(), &mut out);
    out
}

/// Visits the history of every interleaving of the scripts' steps. Returns
/// the number of interleavings.
pub fn exhaustive(
    scripts: &[TxnScript],
    keys: u64,
    mut visit: impl FnMut(&[usize], &[TxnDescriptor]),
) -> Result<usize, OltpError> {
    let mut count = 0;
    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        let mut sim = Simulation::new(scripts, keys)?;
        for &i in &prefix {
            sim.step(i)?;
        }
        let runnable = sim.runnable();
        if runnable.is_empty() {
            visit(&prefix, &sim.history().expect("all done"));
            count += 1;
        }
        for i in runnable.into_iter().rev() {
            let mut p = prefix.clone();
            p.push(i);
            stack.push(p);
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oltp::checker::{brute_force_si, check_history};
    use crate::oltp::history::HistoryEntry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entries(h: &[TxnDescriptor]) -> Vec<HistoryEntry> {
        h.iter().map(HistoryEntry::from).collect()
    }

    #[test]
    fn two_writers_same_key_all_interleavings() {
        let scripts = [TxnScript::new(&[0], &[0]), TxnScript::new(&[0], &[0])];
        let mut both_read_first = 0;
        let n = exhaustive(&scripts, 2, |_, h| {
            let e = entries(h);
            assert!(check_history(&e).is_empty(), "{e:?}");
            assert!(brute_force_si(&e));
            let committed = h.iter().filter(|t| t.outcome.is_committed()).count();
            assert!(committed >= 1, "progress: {h:?}");
            if h.iter().all(|t| t.rid == 0 && t.reads.len() == 1 && t.reads[0].cid == 0) {
                both_read_first += 1;
                assert_eq!(committed, 1);
            }
        })
        .unwrap();
        assert!(n > 100);
        assert!(both_read_first > 0);
    }

    #[test]
    fn two_txn_two_key_all_interleavings() {
        let scripts = [TxnScript::new(&[0, 1], &[0, 1]), TxnScript::new(&[1, 0], &[1])];
        let n = exhaustive(&scripts, 2, |_, h| {
            let e = entries(h);
            assert!(check_history(&e).is_empty(), "{e:?}");
            assert!(brute_force_si(&e));
        })
        .unwrap();
        assert!(n > 1000);
    }

    #[test]
    fn event_orders_count() {
        assert_eq!(event_orders(2).len(), 6);
        assert_eq!(event_orders(4).len(), 2520);
    }

    #[test]
    fn serial_events_commit_everything() {
        let scripts = [TxnScript::new(&[0, 1], &[0]), TxnScript::new(&[0], &[0]), TxnScript::new(&[1], &[1])];
        let h = run_events(&scripts, 2, &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!(h.iter().all(|t| t.outcome.is_committed()), "{h:?}");
        // Overlapping writers of key 0: the second to commit loses.
        let h = run_events(&scripts, 2, &[0, 1, 0, 1]).unwrap();
        assert!(h[0].outcome.is_committed());
        assert!(!h[1].outcome.is_committed());
        assert!(check_history(&entries(&h)).is_empty());
    }

    #[test]
    fn random_four_txn_schedules() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let scripts: Vec<TxnScript> = (0..4)
                .map(|_| {
                    let reads: Vec<u64> = if rng.gen_bool(0.5) { vec![0, 1] } else { vec![rng.gen_range(0..2)] };
                    let writes: Vec<u64> = reads.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
                    TxnScript::new(&reads, &writes)
                })
                .collect();
            let h = random_schedule(&scripts, 2, &mut rng).unwrap();
            let e = entries(&h);
            assert!(check_history(&e).is_empty(), "{e:?}");
            assert!(brute_force_si(&e), "{e:?}");
        }
    }
}
