use std::sync::Barrier;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn word(fabric: &Fabric, addr: RemoteAddress) -> u64 {
    u64::from_le_bytes(fabric.peek(addr, 8).unwrap().try_into().unwrap())
}

#[test]
fn regions_are_zeroed_and_disjoint() {
    let f = Fabric::new();
    let r0 = f.register_region(0, 4096).unwrap();
    assert_eq!((r0.base, r0.length), (0, 4096));
    assert_eq!(f.peek(r0.addr(0), 4096).unwrap(), vec![0; 4096]);
    let a = f.register_region(1, 1024).unwrap();
    let b = f.register_region(1, 1024).unwrap();
    assert_eq!((a.base, a.end(), b.base, b.end()), (0, 1024, 1024, 2048));
    assert_eq!(f.register_region(0, 0), Err(FabricError::EmptyRegion));
    assert!(matches!(f.register_region_at(1, 1000, 10), Err(FabricError::Overlap { .. })));
    assert!(f.register_region_at(1, 4096, 10).is_ok());
    assert_eq!(f.regions(1).len(), 3);
}

#[test]
fn read_write_round_trip() {
    let f = Fabric::new();
    let r = f.register_region(0, 4096).unwrap();
    let mut qp = f.connect(9, 0);
    assert_eq!(qp.read(r.addr(0), 8).unwrap(), vec![0; 8]);
    let pattern: Vec<u8> = (0..1024).map(|i| (i * 7) as u8).collect();
    qp.write(r.addr(100), pattern.clone()).unwrap();
    assert_eq!(qp.read(r.addr(100), 1024).unwrap(), pattern);
}

#[test]
fn access_errors_are_completions() {
    let f = Fabric::new();
    let r = f.register_region(0, 64).unwrap();
    let mut qp = f.connect(9, 0);
    let seq = qp.post_read(r.addr(60), 8, false);
    let cs = qp.poll(10);
    assert_eq!(cs.len(), 1, "errors surface even when unsignaled");
    assert_eq!((cs[0].seq, cs[0].status), (seq, CompletionStatus::AccessError));
    assert!(matches!(qp.cas(r.addr(4), 0, 1), Err(FabricError::Misaligned { .. })));
    assert!(matches!(qp.write(RemoteAddress::new(0, 1 << 20), vec![1]), Err(FabricError::Access { .. })));
    assert!(matches!(qp.read(RemoteAddress::new(5, 0), 1), Err(FabricError::Access { .. })));
}

#[test]
fn one_sided_verbs_need_rdma() {
    let f = Fabric::new();
    let r = f.register_region(0, 64).unwrap();
    let mut qp = f.connect_with(9, 0, Transport::IpoEth, QpOptions::default());
    let c = qp.execute_signaled(WorkRequest::Read { remote: r.addr(0), len: 8 });
    assert!(matches!(c, Err(FabricError::UnsupportedVerb { .. })));
}

#[test]
fn cas_examples() {
    let f = Fabric::new();
    let r = f.register_region(0, 64).unwrap();
    let mut qp = f.connect(9, 0);
    let a = r.addr(8);
    qp.write(a, 20003u64.to_le_bytes().to_vec()).unwrap();
    let locked = (1u64 << 63) | 20003;
    assert_eq!(qp.cas(a, 20003, locked).unwrap(), 20003);
    assert_eq!(word(&f, a), locked);
    assert_eq!(qp.cas(a, 20003, 5).unwrap(), locked);
    assert_eq!(word(&f, a), locked);
}

#[test]
fn fetch_add_examples() {
    let f = Fabric::new();
    let r = f.register_region(0, 64).unwrap();
    let mut qp = f.connect(9, 0);
    assert_eq!(qp.fetch_add(r.addr(0), 1).unwrap(), 0);
    assert_eq!(qp.fetch_add(r.addr(0), 0).unwrap(), 1);
    assert_eq!(word(&f, r.addr(0)), 1);
}

#[test]
fn concurrent_cas_has_one_winner() {
    const TRIALS: u64 = 10_000;
    const THREADS: usize = 8;
    let f = Fabric::new();
    let r = f.register_region(0, TRIALS * 8).unwrap();
    let barrier = Barrier::new(THREADS);
    let wins: Vec<Vec<bool>> = thread::scope(|s| {
        let handles: Vec<_> = (0..THREADS)
            .map(|t| {
                let (f, barrier) = (&f, &barrier);
                s.spawn(move || {
                    let mut qp = f.connect(100 + t as NodeId, 0);
                    (0..TRIALS)
                        .map(|i| {
                            barrier.wait();
                            qp.cas(r.addr(i * 8), 0, t as u64 + 1).unwrap() == 0
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for i in 0..TRIALS as usize {
        let winners: Vec<usize> = (0..THREADS).filter(|&t| wins[t][i]).collect();
        assert_eq!(winners.len(), 1, "trial {i}");
        assert_eq!(word(&f, r.addr(i as u64 * 8)), winners[0] as u64 + 1);
    }
}

/// All interleavings of `k` invoke/return pairs on deferred queue pairs.
fn interleavings(k: usize) -> Vec<Vec<usize>> {
    fn rec(left: &mut [u8], cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.iter().all(|&l| l == 0) {
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
    rec(&mut vec![2; k], &mut Vec::new(), &mut out);
    out
}

fn run_schedule(ops: &[WordOp], schedule: &[usize], initial: u64) -> Vec<WordEvent> {
    let f = Fabric::new();
    let r = f.register_region(0, 8).unwrap();
    let a = r.addr(0);
    let mut setup = f.connect(99, 0);
    setup.write(a, initial.to_le_bytes().to_vec()).unwrap();
    let mut qps: Vec<_> = (0..ops.len()).map(|i| f.connect_with(i as NodeId + 1, 0, Transport::Rdma, QpOptions::deferred())).collect();
    let mut events: Vec<WordEvent> =
        ops.iter().map(|&op| WordEvent { op, result: 0, invoked: 0, returned: 0 }).collect();
    let mut posted = vec![false; ops.len()];
    for (clock, &i) in schedule.iter().enumerate() {
        if !posted[i] {
            posted[i] = true;
            events[i].invoked = clock as u64;
            let req = match ops[i] {
                WordOp::Read => WorkRequest::Read { remote: a, len: 8 },
                WordOp::Write(v) => WorkRequest::Write { remote: a, payload: v.to_le_bytes().to_vec() },
                WordOp::Cas { expected, swap } => WorkRequest::Cas { remote: a, compare: expected, swap },
                WordOp::FetchAdd(d) => WorkRequest::FetchAdd { remote: a, delta: d },
            };
            qps[i].post(req, true);
        } else {
            assert!(qps[i].process_next());
            let c = qps[i].poll(1).pop().unwrap();
            events[i].returned = clock as u64;
            events[i].result = c.word().unwrap_or(0);
        }
    }
    events
}

#[test]
fn fetch_add_exhaustive_permutation() {
    for k in 1..=4 {
        let ops = vec![WordOp::FetchAdd(1); k];
        for schedule in interleavings(k) {
            let events = run_schedule(&ops, &schedule, 0);
            let mut results: Vec<u64> = events.iter().map(|e| e.result).collect();
            results.sort_unstable();
            assert_eq!(results, (0..k as u64).collect::<Vec<_>>());
            assert!(is_linearizable(0, &events));
        }
    }
}

#[test]
fn mixed_atomics_exhaustive_linearizable() {
    let ops = [
        WordOp::Cas { expected: 0, swap: 10 },
        WordOp::FetchAdd(3),
        WordOp::Cas { expected: 3, swap: 20 },
        WordOp::Read,
    ];
    let schedules = interleavings(4);
    assert_eq!(schedules.len(), 2520);
    for schedule in schedules {
        let events = run_schedule(&ops, &schedule, 0);
        assert!(is_linearizable(0, &events), "{schedule:?} {events:?}");
    }
}

#[test]
fn lincheck_rejects_fabricated_results() {
    let ops = [WordOp::FetchAdd(1), WordOp::FetchAdd(1)];
    let mut events = run_schedule(&ops, &[0, 0, 1, 1], 0);
    events[1].result = 0;
    assert!(!is_linearizable(0, &events));
}

#[test]
fn selective_signaling_example() {
    let f = Fabric::new();
    let r = f.register_region(0, 64).unwrap();
    let mut qp = f.connect(9, 0);
    for i in 0..3u8 {
        qp.post_write(r.addr(i as u64 * 8), vec![i + 1; 8], false);
    }
    qp.post_write(r.addr(24), vec![4; 8], true);
    let cs = qp.poll(16);
    assert_eq!(cs.len(), 1);
    for i in 0..4u8 {
        assert_eq!(f.peek(r.addr(i as u64 * 8), 8).unwrap(), vec![i + 1; 8]);
    }
    assert!(qp.poll(16).is_empty());
}

#[test]
fn completions_arrive_in_seq_order() {
    let f = Fabric::new();
    let r = f.register_region(0, 64).unwrap();
    let mut qp = f.connect_with(9, 0, Transport::Rdma, QpOptions::deferred());
    let seqs: Vec<u64> = (0..8).map(|i| qp.post_write(r.addr(0), vec![i], i % 2 == 1)).collect();
    qp.process_all();
    let got: Vec<u64> = qp.poll(100).iter().map(|c| c.seq).collect();
    let want: Vec<u64> = seqs.iter().copied().filter(|s| s % 2 == 1).collect();
    assert_eq!(got, want);
}

/// Random WQE streams over several deferred queue pairs, stepped in random
/// order; every observed completion must imply its predecessors are visible.
#[test]
fn signaled_completion_implies_prior_writes_visible() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let f = Fabric::new();
        let r = f.register_region(0, 4096).unwrap();
        let nqp = rng.gen_range(1..4);
        let mut qps: Vec<_> =
            (0..nqp).map(|i| f.connect_with(i + 1, 0, Transport::Rdma, QpOptions::deferred())).collect();
        // (qp, seq) -> (offset, byte); each WQE writes its own 8-byte slot.
        let mut expected = Vec::new();
        let mut slot = 0u64;
        let steps = rng.gen_range(10..60);
        for _ in 0..steps {
            let q = rng.gen_range(0..nqp as usize);
            match rng.gen_range(0..3) {
                0 | 1 if slot < 512 => {
                    let byte = rng.gen_range(1..=255u8);
                    let signaled = rng.gen_bool(0.25);
                    let seq = qps[q].post_write(r.addr(slot * 8), vec![byte; 8], signaled);
                    expected.push((q, seq, slot * 8, byte));
                    slot += 1;
                }
                _ => {
                    qps[q].process_next();
                }
            }
            for (q, qp) in qps.iter().enumerate() {
                for c in qp.poll(64) {
                    assert!(c.is_ok());
                    for &(eq, seq, off, byte) in &expected {
                        if eq == q && seq <= c.seq {
                            assert_eq!(f.peek(r.addr(off), 8).unwrap(), vec![byte; 8]);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn send_receive_delivery() {
    let f = Fabric::new();
    let (mut a, mut b) = f.connect_pair(1, 2, Transport::IpoEth);
    assert!(matches!(a.send(vec![1; 8]), Err(FabricError::ReceiverNotReady)));
    b.post_receive(64).unwrap();
    a.send(vec![7; 8]).unwrap();
    assert_eq!(b.recv().unwrap(), vec![7; 8]);
    let m = f.metrics();
    assert_eq!(m.node(1).client_cycles, 7544);
    assert_eq!(m.node(2).server_cycles, 7544);
    assert_eq!(b.stats().server_cycles, 7544);

    b.post_receive(4).unwrap();
    assert!(matches!(a.send(vec![0; 8]), Err(FabricError::Access { .. })));
    assert!(b.recv().is_err());
}

#[test]
fn ipoib_message_cycles() {
    let f = Fabric::new();
    let (mut a, mut b) = f.connect_pair(1, 2, Transport::IpoIb);
    b.post_receive(8).unwrap();
    a.send(vec![0; 8]).unwrap();
    let m = f.metrics();
    assert_eq!((m.node(1).client_cycles, m.node(2).server_cycles), (13264, 13264));
}

#[test]
fn one_sided_verbs_charge_no_server_cycles() {
    let f = Fabric::new();
    let r = f.register_region(0, 1 << 20).unwrap();
    let mut s = f.open_session(5);
    s.write(r.addr(0), vec![1; 1 << 20]).unwrap();
    s.read(r.addr(0), 128).unwrap();
    s.cas(r.addr(0), 0, 1).unwrap();
    s.fetch_add(r.addr(8), 1).unwrap();
    s.write_unsignaled(r.addr(16), vec![2; 8]).unwrap();
    let m = f.metrics();
    assert_eq!(m.node(0).server_cycles, 0);
    assert_eq!(m.node(0).client_cycles, 0);
    assert_eq!(m.node(5).client_cycles, 5 * 450);
    assert_eq!(m.node(5).verb(Verb::Write), 2);
    assert_eq!(m.node(5).bytes_sent, (1 << 20) + 8 + 8 + 8);
    let st = s.stats();
    assert_eq!((st.signaled_writes, st.unsignaled_writes), (1, 1));
}

#[test]
fn completion_latency_follows_model() {
    let f = Fabric::new();
    let r = f.register_region(0, 1 << 21).unwrap();
    let mut qp = f.connect(9, 0);
    let c = qp.execute_signaled(WorkRequest::Read { remote: r.addr(0), len: 128 }).unwrap();
    assert!((c.modeled_latency - 2e-6).abs() < 1e-15);
    let c = qp.execute_signaled(WorkRequest::Write { remote: r.addr(0), payload: vec![0; 128] }).unwrap();
    assert!((c.modeled_latency - 1e-6).abs() < 1e-15);
    let c = qp.execute_signaled(WorkRequest::Write { remote: r.addr(0), payload: vec![0; 1 << 20] }).unwrap();
    assert!((c.modeled_latency - 161e-6).abs() < 1e-15);
}

#[test]
fn metrics_csv_and_deltas() {
    let f = Fabric::new();
    let r = f.register_region(0, 64).unwrap();
    let mut qp = f.connect(9, 0);
    qp.read(r.addr(0), 8).unwrap();
    let before = f.metrics();
    qp.read(r.addr(0), 8).unwrap();
    let d = f.metrics().since(&before);
    assert_eq!(d.total().verb(Verb::Read), 1);
    let csv = f.metrics().to_csv();
    assert!(csv.starts_with(MetricsSnapshot::CSV_HEADER));
    assert!(csv.contains("9,rdma,2,0,0,0,0,0,0,16,900,0"));
}

#[test]
fn torn_writes_are_never_observed() {
    let f = Fabric::new();
    let r = f.register_region(0, 4096).unwrap();
    thread::scope(|s| {
        let f2 = f.clone();
        s.spawn(move || {
            let mut qp = f2.connect(1, 0);
            for i in 0..2000u32 {
                qp.write(r.addr(0), vec![(i % 251) as u8; 4096]).unwrap();
            }
        });
        let mut qp = f.connect(2, 0);
        for _ in 0..2000 {
            let b = qp.read(r.addr(0), 4096).unwrap();
            assert!(b.iter().all(|&x| x == b[0]));
        }
    });
}
