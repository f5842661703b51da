use std::collections::HashSet;

use nam_bench::workload::{gen_agg_input, gen_join_input, gen_oltp_workload, product_rows, take_stock};
use nam_bench::{ExperimentConfig, Protocol};
use nam_core::fabric::Transport;

fn small() -> ExperimentConfig {
    ExperimentConfig { clients: 3, txns_per_client: 50, products: 20, r_tuples: 500, s_tuples: 800, ..Default::default() }
}

#[test]
fn oltp_workload_is_deterministic_per_seed() {
    let c = small();
    let a = gen_oltp_workload(&c);
    assert_eq!(a, gen_oltp_workload(&c));
    let b = gen_oltp_workload(&ExperimentConfig { seed: 2, ..c.clone() });
    assert_ne!(a, b);
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|s| s.len() == 50));
}

#[test]
fn checkouts_touch_three_distinct_products() {
    for t in gen_oltp_workload(&small()).iter().flatten() {
        let set: HashSet<u64> = t.products.iter().copied().collect();
        assert_eq!(set.len(), 3);
        assert!(t.products.iter().all(|&p| p < 20));
        assert_eq!((t.update_count(), t.insert_count()), (3, 4));
    }
}

#[test]
fn stock_is_decremented_in_place() {
    let c = ExperimentConfig { products: 4, product_bytes: 64, ..Default::default() };
    let rows = product_rows(&c);
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == 64));
    let next = take_stock(&rows[0], 7);
    let stock = |r: &[u8]| u64::from_le_bytes(r[..8].try_into().unwrap());
    assert_eq!(stock(&rows[0]) - stock(&next), 7);
    assert_eq!(rows[0][8..], next[8..]);
}

#[test]
fn join_input_hits_requested_selectivity() {
    for sel in [0.0, 0.3, 1.0] {
        let c = ExperimentConfig { selectivity: sel, nodes: 3, ..small() };
        let (r, s) = gen_join_input(&c);
        assert_eq!((r.len(), s.len()), (500, 800));
        assert_eq!(r.parts.len(), 3);
        let keys: HashSet<u64> = r.tuples().map(|(k, _)| k).collect();
        assert_eq!(keys.len(), 500);
        let hits = s.tuples().filter(|(k, _)| keys.contains(k)).count();
        assert_eq!(hits, (sel * 800.0_f64).round() as usize);
    }
}

#[test]
fn agg_input_respects_distinct_keys() {
    let c = ExperimentConfig { agg_rows: 5000, distinct_keys: 16, nodes: 4, ..Default::default() };
    let parts = gen_agg_input(&c);
    assert_eq!(parts.len(), 4);
    assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), 5000);
    let groups: HashSet<u64> = parts.iter().flatten().map(|&(g, _)| g).collect();
    assert!(groups.len() <= 16 && groups.len() > 8);
}

#[test]
fn config_text_and_keys() {
    let c = ExperimentConfig::from_text(
        "# small trad run\nprotocol = trad\ntransport = ipoib\nclients = 2\ntxns = 10\nlatency.ipoeth = 40e-6, 1e9\n",
    )
    .unwrap();
    assert_eq!(c.protocol, Protocol::Trad);
    assert_eq!(c.transport, Transport::IpoIb);
    assert_eq!((c.clients, c.txns_per_client), (2, 10));
    assert_eq!(c.latency_overrides.len(), 1);

    let mut c = ExperimentConfig::default();
    assert!(c.set("no_such_key", "1").is_err());
    assert!(c.set("clients", "many").is_err());
    c.set("tuples", "1234").unwrap();
    assert_eq!((c.r_tuples, c.s_tuples), (1234, 1234));
    c.set("selectivity", "1.5").unwrap();
    assert!(c.validate().is_err());
}
