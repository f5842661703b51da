//! Reference implementations the distributed operators are checked against.

use std::collections::BTreeMap;

use super::agg::AggFn;
use super::{canonical, JoinMatch, Relation};

/// Every pair of tuples with equal keys, by comparing all pairs. The outer
/// loop is split over threads; the result is sorted.
pub fn nested_loop_join(r: &Relation, s: &Relation) -> Vec<JoinMatch> {
    let rt: Vec<(u64, &[u8])> = r.tuples().collect();
    let st: Vec<(u64, &[u8])> = s.tuples().collect();
    let s_keys: Vec<u64> = st.iter().map(|t| t.0).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(16);
    let per = rt.len().div_ceil(threads).max(1);
    let out: Vec<JoinMatch> = std::thread::scope(|scope| {
        let handles: Vec<_> = rt
            .chunks(per)
            .map(|chunk| {
                let (st, s_keys) = (&st, &s_keys);
                scope.spawn(move || {
                    let mut out = Vec::new();
                    for &(rk, rp) in chunk {
                        for (j, &sk) in s_keys.iter().enumerate() {
                            if sk == rk {
                                out.push(JoinMatch { key: rk, r: rp.to_vec(), s: st[j].1.to_vec() });
                            }
                        }
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("oracle worker")).collect()
    });
    canonical(out)
}

/// Single-threaded hash aggregation of `(group, value)` rows.
pub fn hash_aggregate<'a>(rows: impl IntoIterator<Item = &'a (u64, i64)>, f: AggFn) -> BTreeMap<u64, i64> {
    let mut out = BTreeMap::new();
    for &(g, v) in rows {
        out.entry(g).and_modify(|acc| *acc = f.update(*acc, v)).or_insert_with(|| f.init(v));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_join() {
        let p = [0u8; 0];
        let r = Relation::round_robin(0, 2, [1, 2, 3, 3].map(|k| (k, &p[..])));
        let s = Relation::round_robin(0, 1, [2, 3, 4].map(|k| (k, &p[..])));
        let keys: Vec<u64> = nested_loop_join(&r, &s).iter().map(|m| m.key).collect();
        assert_eq!(keys, vec![2, 3, 3]);
    }

    #[test]
    fn aggregate() {
        let rows = [(1, 5), (2, -1), (1, 7)];
        assert_eq!(hash_aggregate(&rows, AggFn::Sum), BTreeMap::from([(1, 12), (2, -1)]));
        assert_eq!(hash_aggregate(&rows, AggFn::Count), BTreeMap::from([(1, 2), (2, 1)]));
        assert_eq!(hash_aggregate(&rows, AggFn::Min), BTreeMap::from([(1, 5), (2, -1)]));
        assert_eq!(hash_aggregate(&rows, AggFn::Max), BTreeMap::from([(1, 7), (2, -1)]));
    }
}
