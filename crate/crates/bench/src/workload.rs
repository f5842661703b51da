//! Deterministic input generators.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nam_core::olap::{mix64, Relation};

use crate::config::ExperimentConfig;

pub const ORDER_BYTES: usize = 32;
pub const ORDERLINE_BYTES: usize = 32;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// One checkout: read three products, update their stock, insert an order
/// and one orderline per product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckoutTxn {
    pub products: [u64; 3],
    pub quantities: [u64; 3],
    pub order: Vec<u8>,
    pub lines: [Vec<u8>; 3],
}

impl CheckoutTxn {
    pub fn read_set(&self) -> &[u64] {
        &self.products
    }

    pub fn update_count(&self) -> usize {
        self.products.len()
    }

    pub fn insert_count(&self) -> usize {
        1 + self.lines.len()
    }

    /// Serialized form, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (p, q) in self.products.iter().zip(&self.quantities) {
            out.extend_from_slice(&p.to_le_bytes());
            out.extend_from_slice(&q.to_le_bytes());
        }
        out.extend_from_slice(&self.order);
        self.lines.iter().for_each(|l| out.extend_from_slice(l));
        out
    }
}

/// Initial product rows. The first 8 bytes of each row hold the stock.
pub fn product_rows(config: &ExperimentConfig) -> Vec<Vec<u8>> {
    let mut r = rng(config.seed, 0);
    (0..config.products)
        .map(|_| {
            let mut row = vec![0u8; config.product_bytes];
            r.fill_bytes(&mut row);
            row[..8].copy_from_slice(&1_000_000u64.to_le_bytes());
            row
        })
        .collect()
}

/// Applies a stock decrement to a product row.
pub fn take_stock(row: &[u8], quantity: u64) -> Vec<u8> {
    let mut out = row.to_vec();
    let stock = u64::from_le_bytes(row[..8].try_into().expect("stock field"));
    out[..8].copy_from_slice(&stock.wrapping_sub(quantity).to_le_bytes());
    out
}

/// Per-client transaction streams; client `c` (0-based) gets its own RNG
/// stream.
pub fn gen_oltp_workload(config: &ExperimentConfig) -> Vec<Vec<CheckoutTxn>> {
    (0..config.clients)
        .map(|c| {
            let mut r = rng(config.seed, 1 + c as u64);
            (0..config.txns_per_client)
                .map(|seq| {
                    let picked = sample(&mut r, config.products as usize, 3);
                    let products = [picked.index(0) as u64, picked.index(1) as u64, picked.index(2) as u64];
                    let quantities: [u64; 3] = [r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=5)];
                    let mut order = vec![0u8; ORDER_BYTES];
                    order[..4].copy_from_slice(&c.to_le_bytes());
                    order[4..12].copy_from_slice(&seq.to_le_bytes());
                    r.fill_bytes(&mut order[12..]);
                    let lines = std::array::from_fn(|i| {
                        let mut l = vec![0u8; ORDERLINE_BYTES];
                        l[..8].copy_from_slice(&products[i].to_le_bytes());
                        l[8..16].copy_from_slice(&quantities[i].to_le_bytes());
                        r.fill_bytes(&mut l[16..]);
                        l
                    });
                    CheckoutTxn { products, quantities, order, lines }
                })
                .collect()
        })
        .collect()
}

/// R holds `r_tuples` distinct keys. Exactly `round(selectivity * s_tuples)`
/// S tuples carry a key drawn from R; the rest come from a disjoint key
/// family. Both relations are spread round-robin over `config.nodes`.
pub fn gen_join_input(config: &ExperimentConfig) -> (Relation, Relation) {
    let w = config.payload_width;
    let base = mix64(config.seed);
    let mut r = rng(config.seed, 1 << 32);
    let r_keys: Vec<u64> = (0..config.r_tuples).map(|i| mix64(base ^ i)).collect();
    let matching = (config.selectivity * config.s_tuples as f64).round() as u64;
    let mut s_keys: Vec<u64> = (0..config.s_tuples)
        .map(|j| if j < matching { r_keys[r.gen_range(0..r_keys.len())] } else { mix64(base ^ (j | 1 << 62)) })
        .collect();
    s_keys.shuffle(&mut r);
    let mut payload = vec![0u8; w];
    let mut rows = |keys: &[u64], r: &mut ChaCha8Rng| {
        let tuples: Vec<(u64, Vec<u8>)> = keys
            .iter()
            .map(|&k| {
                r.fill_bytes(&mut payload);
                (k, payload.clone())
            })
            .collect();
        Relation::round_robin(w, config.nodes, tuples.iter().map(|(k, p)| (*k, &p[..])))
    };
    let rel_r = rows(&r_keys, &mut r);
    let rel_s = rows(&s_keys, &mut r);
    (rel_r, rel_s)
}

/// `(group, value)` rows with groups drawn uniformly from `distinct_keys`
/// keys, dealt round-robin to the nodes.
pub fn gen_agg_input(config: &ExperimentConfig) -> Vec<Vec<(u64, i64)>> {
    let base = mix64(config.seed ^ 0xa99);
    let mut r = rng(config.seed, 2 << 32);
    let mut parts = vec![Vec::new(); config.nodes];
    for i in 0..config.agg_rows {
        let g = mix64(base ^ r.gen_range(0..config.distinct_keys));
        parts[(i % config.nodes as u64) as usize].push((g, r.gen_range(-1000..=1000)));
    }
    parts
}
