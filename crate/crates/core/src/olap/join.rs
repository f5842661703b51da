//! Distributed equi-joins.
//!
//! Every algorithm routes a tuple with key `k` to node `h(k) mod p` and,
//! inside a node, to radix partition `(h(k) >> 32) mod F`, so all of them
//! produce the same per-node pairs.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use crate::fabric::{Completion, MetricsSnapshot, NodeId, QueuePair, RemoteAddress, Session, Transport};

use super::{canonical, hash_key, BloomFilter, Chunk, Cluster, JoinMatch, OlapError, Relation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JoinConfig {
    /// Transport of the SEND/RECEIVE shuffles.
    pub transport: Transport,
    /// Largest SEND payload.
    pub message_bytes: usize,
    /// Flush unit of a software-managed buffer.
    pub buffer_bytes: usize,
    /// Budget all staging buffers of one worker must fit in.
    pub l3_budget: usize,
    /// Target size of a radix partition of the build side.
    pub cache_bytes: usize,
    /// Every n-th WRITE on a queue pair is signaled.
    pub signal_every: u32,
    /// Bloom filter false-positive rate.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for JoinConfig {
    fn default() -> Self {
        JoinConfig {
            transport: Transport::Rdma,
            message_bytes: 32 * 1024,
            buffer_bytes: 2 * 1024,
            l3_budget: 16 * 1024 * 1024,
            cache_bytes: 256 * 1024,
            signal_every: 16,
            epsilon: 0.1,
            seed: 0x5eed,
        }
    }
}

impl JoinConfig {
    /// Most staging buffers that fit the L3 budget.
    pub fn max_fanout(&self) -> usize {
        self.l3_budget / self.buffer_bytes
    }

    fn validate(&self, tuple_width: usize) -> Result<(), OlapError> {
        let bad = |m: &str| Err(OlapError::Config(m.to_string()));
        if self.buffer_bytes < tuple_width || self.message_bytes < tuple_width {
            return bad("buffers must hold at least one tuple");
        }
        if self.signal_every == 0 || self.cache_bytes == 0 {
            return bad("signal_every and cache_bytes must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must be in (0, 1)");
        }
        if self.max_fanout() == 0 {
            return bad("l3_budget is smaller than one buffer");
        }
        Ok(())
    }
}

/// Power-of-two fan-out that cuts `bytes` into cache-sized blocks, capped
/// at the largest power of two not above `max`.
pub fn radix_fanout(bytes: u64, cache_bytes: usize, max: usize) -> usize {
    let want = bytes.div_ceil(cache_bytes as u64).max(1).next_power_of_two() as usize;
    let cap = if max == 0 { 1 } else { 1 << max.ilog2() };
    want.min(cap)
}

/// Accounting of one-sided buffer flushes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlushStats {
    pub writes: u64,
    pub signaled: u64,
    pub largest_write: usize,
    /// Buffers drained by a signaled WRITE at the end of partitioning.
    pub final_flushes: u64,
}

impl std::ops::AddAssign for FlushStats {
    fn add_assign(&mut self, o: FlushStats) {
        self.writes += o.writes;
        self.signaled += o.signaled;
        self.largest_write = self.largest_write.max(o.largest_write);
        self.final_flushes += o.final_flushes;
    }
}

#[derive(Debug, Clone, Default)]
pub struct JoinOutput {
    /// Sorted result.
    pub matches: Vec<JoinMatch>,
    /// Fabric activity of the whole run.
    pub metrics: MetricsSnapshot,
    /// Fabric activity up to the end of the partition phase, including
    /// Bloom filter broadcasts.
    pub partition_metrics: MetricsSnapshot,
    /// Tuples that left their node during partitioning.
    pub shuffled_tuples: u64,
    pub shuffled_bytes: u64,
    /// Tuples that stayed on their node.
    pub retained_tuples: u64,
    /// Tuples that survived the Bloom filters, for the reduced join.
    pub passed_filter: Option<u64>,
    /// Radix fan-out per node.
    pub fanout: usize,
    pub flushes: FlushStats,
    pub wall_seconds: f64,
}

fn node_of(key: u64, seed: u64, nodes: usize) -> usize {
    (hash_key(key, seed) % nodes as u64) as usize
}

fn radix_of(key: u64, seed: u64, fanout: usize) -> usize {
    ((hash_key(key, seed) >> 32) as usize) & (fanout - 1)
}

fn split(chunk: &Chunk, parts: usize, mut route: impl FnMut(u64) -> usize) -> Vec<Chunk> {
    let mut out = vec![Chunk::with_capacity(chunk.payload_width, chunk.len() / parts + 1); parts];
    for (k, p) in chunk.iter() {
        out[route(k)].push(k, p);
    }
    out
}

fn build_probe(r: &Chunk, s: &Chunk, out: &mut Vec<JoinMatch>) {
    let mut table: HashMap<u64, Vec<usize>> = HashMap::with_capacity(r.len());
    for (i, &k) in r.keys.iter().enumerate() {
        table.entry(k).or_default().push(i);
    }
    for (k, sp) in s.iter() {
        if let Some(rows) = table.get(&k) {
            for &i in rows {
                out.push(JoinMatch { key: k, r: r.payload(i).to_vec(), s: sp.to_vec() });
            }
        }
    }
}

/// One radix pass over both inputs, then build and probe per partition.
pub fn local_radix_join(r: &Chunk, s: &Chunk, config: &JoinConfig) -> Vec<JoinMatch> {
    let fanout = radix_fanout((r.len() * r.tuple_width()) as u64, config.cache_bytes, config.max_fanout());
    let rp = split(r, fanout, |k| radix_of(k, config.seed, fanout));
    let sp = split(s, fanout, |k| radix_of(k, config.seed, fanout));
    let mut out = Vec::new();
    for (a, b) in rp.iter().zip(&sp) {
        build_probe(a, b, &mut out);
    }
    out
}

fn join_nodes(rs: &[Chunk], ss: &[Chunk], config: &JoinConfig) -> Vec<JoinMatch> {
    let out: Vec<JoinMatch> = std::thread::scope(|scope| {
        let handles: Vec<_> = rs.iter().zip(ss).map(|(r, s)| scope.spawn(move || local_radix_join(r, s, config))).collect();
        handles.into_iter().flat_map(|h| h.join().expect("join worker")).collect()
    });
    canonical(out)
}

/// SEND/RECEIVE links between compute nodes, one per direction.
pub(crate) struct Messenger<'a> {
    cluster: &'a Cluster,
    transport: Transport,
    links: BTreeMap<(usize, usize), (QueuePair, QueuePair)>,
}

impl<'a> Messenger<'a> {
    pub(crate) fn new(cluster: &'a Cluster, transport: Transport) -> Self {
        Messenger { cluster, transport, links: BTreeMap::new() }
    }

    pub(crate) fn deliver(&mut self, from: usize, to: usize, payload: Vec<u8>) -> Result<Vec<u8>, OlapError> {
        let (c, t) = (self.cluster, self.transport);
        let (tx, rx) = self
            .links
            .entry((from, to))
            .or_insert_with(|| c.fabric.connect_pair(c.compute[from], c.compute[to], t));
        rx.post_receive(payload.len() as u64)?;
        tx.send(payload)?;
        Ok(rx.recv()?)
    }
}

#[derive(Debug, Default)]
struct ShuffleStats {
    shuffled: u64,
    bytes: u64,
    retained: u64,
}

/// Hash-partitions a relation over the compute nodes with SEND/RECEIVE.
fn shuffle(
    messenger: &mut Messenger<'_>,
    parts: &[Chunk],
    config: &JoinConfig,
    stats: &mut ShuffleStats,
) -> Result<Vec<Chunk>, OlapError> {
    let nodes = parts.len();
    let width = parts[0].payload_width;
    let tw = 8 + width;
    let buckets: Vec<Vec<Chunk>> = std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .map(|c| scope.spawn(move || split(c, nodes, |k| node_of(k, config.seed, nodes))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("partition worker")).collect()
    });
    let mut dest = vec![Chunk::new(width); nodes];
    let per_message = (config.message_bytes / tw).max(1);
    for (i, row) in buckets.iter().enumerate() {
        for (j, bucket) in row.iter().enumerate() {
            if i == j {
                dest[j].append(bucket);
                stats.retained += bucket.len() as u64;
                continue;
            }
            for start in (0..bucket.len()).step_by(per_message) {
                let end = (start + per_message).min(bucket.len());
                let mut msg = Vec::with_capacity((end - start) * tw);
                (start..end).for_each(|t| bucket.encode_tuple(t, &mut msg));
                stats.bytes += msg.len() as u64;
                let got = messenger.deliver(i, j, msg)?;
                dest[j].extend_from_wire(&got);
            }
            stats.shuffled += bucket.len() as u64;
        }
    }
    Ok(dest)
}

fn prepare(cluster: &Cluster, r: &Relation, s: &Relation, config: &JoinConfig) -> Result<(), OlapError> {
    r.check(cluster)?;
    s.check(cluster)?;
    config.validate(r.tuple_width().max(s.tuple_width()))
}

/// Grace hash join: shuffle both inputs over SEND/RECEIVE, then join each
/// node's share locally.
pub fn ghj(cluster: &Cluster, r: &Relation, s: &Relation, config: &JoinConfig) -> Result<JoinOutput, OlapError> {
    prepare(cluster, r, s, config)?;
    let (t0, start) = (Instant::now(), cluster.fabric.metrics());
    let mut m = Messenger::new(cluster, config.transport);
    let mut stats = ShuffleStats::default();
    let rs = shuffle(&mut m, &r.parts, config, &mut stats)?;
    let ss = shuffle(&mut m, &s.parts, config, &mut stats)?;
    let partition_metrics = cluster.fabric.metrics().since(&start);
    let fanout = rs.iter().map(|c| radix_fanout((c.len() * c.tuple_width()) as u64, config.cache_bytes, config.max_fanout())).max();
    let matches = join_nodes(&rs, &ss, config);
    Ok(JoinOutput {
        matches,
        metrics: cluster.fabric.metrics().since(&start),
        partition_metrics,
        shuffled_tuples: stats.shuffled,
        shuffled_bytes: stats.bytes,
        retained_tuples: stats.retained,
        passed_filter: None,
        fanout: fanout.unwrap_or(1),
        flushes: FlushStats::default(),
        wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Per-node filters over one relation's keys, broadcast and merged so every
/// node ends up with the filter of the whole relation.
fn broadcast_filter(
    messenger: &mut Messenger<'_>,
    parts: &[Chunk],
    expected: usize,
    config: &JoinConfig,
) -> Result<Vec<BloomFilter>, OlapError> {
    let seed = config.seed ^ 0xb100_f11e;
    let local: Vec<BloomFilter> =
        parts.iter().map(|c| BloomFilter::build(c.keys.iter().copied(), expected, config.epsilon, seed)).collect();
    let mut merged = local.clone();
    for (i, f) in local.iter().enumerate() {
        let bytes = f.to_bytes();
        for (j, target) in merged.iter_mut().enumerate().filter(|(j, _)| *j != i) {
            let mut got = Vec::with_capacity(bytes.len());
            for piece in bytes.chunks(config.message_bytes) {
                got.extend(messenger.deliver(i, j, piece.to_vec())?);
            }
            let mut remote = BloomFilter::with_rate(expected, config.epsilon, seed);
            remote.load_bytes(&got);
            target.union_with(&remote);
        }
    }
    Ok(merged)
}

fn keep_where(chunk: &Chunk, filter: &BloomFilter) -> Chunk {
    let mut out = Chunk::new(chunk.payload_width);
    for (k, p) in chunk.iter().filter(|(k, _)| filter.contains(*k)) {
        out.push(k, p);
    }
    out
}

/// GHJ preceded by a semi-join reduction: each side only ships tuples that
/// pass the Bloom filter of the other side's keys.
pub fn ghj_bloom(cluster: &Cluster, r: &Relation, s: &Relation, config: &JoinConfig) -> Result<JoinOutput, OlapError> {
    prepare(cluster, r, s, config)?;
    let (t0, start) = (Instant::now(), cluster.fabric.metrics());
    let mut m = Messenger::new(cluster, config.transport);
    let b_r = broadcast_filter(&mut m, &r.parts, r.len(), config)?;
    let b_s = broadcast_filter(&mut m, &s.parts, s.len(), config)?;
    let r_red: Vec<Chunk> = r.parts.iter().zip(&b_s).map(|(c, f)| keep_where(c, f)).collect();
    let s_red: Vec<Chunk> = s.parts.iter().zip(&b_r).map(|(c, f)| keep_where(c, f)).collect();
    let passed = r_red.iter().chain(&s_red).map(|c| c.len() as u64).sum();
    let mut stats = ShuffleStats::default();
    let rs = shuffle(&mut m, &r_red, config, &mut stats)?;
    let ss = shuffle(&mut m, &s_red, config, &mut stats)?;
    let partition_metrics = cluster.fabric.metrics().since(&start);
    let fanout = rs.iter().map(|c| radix_fanout((c.len() * c.tuple_width()) as u64, config.cache_bytes, config.max_fanout())).max();
    let matches = join_nodes(&rs, &ss, config);
    Ok(JoinOutput {
        matches,
        metrics: cluster.fabric.metrics().since(&start),
        partition_metrics,
        shuffled_tuples: stats.shuffled,
        shuffled_bytes: stats.bytes,
        retained_tuples: stats.retained,
        passed_filter: Some(passed),
        fanout: fanout.unwrap_or(1),
        flushes: FlushStats::default(),
        wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// One-sided WRITEs from a compute node with selective signaling per queue
/// pair.
pub(crate) struct RemoteWriter {
    pub(crate) session: Session,
    signal_every: u32,
    unsignaled_run: BTreeMap<NodeId, u32>,
    pub(crate) stats: FlushStats,
}

impl RemoteWriter {
    pub(crate) fn new(session: Session, signal_every: u32) -> Self {
        RemoteWriter { session, signal_every, unsignaled_run: BTreeMap::new(), stats: FlushStats::default() }
    }

    pub(crate) fn write(&mut self, addr: RemoteAddress, payload: Vec<u8>, force_signal: bool) -> Result<(), OlapError> {
        let run = self.unsignaled_run.entry(addr.node).or_default();
        let signaled = force_signal || *run + 1 >= self.signal_every;
        *run = if signaled { 0 } else { *run + 1 };
        self.stats.writes += 1;
        self.stats.signaled += signaled as u64;
        self.stats.largest_write = self.stats.largest_write.max(payload.len());
        let qp = self.session.qp(addr.node);
        qp.post_write(addr, payload, signaled);
        qp.process_all();
        for c in qp.poll(usize::MAX) {
            check_completion(c)?;
        }
        Ok(())
    }
}

fn check_completion(c: Completion) -> Result<(), OlapError> {
    match c.error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// Where one sender's share of one destination partition lands.
#[derive(Debug, Clone, Copy)]
struct Segment {
    addr: RemoteAddress,
    capacity: u64,
}

/// Reserves, on every storage node, one region per sender holding that
/// sender's partitions for the node back to back. `counts[i][g]` is the
/// number of tuples sender `i` routes to global partition `g`; partitions
/// `j*fanout..(j+1)*fanout` belong to storage node `j`.
fn reserve(cluster: &Cluster, counts: &[Vec<u64>], fanout: usize, tw: u64) -> Result<Vec<Vec<Segment>>, OlapError> {
    let mut out = Vec::with_capacity(counts.len());
    for row in counts {
        let mut segs = Vec::with_capacity(row.len());
        for (j, &node) in cluster.storage.iter().enumerate() {
            let slice = &row[j * fanout..(j + 1) * fanout];
            let total: u64 = slice.iter().sum::<u64>() * tw;
            let region = cluster.fabric.register_region(node, total.max(8))?;
            let mut offset = 0;
            for &c in slice {
                segs.push(Segment { addr: region.addr(offset), capacity: c * tw });
                offset += c * tw;
            }
        }
        out.push(segs);
    }
    Ok(out)
}

/// Radix-partitions `chunk` into remote segments through per-partition
/// staging buffers of `buffer_bytes`.
fn scatter(
    writer: &mut RemoteWriter,
    chunk: &Chunk,
    segments: &[Segment],
    route: impl Fn(u64) -> usize,
    config: &JoinConfig,
) -> Result<(), OlapError> {
    let tw = chunk.tuple_width();
    let cap = (config.buffer_bytes / tw) * tw;
    let mut buffers: Vec<Vec<u8>> = vec![Vec::new(); segments.len()];
    let mut filled = vec![0u64; segments.len()];
    let mut flush = |writer: &mut RemoteWriter, g: usize, buf: &mut Vec<u8>, last: bool| -> Result<(), OlapError> {
        let seg = segments[g];
        if filled[g] + buf.len() as u64 > seg.capacity {
            return Err(OlapError::RegionOverflow { what: "partition segment", node: seg.addr.node });
        }
        let payload = std::mem::replace(buf, Vec::with_capacity(cap));
        filled[g] += payload.len() as u64;
        writer.write(seg.addr.add(filled[g] - payload.len() as u64), payload, last)
    };
    for i in 0..chunk.len() {
        let g = route(chunk.keys[i]);
        chunk.encode_tuple(i, &mut buffers[g]);
        if buffers[g].len() >= cap {
            let mut b = std::mem::take(&mut buffers[g]);
            flush(writer, g, &mut b, false)?;
            buffers[g] = b;
        }
    }
    for (g, buf) in buffers.iter_mut().enumerate() {
        if !buf.is_empty() {
            flush(writer, g, buf, true)?;
            writer.stats.final_flushes += 1;
        }
    }
    Ok(())
}

fn histogram(chunk: &Chunk, parts: usize, route: impl Fn(u64) -> usize) -> Vec<u64> {
    let mut h = vec![0u64; parts];
    for &k in &chunk.keys {
        h[route(k)] += 1;
    }
    h
}

/// Partitions both relations into storage-node memory with one-sided
/// WRITEs, then lets every compute node read back and join its share.
/// `fanout` radix partitions are kept per node; with `fanout == 1` the
/// join phase partitions locally instead.
fn one_sided_join(
    cluster: &Cluster,
    r: &Relation,
    s: &Relation,
    config: &JoinConfig,
    fanout: usize,
) -> Result<JoinOutput, OlapError> {
    let nodes = cluster.nodes();
    let (t0, start) = (Instant::now(), cluster.fabric.metrics());
    let seed = config.seed;
    let route = move |k: u64| node_of(k, seed, nodes) * fanout + radix_of(k, seed, fanout);
    let parts = nodes * fanout;

    let mut layouts = Vec::new();
    let mut flushes = FlushStats::default();
    let mut shuffled = 0;
    let mut shuffled_bytes = 0;
    let mut retained = 0;
    for rel in [r, s] {
        let counts: Vec<Vec<u64>> = rel.parts.iter().map(|c| histogram(c, parts, route)).collect();
        for (i, row) in counts.iter().enumerate() {
            let own: u64 = row[i * fanout..(i + 1) * fanout].iter().sum();
            let away = row.iter().sum::<u64>() - own;
            retained += own;
            shuffled += away;
            shuffled_bytes += away * rel.tuple_width() as u64;
        }
        let segments = reserve(cluster, &counts, fanout, rel.tuple_width() as u64)?;
        let results: Vec<Result<FlushStats, OlapError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = rel
                .parts
                .iter()
                .zip(&segments)
                .enumerate()
                .map(|(i, (chunk, segs))| {
                    let session = cluster.fabric.open_session(cluster.compute[i]);
                    scope.spawn(move || {
                        let mut w = RemoteWriter::new(session, config.signal_every);
                        scatter(&mut w, chunk, segs, route, config)?;
                        Ok(w.stats)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("partition worker")).collect()
        });
        for r in results {
            flushes += r?;
        }
        layouts.push((segments, rel.payload_width));
    }
    let partition_metrics = cluster.fabric.metrics().since(&start);

    // Join phase: node j pulls partition (j, x) from every sender.
    let results: Vec<Result<Vec<JoinMatch>, OlapError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..nodes)
            .map(|j| {
                let mut session = cluster.fabric.open_session(cluster.compute[j]);
                let layouts = &layouts;
                scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut fetch = |which: usize, x: usize| -> Result<Chunk, OlapError> {
                        let (segments, width) = &layouts[which];
                        let mut c = Chunk::new(*width);
                        for segs in segments {
                            let seg = segs[j * fanout + x];
                            if seg.capacity > 0 {
                                c.extend_from_wire(&session.read(seg.addr, seg.capacity)?);
                            }
                        }
                        Ok(c)
                    };
                    for x in 0..fanout {
                        let (rc, sc) = (fetch(0, x)?, fetch(1, x)?);
                        if fanout == 1 {
                            out.extend(local_radix_join(&rc, &sc, config));
                        } else {
                            build_probe(&rc, &sc, &mut out);
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("join worker")).collect()
    });
    let mut matches = Vec::new();
    for r in results {
        matches.extend(r?);
    }
    Ok(JoinOutput {
        matches: canonical(matches),
        metrics: cluster.fabric.metrics().since(&start),
        partition_metrics,
        shuffled_tuples: shuffled,
        shuffled_bytes,
        retained_tuples: retained,
        passed_filter: None,
        fanout,
        flushes,
        wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// GHJ whose shuffle writes straight into storage-node memory; only the
/// sender's CPU works during partitioning.
pub fn rdma_ghj(cluster: &Cluster, r: &Relation, s: &Relation, config: &JoinConfig) -> Result<JoinOutput, OlapError> {
    prepare(cluster, r, s, config)?;
    if cluster.nodes() > config.max_fanout() {
        return Err(OlapError::Config(format!("{} staging buffers exceed the L3 budget", cluster.nodes())));
    }
    let mut out = one_sided_join(cluster, r, s, config, 1)?;
    out.fanout = radix_fanout(r.bytes().div_ceil(cluster.nodes() as u64), config.cache_bytes, config.max_fanout());
    Ok(out)
}

/// RDMA radix join: a single remote radix pass with fan-out `nodes * F`
/// into software-managed buffers, then build/probe per cache-sized
/// partition.
pub fn rrj(cluster: &Cluster, r: &Relation, s: &Relation, config: &JoinConfig) -> Result<JoinOutput, OlapError> {
    prepare(cluster, r, s, config)?;
    let nodes = cluster.nodes();
    let per_node = config.max_fanout() / nodes;
    if per_node == 0 {
        return Err(OlapError::Config(format!("{nodes} staging buffers exceed the L3 budget")));
    }
    let fanout = radix_fanout(r.bytes().div_ceil(nodes as u64), config.cache_bytes, per_node);
    debug_assert!(nodes * fanout * config.buffer_bytes <= config.l3_budget);
    one_sided_join(cluster, r, s, config, fanout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::Verb;
    use crate::olap::oracle::nested_loop_join;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Algo = fn(&Cluster, &Relation, &Relation, &JoinConfig) -> Result<JoinOutput, OlapError>;
    const ALGOS: [(&str, Algo); 4] = [("ghj", ghj), ("ghj_bloom", ghj_bloom), ("rdma_ghj", rdma_ghj), ("rrj", rrj)];

    fn random_relation(rng: &mut ChaCha8Rng, n: usize, key_space: u64, nodes: usize, tag: u8) -> Relation {
        let tuples: Vec<(u64, [u8; 8])> = (0..n)
            .map(|i| {
                let mut p = (i as u64).to_le_bytes();
                p[7] = tag;
                (rng.gen_range(0..key_space), p)
            })
            .collect();
        Relation::round_robin(8, nodes, tuples.iter().map(|(k, p)| (*k, &p[..])))
    }

    fn keys_only(keys: &[u64], nodes: usize) -> Relation {
        Relation::round_robin(0, nodes, keys.iter().map(|&k| (k, &[][..])))
    }

    #[test]
    fn tiny_local_join() {
        let r = keys_only(&[1, 2, 3], 1);
        let s = keys_only(&[2, 3, 4], 1);
        let m = canonical(local_radix_join(&r.parts[0], &s.parts[0], &JoinConfig::default()));
        assert_eq!(m.iter().map(|m| m.key).collect::<Vec<_>>(), vec![2, 3]);
        let empty = Chunk::new(0);
        assert!(local_radix_join(&r.parts[0], &empty, &JoinConfig::default()).is_empty());
    }

    #[test]
    fn local_join_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_relation(&mut rng, 10_000, 5_000, 1, 1);
        let s = random_relation(&mut rng, 10_000, 5_000, 1, 2);
        let config = JoinConfig { cache_bytes: 4096, ..JoinConfig::default() };
        let got = canonical(local_radix_join(&r.parts[0], &s.parts[0], &config));
        assert_eq!(got, nested_loop_join(&r, &s));
    }

    #[test]
    fn fanout_rule() {
        assert_eq!(radix_fanout(0, 1024, 8192), 1);
        assert_eq!(radix_fanout(3000, 1024, 8192), 4);
        assert_eq!(radix_fanout(1 << 40, 1024, 8192), 8192);
        assert_eq!(radix_fanout(1 << 40, 1024, 100), 64);
        assert_eq!(JoinConfig::default().max_fanout(), 8192);
    }

    #[test]
    fn all_algorithms_match_oracle_on_four_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_relation(&mut rng, 10_000, 20_000, 4, 1);
        let s = random_relation(&mut rng, 10_000, 20_000, 4, 2);
        let want = nested_loop_join(&r, &s);
        assert!(!want.is_empty());
        let config = JoinConfig { cache_bytes: 8 * 1024, ..JoinConfig::default() };
        for (name, algo) in ALGOS {
            for t in [Transport::Rdma, Transport::IpoEth] {
                let out = algo(&Cluster::new(4), &r, &s, &JoinConfig { transport: t, ..config }).unwrap();
                assert_eq!(out.matches, want, "{name} over {t}");
            }
        }
    }

    #[test]
    fn co_partitioned_inputs_stay_put() {
        let config = JoinConfig::default();
        let keys: Vec<u64> = (0..400).collect();
        let mut r = Relation::new(0, 4);
        for &k in &keys {
            r.parts[node_of(k, config.seed, 4)].push(k, &[]);
        }
        let cluster = Cluster::new(4);
        let out = ghj(&cluster, &r, &r, &config).unwrap();
        assert_eq!(out.shuffled_tuples, 0);
        assert_eq!(out.retained_tuples, 800);
        assert_eq!(out.partition_metrics.total().verb(Verb::Send), 0);
        let union: Vec<JoinMatch> =
            canonical(r.parts.iter().flat_map(|c| local_radix_join(c, c, &config)).collect());
        assert_eq!(out.matches, union);
        assert_eq!(out.matches.len(), 400);
    }

    #[test]
    fn shuffle_accounting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_relation(&mut rng, 3_000, 1_000, 3, 1);
        let s = random_relation(&mut rng, 2_000, 1_000, 3, 2);
        let cluster = Cluster::new(3);
        let out = ghj(&cluster, &r, &s, &JoinConfig::default()).unwrap();
        assert_eq!(out.shuffled_tuples + out.retained_tuples, 5_000);
        assert_eq!(out.shuffled_bytes, out.shuffled_tuples * 16);
        let total = out.partition_metrics.total();
        assert_eq!(total.bytes_sent, r.bytes() + s.bytes() - out.retained_tuples * 16);
        assert_eq!(total.verb(Verb::Send), total.verb(Verb::Receive));
        assert!(total.server_cycles > 0);
    }

    #[test]
    fn bloom_reduction_extremes() {
        let cluster = Cluster::new(2);
        let r = keys_only(&(0..2_000).collect::<Vec<_>>(), 2);
        let s = keys_only(&(10_000..12_000).collect::<Vec<_>>(), 2);
        let config = JoinConfig { epsilon: 0.001, ..JoinConfig::default() };
        let out = ghj_bloom(&cluster, &r, &s, &config).unwrap();
        assert!(out.matches.is_empty());
        assert!(out.passed_filter.unwrap() < 20, "{:?}", out.passed_filter);
        let same = ghj_bloom(&Cluster::new(2), &r, &r, &config).unwrap();
        assert_eq!(same.passed_filter, Some(4_000));
        assert_eq!(same.matches, nested_loop_join(&r, &r));
    }

    #[test]
    fn bloom_half_selectivity() {
        // Half of each side has a partner; with eps 0.1 about 55% pass.
        let n = 20_000u64;
        let r: Vec<u64> = (0..n).collect();
        let s: Vec<u64> = (n / 2..n + n / 2).collect();
        let out = ghj_bloom(&Cluster::new(4), &keys_only(&r, 4), &keys_only(&s, 4), &JoinConfig::default()).unwrap();
        let frac = out.passed_filter.unwrap() as f64 / (2 * n) as f64;
        assert!((0.53..0.57).contains(&frac), "{frac}");
        assert_eq!(out.matches.len(), (n / 2) as usize);
    }

    #[test]
    fn one_sided_shuffles_spare_the_storage_cpu() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_relation(&mut rng, 5_000, 3_000, 4, 1);
        let s = random_relation(&mut rng, 5_000, 3_000, 4, 2);
        for (name, algo) in [("rdma_ghj", rdma_ghj as Algo), ("rrj", rrj)] {
            let cluster = Cluster::new(4);
            let out = algo(&cluster, &r, &s, &JoinConfig { cache_bytes: 4096, ..JoinConfig::default() }).unwrap();
            let part = out.partition_metrics.total();
            assert_eq!(part.server_cycles, 0, "{name}");
            assert_eq!(part.verb(Verb::Send) + part.verb(Verb::Receive), 0, "{name}");
            assert_eq!(out.metrics.total().server_cycles, 0, "{name}");
            assert_eq!(part.bytes_sent, r.bytes() + s.bytes());
            let f = out.flushes;
            assert!(f.largest_write <= 2048, "{name}");
            assert!(f.signaled >= f.final_flushes && f.final_flushes > 0);
            assert!(f.signaled <= f.final_flushes + f.writes / 16 * 4, "{name}");
            assert_eq!(part.verb(Verb::Write), f.writes);
            if name == "rdma_ghj" {
                assert!(f.signaled < f.writes, "{f:?}");
            }
        }
    }

    #[test]
    fn rrj_fanout_fits_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_relation(&mut rng, 20_000, 10_000, 2, 1);
        let s = random_relation(&mut rng, 100, 10_000, 2, 2);
        let config = JoinConfig { cache_bytes: 1024, l3_budget: 64 * 2048, ..JoinConfig::default() };
        let out = rrj(&Cluster::new(2), &r, &s, &config).unwrap();
        assert_eq!(out.fanout, 32);
        assert!(2 * out.fanout * config.buffer_bytes <= config.l3_budget);
        assert_eq!(out.matches, nested_loop_join(&r, &s));
        let tight = JoinConfig { l3_budget: 2048, ..config };
        assert!(matches!(rrj(&Cluster::new(2), &r, &s, &tight), Err(OlapError::Config(_))));
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let r = keys_only(&[1, 2], 2);
        let e = Relation::new(0, 2);
        for (name, algo) in ALGOS {
            assert!(algo(&Cluster::new(2), &r, &e, &JoinConfig::default()).unwrap().matches.is_empty(), "{name}");
            assert!(matches!(
                algo(&Cluster::new(3), &r, &e, &JoinConfig::default()),
                Err(OlapError::Partitions { got: 2, nodes: 3 })
            ));
        }
    }
}
