//! Latency and CPU-cycle model for the simulated transports.
//!
//! Published measurements are embedded as exact anchor points. Between two
//! anchors the one-way latency is interpolated linearly in `ln(size)`. The
//! remaining anchors are derived from an affine "flat until threshold, then
//! bandwidth bound" curve sampled at every power of two from 8 B to 32 MiB,
//! fitted so that it passes through the published 1 MiB points.

use std::fmt;
use std::str::FromStr;

use super::Verb;

const MIB: u64 = 1024 * 1024;

/// Network stack a verb or message travels over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transport {
    /// InfiniBand verbs.
    Rdma,
    /// TCP/IP over InfiniBand.
    IpoIb,
    /// TCP/IP over 1 Gbps Ethernet.
    IpoEth,
}

impl Transport {
    pub const ALL: [Transport; 3] = [Transport::IpoEth, Transport::IpoIb, Transport::Rdma];

    pub fn name(self) -> &'static str {
        match self {
            Transport::Rdma => "rdma",
            Transport::IpoIb => "ipoib",
            Transport::IpoEth => "ipoeth",
        }
    }

    /// Whether one-sided verbs (READ, WRITE, atomics) are available.
    pub fn supports_one_sided(self) -> bool {
        matches!(self, Transport::Rdma)
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rdma" => Ok(Transport::Rdma),
            "ipoib" => Ok(Transport::IpoIb),
            "ipoeth" | "eth" | "ethernet" => Ok(Transport::IpoEth),
            other => Err(format!("unknown transport `{other}`")),
        }
    }
}

/// Which end of a verb is being charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    /// The node that posted the verb.
    Client,
    /// The passive peer.
    Server,
}

/// Shape used to derive anchors that were not published.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveShape {
    /// Latency for every size up to `flat_until`.
    pub flat_latency: f64,
    pub flat_until: u64,
    /// Slope beyond the flat region.
    pub bytes_per_second: f64,
}

impl CurveShape {
    /// Fits the slope so the curve passes exactly through `(size, latency)`.
    pub fn through(flat_latency: f64, flat_until: u64, size: u64, latency: f64) -> Self {
        let bytes_per_second = (size - flat_until) as f64 / (latency - flat_latency);
        CurveShape { flat_latency, flat_until, bytes_per_second }
    }

    pub fn eval(&self, size: u64) -> f64 {
        if size <= self.flat_until {
            self.flat_latency
        } else {
            self.flat_latency + (size - self.flat_until) as f64 / self.bytes_per_second
        }
    }
}

/// Monotone anchor table with log-linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorCurve {
    points: Vec<(u64, f64)>,
    tail_bytes_per_second: f64,
}

impl AnchorCurve {
    /// Samples `shape` at powers of two (8 B .. 32 MiB) and overlays the
    /// `published` points, which always win.
    pub fn new(shape: CurveShape, published: &[(u64, f64)]) -> Self {
        let mut points: Vec<(u64, f64)> = (3..=25).map(|e| (1u64 << e, shape.eval(1 << e))).collect();
        for &(size, latency) in published {
            match points.binary_search_by_key(&size, |p| p.0) {
                Ok(i) => points[i].1 = latency,
                Err(i) => points.insert(i, (size, latency)),
            }
        }
        debug_assert!(points.windows(2).all(|w| w[0].1 <= w[1].1), "anchors must be monotone");
        AnchorCurve { points, tail_bytes_per_second: shape.bytes_per_second }
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn eval(&self, size: u64) -> f64 {
        let first = self.points[0];
        if size <= first.0 {
            return first.1;
        }
        let last = *self.points.last().expect("non-empty anchors");
        if size >= last.0 {
            return last.1 + (size - last.0) as f64 / self.tail_bytes_per_second;
        }
        let i = self.points.partition_point(|p| p.0 <= size);
        let (s0, l0) = self.points[i - 1];
        if s0 == size {
            return l0;
        }
        let (s1, l1) = self.points[i];
        let t = ((size as f64).ln() - (s0 as f64).ln()) / ((s1 as f64).ln() - (s0 as f64).ln());
        l0 + t * (l1 - l0)
    }
}

/// Per-message CPU overhead of a TCP/IP stack: flat up to the TCP window,
/// then proportional to the message size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcpCycles {
    pub base_cycles: u64,
    pub window_bytes: u64,
}

impl TcpCycles {
    pub fn cycles(&self, size: u64) -> u64 {
        if size <= self.window_bytes {
            self.base_cycles
        } else {
            ((self.base_cycles as u128 * size as u128).div_ceil(self.window_bytes as u128)) as u64
        }
    }
}

/// Latency and CPU model for all three transports.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyModel {
    /// RDMA WRITE / SEND / RECEIVE.
    pub rdma_write: AnchorCurve,
    /// RDMA READ and the 8 B atomics, which behave like 8 B READs.
    pub rdma_read: AnchorCurve,
    pub ipoib: AnchorCurve,
    pub ipoeth: AnchorCurve,
    /// Client-side cycles per RDMA verb, independent of size and verb.
    pub rdma_cycles: u64,
    pub ipoib_cycles: TcpCycles,
    pub ipoeth_cycles: TcpCycles,
    /// Clock rate used to turn cycles into seconds.
    pub cpu_hz: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        let us = 1e-6;
        let rdma_write_shape = CurveShape::through(1.0 * us, 256, MIB, 161.0 * us);
        let rdma_read_shape = CurveShape::through(2.0 * us, 256, MIB, 161.0 * us);
        let ipoib_shape = CurveShape::through(20.0 * us, 8, MIB, 393.0 * us);
        // 1 Gbps Ethernet; no large-message latency was published.
        let ipoeth_shape = CurveShape { flat_latency: 30.0 * us, flat_until: 8, bytes_per_second: 125e6 };
        LatencyModel {
            rdma_write: AnchorCurve::new(rdma_write_shape, &[(8, 1.0 * us), (256, 1.0 * us), (MIB, 161.0 * us)]),
            rdma_read: AnchorCurve::new(rdma_read_shape, &[(8, 2.0 * us), (256, 2.0 * us), (MIB, 161.0 * us)]),
            ipoib: AnchorCurve::new(ipoib_shape, &[(8, 20.0 * us), (MIB, 393.0 * us)]),
            ipoeth: AnchorCurve::new(ipoeth_shape, &[(8, 30.0 * us)]),
            rdma_cycles: 450,
            ipoib_cycles: TcpCycles { base_cycles: 13264, window_bytes: 21888 },
            ipoeth_cycles: TcpCycles { base_cycles: 7544, window_bytes: 1488 },
            cpu_hz: 2.2e9,
        }
    }
}

impl LatencyModel {
    /// One-way latency in seconds of a `size_bytes` verb or message.
    pub fn latency(&self, transport: Transport, verb: Verb, size_bytes: u64) -> f64 {
        let size = size_bytes.max(1);
        match transport {
            Transport::Rdma => match verb {
                Verb::Read | Verb::Cas | Verb::FetchAdd => self.rdma_read.eval(size),
                Verb::Write | Verb::Send | Verb::Receive => self.rdma_write.eval(size),
            },
            Transport::IpoIb => self.ipoib.eval(size),
            Transport::IpoEth => self.ipoeth.eval(size),
        }
    }

    /// CPU cycles charged to one side of a verb. The passive side of a
    /// one-sided verb pays nothing; everything else pays the transport's
    /// per-message cost.
    pub fn cpu_cycles(&self, transport: Transport, verb: Verb, size_bytes: u64, side: Side) -> u64 {
        if side == Side::Server && verb.is_one_sided() {
            return 0;
        }
        match transport {
            Transport::Rdma => self.rdma_cycles,
            Transport::IpoIb => self.ipoib_cycles.cycles(size_bytes),
            Transport::IpoEth => self.ipoeth_cycles.cycles(size_bytes),
        }
    }

    pub fn cycles_to_seconds(&self, cycles: u64) -> f64 {
        cycles as f64 / self.cpu_hz
    }

    /// Mutable access to the anchor curve used by a transport/verb pair,
    /// for configuration overrides.
    pub fn curve_mut(&mut self, transport: Transport, verb: Verb) -> &mut AnchorCurve {
        match transport {
            Transport::Rdma => match verb {
                Verb::Read | Verb::Cas | Verb::FetchAdd => &mut self.rdma_read,
                _ => &mut self.rdma_write,
            },
            Transport::IpoIb => &mut self.ipoib,
            Transport::IpoEth => &mut self.ipoeth,
        }
    }

    /// Rebuilds one transport's curves from an affine shape, keeping the
    /// published anchors that still lie on a monotone curve.
    pub fn override_shape(&mut self, transport: Transport, flat_latency: f64, bytes_per_second: f64) {
        let shape = |flat_until| CurveShape { flat_latency, flat_until, bytes_per_second };
        match transport {
            Transport::Rdma => {
                self.rdma_write = AnchorCurve::new(shape(256), &[]);
                self.rdma_read = AnchorCurve::new(shape(256), &[]);
            }
            Transport::IpoIb => self.ipoib = AnchorCurve::new(shape(8), &[]),
            Transport::IpoEth => self.ipoeth = AnchorCurve::new(shape(8), &[]),
        }
    }
}
