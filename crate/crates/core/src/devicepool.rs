//! Device discovery: measure response times, drop slow or silent devices,
//! order slowest first and hand devices to grid cells.
//!
//! Sending to the slowest devices first lets their latency overlap with the
//! rest of the send loop, so a sweep finishes in roughly
//! `max(send time, slowest latency)` instead of their sum.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icmp::{EchoKind, EchoMessage};
use crate::ocarith::OcWord;
use crate::responder::ResponderBehavior;
use crate::transport::{
    ms_to_us, DeviceAddress, EchoTransport, LatencyModel, NetworkConfig, SimDevice, SimNetwork,
    TransportError,
};

/// Devices slower than this on average are not used.
pub const DEFAULT_CUTOFF_MS: f64 = 10_000.0;
pub const DEFAULT_PROBES: u32 = 3;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("no usable devices after filtering")]
    NoUsableDevices,
    #[error("{needed} cells need devices but only {available} are usable")]
    InsufficientDevices { needed: usize, available: usize },
    #[error("device {0} appears twice")]
    DuplicateDevice(DeviceAddress),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("histogram needs at least one bin with increasing edges")]
    BadBins,
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// One candidate device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub address: DeviceAddress,
    pub behavior: ResponderBehavior,
    /// How the simulated device behaves; unused over UDP.
    pub latency: LatencyModel,
    /// Mean of the answered probes; `None` until measured or if all were lost.
    pub measured_mean_ms: Option<f64>,
    pub probes_answered: u32,
}

impl DeviceProfile {
    pub fn new(address: DeviceAddress, behavior: ResponderBehavior, latency: LatencyModel) -> Self {
        DeviceProfile {
            address,
            behavior,
            latency,
            measured_mean_ms: None,
            probes_answered: 0,
        }
    }

    pub fn usable(&self, cutoff_ms: f64) -> bool {
        self.measured_mean_ms.is_some_and(|m| m <= cutoff_ms)
    }
}

/// Spread of per-device median latencies in a synthetic pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolShape {
    /// Median over devices of each device's median round trip.
    pub median_ms: f64,
    /// Log-normal shape across devices.
    pub sigma: f64,
    /// Log-normal shape of each device's own jitter.
    pub jitter: f64,
}

impl Default for PoolShape {
    /// From a few milliseconds to tens of seconds; about 1.5% of devices
    /// average above ten seconds.
    fn default() -> Self {
        PoolShape { median_ms: 200.0, sigma: 1.8, jitter: 0.25 }
    }
}

/// `count` devices with addresses `0..count`. `mix` is `(V, NV)`: address
/// `a` validates when `a mod (V + NV) < V`.
pub fn synthetic_pool(count: usize, shape: &PoolShape, mix: (u32, u32), seed: u64) -> Vec<DeviceProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = LogNormal::new(shape.median_ms.max(1e-3).ln(), shape.sigma.max(0.0))
        .expect("finite parameters");
    let total = (mix.0 + mix.1).max(1) as u64;
    (0..count as u64)
        .map(|a| {
            let behavior = if a % total < mix.0 as u64 {
                ResponderBehavior::Validating
            } else {
                ResponderBehavior::NonValidating
            };
            let median = spread.sample(&mut rng);
            DeviceProfile::new(DeviceAddress(a), behavior, LatencyModel::log_normal(median, shape.jitter))
        })
        .collect()
}

/// Simulated network holding every device in `pool` with its own latency.
pub fn network_for(pool: &[DeviceProfile], config: NetworkConfig) -> Result<SimNetwork, TransportError> {
    SimNetwork::with_devices(
        config,
        pool.iter().map(|d| (d.address, SimDevice::with_latency(d.behavior, d.latency))),
    )
}

/// Valid echo request used for timing; any responder answers it.
fn timing_probe(round: u32, index: usize) -> EchoMessage {
    EchoMessage::request(OcWord(round as u16), OcWord(index as u16), vec![OcWord(0x1CB5)]).seal()
}

/// Sends `probes` rounds of valid echo requests to every device and records
/// the mean round-trip time of the answered ones. Replies arriving more than
/// `timeout_ms` after the last send are ignored.
pub fn measure_response_times<T: EchoTransport>(
    pool: &mut [DeviceProfile],
    transport: &mut T,
    probes: u32,
    timeout_ms: f64,
) -> Result<(), PoolError> {
    let mut sent_at: HashMap<(DeviceAddress, u16, u16), u64> = HashMap::with_capacity(pool.len() * probes as usize);
    let index: HashMap<DeviceAddress, usize> = pool.iter().enumerate().map(|(i, d)| (d.address, i)).collect();
    let mut total = vec![0.0f64; pool.len()];
    let mut answered = vec![0u32; pool.len()];

    let mut absorb = |batch: Vec<crate::transport::Delivered>, sent_at: &mut HashMap<_, u64>| {
        for d in batch {
            let Ok(reply) = EchoMessage::decode(&d.payload) else { continue };
            if reply.kind != EchoKind::Reply || !reply.validate() {
                continue;
            }
            let key = (d.address, reply.identifier.0, reply.sequence.0);
            // first copy only; duplicates find the key gone
            if let Some(t0) = sent_at.remove(&key) {
                let i = index[&d.address];
                total[i] += d.at_us.saturating_sub(t0) as f64 / 1000.0;
                answered[i] += 1;
            }
        }
    };

    for round in 0..probes {
        for (i, dev) in pool.iter().enumerate() {
            let probe = timing_probe(round, i);
            sent_at.insert((dev.address, probe.identifier.0, probe.sequence.0), transport.now_us());
            transport.send_request(dev.address, &probe.encode())?;
        }
        let now = transport.now_us();
        absorb(transport.wait_for_replies(now), &mut sent_at);
    }
    let deadline = transport.now_us() + ms_to_us(timeout_ms);
    while !sent_at.is_empty() {
        let batch = transport.wait_for_replies(deadline);
        if batch.is_empty() {
            break;
        }
        absorb(batch, &mut sent_at);
    }

    for (i, dev) in pool.iter_mut().enumerate() {
        dev.probes_answered = answered[i];
        dev.measured_mean_ms = (answered[i] > 0).then(|| total[i] / answered[i] as f64);
    }
    Ok(())
}

/// Keeps devices that answered with a mean at or below `cutoff_ms`, ordered
/// by decreasing mean, ties by address.
pub fn filter_and_order(pool: &[DeviceProfile], cutoff_ms: f64) -> Result<Vec<DeviceProfile>, PoolError> {
    let mut kept: Vec<DeviceProfile> = pool.iter().filter(|d| d.usable(cutoff_ms)).cloned().collect();
    if kept.is_empty() {
        return Err(PoolError::NoUsableDevices);
    }
    kept.sort_by(|a, b| {
        let (ma, mb) = (a.measured_mean_ms.unwrap_or(0.0), b.measured_mean_ms.unwrap_or(0.0));
        mb.total_cmp(&ma).then(a.address.cmp(&b.address))
    });
    Ok(kept)
}

/// Injective cell-to-device map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellAssignment {
    width: usize,
    height: usize,
    devices: Vec<DeviceAddress>,
    cell_of: HashMap<DeviceAddress, usize>,
}

impl CellAssignment {
    pub fn new(width: usize, height: usize, devices: Vec<DeviceAddress>) -> Result<Self, PoolError> {
        let needed = width * height;
        if devices.len() != needed {
            return Err(PoolError::InsufficientDevices { needed, available: devices.len() });
        }
        let mut cell_of = HashMap::with_capacity(needed);
        for (i, &a) in devices.iter().enumerate() {
            if cell_of.insert(a, i).is_some() {
                return Err(PoolError::DuplicateDevice(a));
            }
        }
        Ok(CellAssignment { width, height, devices, cell_of })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn device(&self, row: usize, col: usize) -> DeviceAddress {
        self.devices[row * self.width + col]
    }

    pub fn device_at(&self, index: usize) -> DeviceAddress {
        self.devices[index]
    }

    pub fn cell_of(&self, address: DeviceAddress) -> Option<usize> {
        self.cell_of.get(&address).copied()
    }

    pub fn devices(&self) -> &[DeviceAddress] {
        &self.devices
    }
}

/// Assigns devices to cells in row-major order. `ordered` is slowest first;
/// when it holds more devices than cells, the fastest ones are used, still
/// slowest first.
pub fn assign_to_cells(ordered: &[DeviceProfile], width: usize, height: usize) -> Result<CellAssignment, PoolError> {
    let needed = width * height;
    if ordered.len() < needed {
        return Err(PoolError::InsufficientDevices { needed, available: ordered.len() });
    }
    let chosen = ordered[ordered.len() - needed..].iter().map(|d| d.address).collect();
    CellAssignment::new(width, height, chosen)
}

/// Counts over half-open bins `[e_i, e_{i+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub below: u64,
    pub above: u64,
}

impl Histogram {
    pub fn new(edges: Vec<f64>) -> Result<Self, PoolError> {
        if edges.len() < 2 || edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            return Err(PoolError::BadBins);
        }
        let counts = vec![0; edges.len() - 1];
        Ok(Histogram { edges, counts, below: 0, above: 0 })
    }

    pub fn add(&mut self, x: f64) {
        let last = *self.edges.last().expect("at least two edges");
        if x < self.edges[0] {
            self.below += 1;
        } else if x >= last {
            self.above += 1;
        } else {
            let bin = self.edges.partition_point(|&e| e <= x) - 1;
            self.counts[bin] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.below + self.above
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lower_ms,upper_ms,count\n");
        for (w, c) in self.edges.windows(2).zip(&self.counts) {
            let _ = writeln!(s, "{},{},{}", w[0], w[1], c);
        }
        s
    }
}

/// `per_decade` logarithmic bins from `lo` to `hi`.
pub fn log_bins(lo: f64, hi: f64, per_decade: usize) -> Result<Vec<f64>, PoolError> {
    if !(lo > 0.0 && hi > lo && per_decade > 0) {
        return Err(PoolError::BadBins);
    }
    let n = ((hi / lo).log10() * per_decade as f64).ceil() as usize;
    Ok((0..=n)
        .map(|i| lo * 10f64.powf(i as f64 / per_decade as f64))
        .collect())
}

/// Histogram of measured means; unmeasured devices are skipped.
pub fn histogram(pool: &[DeviceProfile], edges: Vec<f64>) -> Result<Histogram, PoolError> {
    let mut h = Histogram::new(edges)?;
    for m in pool.iter().filter_map(|d| d.measured_mean_ms) {
        h.add(m);
    }
    Ok(h)
}

/// Parses `address, behavior, median_ms, shape` lines. Blank lines and
/// `#` comments are skipped. `median_ms` and `shape` are optional.
pub fn parse_device_file(text: &str) -> Result<Vec<DeviceProfile>, PoolError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| PoolError::Parse { line: n + 1, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(err(format!("expected 2 to 4 fields, found {}", fields.len())));
        }
        let address: DeviceAddress = fields[0].parse().map_err(|e| err(format!("address: {e}")))?;
        let behavior: ResponderBehavior = fields[1].parse().map_err(err)?;
        let default = LatencyModel::default();
        let median_ms = match fields.get(2) {
            Some(f) => f.parse().map_err(|e| err(format!("median_ms: {e}")))?,
            None => default.median_ms,
        };
        let shape = match fields.get(3) {
            Some(f) => f.parse().map_err(|e| err(format!("shape: {e}")))?,
            None => default.shape,
        };
        if !(median_ms >= 0.0 && shape >= 0.0) {
            return Err(err("latency parameters must be non-negative".into()));
        }
        if !seen.insert(address) {
            return Err(PoolError::DuplicateDevice(address));
        }
        out.push(DeviceProfile::new(address, behavior, LatencyModel::log_normal(median_ms, shape)));
    }
    Ok(out)
}

pub fn write_device_file(pool: &[DeviceProfile]) -> String {
    let mut s = String::from("# address, behavior, median_ms, shape\n");
    for d in pool {
        let _ = writeln!(s, "{}, {}, {}, {}", d.address, d.behavior.as_str(), d.latency.median_ms, d.latency.shape);
    }
    s
}

/// Timing of one request per device sent in a given order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepTiming {
    pub send_duration_ms: f64,
    /// From the first send to the last reply.
    pub completion_ms: f64,
    pub replies: usize,
}

/// Sends one valid request to each device in `order`, pausing
/// `send_interval_ms` after each, and waits for all replies.
pub fn sweep<T: EchoTransport>(
    transport: &mut T,
    order: &[DeviceAddress],
    send_interval_ms: f64,
    timeout_ms: f64,
) -> Result<SweepTiming, PoolError> {
    let start = transport.now_us();
    let mut expected: HashMap<DeviceAddress, EchoMessage> = HashMap::with_capacity(order.len());
    for (i, &a) in order.iter().enumerate() {
        let probe = timing_probe(u32::MAX, i);
        transport.send_request(a, &probe.encode())?;
        expected.insert(a, probe);
        transport.pause(ms_to_us(send_interval_ms));
    }
    let send_done = transport.now_us();
    let deadline = send_done + ms_to_us(timeout_ms);
    let mut last = start;
    let mut replies = 0;
    while !expected.is_empty() {
        let batch = transport.wait_for_replies(deadline);
        if batch.is_empty() {
            break;
        }
        for d in batch {
            let Ok(reply) = EchoMessage::decode(&d.payload) else { continue };
            let matches = expected.get(&d.address).is_some_and(|p| reply.validate() && p.same_payload(&reply));
            if matches {
                expected.remove(&d.address);
                replies += 1;
                last = last.max(d.at_us);
            }
        }
    }
    Ok(SweepTiming {
        send_duration_ms: (send_done - start) as f64 / 1000.0,
        completion_ms: (last - start) as f64 / 1000.0,
        replies,
    })
}

/// Random sample of the pool used by tests and the CLI.
pub fn sample_pool<R: Rng + ?Sized>(pool: &[DeviceProfile], n: usize, rng: &mut R) -> Vec<DeviceProfile> {
    rand::seq::index::sample(rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn measured(address: u64, mean: Option<f64>) -> DeviceProfile {
        let mut d = DeviceProfile::new(DeviceAddress(address), ResponderBehavior::Validating, LatencyModel::fixed(1.0));
        d.measured_mean_ms = mean;
        d
    }

    #[test]
    fn filter_example() {
        let pool = vec![measured(1, Some(12.0)), measured(2, Some(15_000.0)), measured(3, Some(400.0))];
        let kept = filter_and_order(&pool, DEFAULT_CUTOFF_MS).unwrap();
        let order: Vec<u64> = kept.iter().map(|d| d.address.0).collect();
        assert_eq!(order, vec![3, 1]);
    }

    #[test]
    fn filter_ties_and_unmeasured() {
        let pool = vec![measured(9, Some(5.0)), measured(4, Some(5.0)), measured(7, None), measured(8, Some(10_000.0))];
        let order: Vec<u64> = filter_and_order(&pool, DEFAULT_CUTOFF_MS).unwrap().iter().map(|d| d.address.0).collect();
        assert_eq!(order, vec![8, 4, 9]);
        assert!(matches!(filter_and_order(&[measured(1, None)], 10.0), Err(PoolError::NoUsableDevices)));
    }

    #[test]
    fn assignment_uses_fastest_when_oversupplied() {
        let ordered: Vec<DeviceProfile> = (0..6).map(|i| measured(i, Some(100.0 - i as f64))).collect();
        let a = assign_to_cells(&ordered, 2, 2).unwrap();
        assert_eq!(a.devices(), &[DeviceAddress(2), DeviceAddress(3), DeviceAddress(4), DeviceAddress(5)]);
        assert_eq!(a.device(1, 0), DeviceAddress(4));
        assert_eq!(a.cell_of(DeviceAddress(5)), Some(3));
        assert!(matches!(
            assign_to_cells(&ordered, 3, 3),
            Err(PoolError::InsufficientDevices { needed: 9, available: 6 })
        ));
        assert!(matches!(
            CellAssignment::new(1, 2, vec![DeviceAddress(1), DeviceAddress(1)]),
            Err(PoolError::DuplicateDevice(_))
        ));
    }

    #[test]
    fn histogram_bins_are_half_open() {
        let mut h = Histogram::new(vec![0.0, 10.0, 20.0]).unwrap();
        for x in [-1.0, 0.0, 9.99, 10.0, 20.0, 20.5] {
            h.add(x);
        }
        assert_eq!(h.counts, vec![2, 1]);
        assert_eq!((h.below, h.above), (1, 2));
        assert_eq!(h.total(), 6);
        assert!(h.to_csv().starts_with("lower_ms,upper_ms,count\n0,10,2\n10,20,1\n"));
        assert!(Histogram::new(vec![1.0]).is_err());
        assert!(Histogram::new(vec![2.0, 1.0]).is_err());
    }

    #[test]
    fn log_bins_cover_range() {
        let e = log_bins(1.0, 1000.0, 2).unwrap();
        assert_eq!(e.len(), 7);
        assert!((e[2] - 10.0).abs() < 1e-9);
        assert!((e[6] - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn device_file_roundtrip() {
        let text = "# test\n1, validating, 12.5, 0.3\n2, nv # comment\n\n";
        let pool = parse_device_file(text).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool[1].behavior, ResponderBehavior::NonValidating);
        assert_eq!(pool[0].latency, LatencyModel::log_normal(12.5, 0.3));
        assert_eq!(parse_device_file(&write_device_file(&pool)).unwrap(), pool);
        assert!(matches!(parse_device_file("x, v"), Err(PoolError::Parse { line: 1, .. })));
        assert!(matches!(parse_device_file("1, v\n1, nv"), Err(PoolError::DuplicateDevice(_))));
        assert!(matches!(parse_device_file("1, maybe"), Err(PoolError::Parse { .. })));
    }

    #[test]
    fn measurement_matches_fixed_latency() {
        let pool_latencies = [5.0, 80.0, 12_000.0];
        let mut pool: Vec<DeviceProfile> = pool_latencies
            .iter()
            .enumerate()
            .map(|(i, &ms)| DeviceProfile::new(DeviceAddress(i as u64), ResponderBehavior::Validating, LatencyModel::fixed(ms)))
            .collect();
        pool.push(DeviceProfile::new(DeviceAddress(9), ResponderBehavior::Validating, LatencyModel::fixed(1.0)));
        let mut net = network_for(&pool[..3], NetworkConfig::lossless(1)).unwrap();
        // device 9 is not on the network: sending to it fails
        assert!(measure_response_times(&mut pool, &mut net, DEFAULT_PROBES, 60_000.0).is_err());
        pool.pop();
        measure_response_times(&mut pool, &mut net, DEFAULT_PROBES, 60_000.0).unwrap();
        for (d, &ms) in pool.iter().zip(&pool_latencies) {
            assert_eq!(d.probes_answered, DEFAULT_PROBES);
            assert!((d.measured_mean_ms.unwrap() - ms).abs() < 0.01);
        }
        let kept = filter_and_order(&pool, DEFAULT_CUTOFF_MS).unwrap();
        assert_eq!(kept.iter().map(|d| d.address.0).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn slowest_first_masks_latency() {
        let lat: Vec<f64> = (0..20).map(|i| 10.0 * (i + 1) as f64).collect();
        let pool: Vec<DeviceProfile> = lat
            .iter()
            .enumerate()
            .map(|(i, &ms)| DeviceProfile::new(DeviceAddress(i as u64), ResponderBehavior::Validating, LatencyModel::fixed(ms)))
            .collect();
        let mut slow_first: Vec<DeviceAddress> = pool.iter().map(|d| d.address).collect();
        slow_first.reverse();
        let fast_first: Vec<DeviceAddress> = pool.iter().map(|d| d.address).collect();
        let mut net = network_for(&pool, NetworkConfig::lossless(1)).unwrap();
        let a = sweep(&mut net, &slow_first, 10.0, 10_000.0).unwrap();
        let mut net = network_for(&pool, NetworkConfig::lossless(1)).unwrap();
        let b = sweep(&mut net, &fast_first, 10.0, 10_000.0).unwrap();
        assert_eq!((a.replies, b.replies), (20, 20));
        assert!(a.completion_ms <= 2.0 * 200.0);
        assert!(a.completion_ms < b.completion_ms);
        assert!((b.completion_ms - (190.0 + 200.0)).abs() < 0.01);
    }

    #[test]
    fn synthetic_pool_mix() {
        let pool = synthetic_pool(100, &PoolShape::default(), (3, 1), 1);
        assert_eq!(pool.iter().filter(|d| d.behavior == ResponderBehavior::NonValidating).count(), 25);
        assert!(pool.iter().all(|d| d.latency.median_ms > 0.0));
    }
}
