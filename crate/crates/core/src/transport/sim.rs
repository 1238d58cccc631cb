use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ms_to_us, DeviceAddress, Delivered, EchoTransport, LatencyModel, NetworkConfig,
    TransportError,
};
use crate::responder::{handle_datagram, ResponderBehavior};

/// A device attached to the simulated network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimDevice {
    pub behavior: ResponderBehavior,
    /// Overrides the network-wide latency model when set.
    pub latency: Option<LatencyModel>,
}

impl SimDevice {
    pub fn new(behavior: ResponderBehavior) -> Self {
        SimDevice { behavior, latency: None }
    }

    pub fn with_latency(behavior: ResponderBehavior, latency: LatencyModel) -> Self {
        SimDevice { behavior, latency: Some(latency) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToDevice,
    ToClient,
}

/// A datagram in flight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InflightEvent {
    pub due_us: u64,
    pub address: DeviceAddress,
    pub direction: Direction,
    pub payload: Vec<u8>,
    /// Return-leg delay applied if the device answers.
    return_us: u64,
    seq: u64,
}

impl Ord for InflightEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (due, seq)
        other
            .due_us
            .cmp(&self.due_us)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for InflightEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendReceipt {
    pub sent_at_us: u64,
    /// Copies that survived the outbound drop decision.
    pub copies_in_flight: u8,
}

/// Counters kept by [`SimNetwork`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub requests_sent: u64,
    pub duplicated: u64,
    pub dropped_to_device: u64,
    pub dropped_to_client: u64,
    pub corrupted: u64,
    /// Requests the device chose not to answer.
    pub silent: u64,
    pub replies_delivered: u64,
}

/// Seeded discrete-event network of echo responders.
///
/// Each request samples one round-trip latency from its device's model;
/// half of it is spent on the way out, the rest on the way back. All events
/// are processed at their own due time, so the trace does not depend on how
/// the clock is advanced.
#[derive(Debug)]
pub struct SimNetwork {
    config: NetworkConfig,
    rng: ChaCha8Rng,
    now_us: u64,
    next_seq: u64,
    devices: HashMap<DeviceAddress, SimDevice>,
    queue: BinaryHeap<InflightEvent>,
    arrived: Vec<InflightEvent>,
    stats: TransportStats,
}

impl SimNetwork {
    pub fn new(config: NetworkConfig) -> Result<Self, TransportError> {
        config.validate()?;
        Ok(SimNetwork {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            now_us: 0,
            next_seq: 0,
            devices: HashMap::new(),
            queue: BinaryHeap::new(),
            arrived: Vec::new(),
            stats: TransportStats::default(),
        })
    }

    pub fn with_devices<I>(config: NetworkConfig, devices: I) -> Result<Self, TransportError>
    where
        I: IntoIterator<Item = (DeviceAddress, SimDevice)>,
    {
        let mut net = SimNetwork::new(config)?;
        net.devices.extend(devices);
        Ok(net)
    }

    pub fn add_device(&mut self, address: DeviceAddress, device: SimDevice) {
        self.devices.insert(address, device);
    }

    pub fn device(&self, address: DeviceAddress) -> Option<&SimDevice> {
        self.devices.get(&address)
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn stats(&self) -> TransportStats {
        self.stats
    }

    pub fn now_ms(&self) -> f64 {
        self.now_us as f64 / 1000.0
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn next_due_us(&self) -> Option<u64> {
        self.queue.peek().map(|e| e.due_us)
    }

    /// Schedules delivery of `bytes` to `address` and returns immediately.
    pub fn send_request(
        &mut self,
        address: DeviceAddress,
        bytes: &[u8],
    ) -> Result<SendReceipt, TransportError> {
        let device = *self
            .devices
            .get(&address)
            .ok_or(TransportError::UnknownAddress(address))?;
        self.stats.requests_sent += 1;
        let copies = if self.chance(self.config.duplicate_probability) {
            self.stats.duplicated += 1;
            2
        } else {
            1
        };
        let latency = device.latency.unwrap_or(self.config.latency);
        let mut in_flight = 0;
        for _ in 0..copies {
            if self.chance(self.config.drop_probability) {
                self.stats.dropped_to_device += 1;
                continue;
            }
            let mut payload = bytes.to_vec();
            self.maybe_corrupt(&mut payload);
            let rtt = ms_to_us(latency.sample(&mut self.rng));
            let out = rtt / 2;
            let event = InflightEvent {
                due_us: self.now_us + out,
                address,
                direction: Direction::ToDevice,
                payload,
                return_us: rtt - out,
                seq: self.bump_seq(),
            };
            self.queue.push(event);
            in_flight += 1;
        }
        Ok(SendReceipt {
            sent_at_us: self.now_us,
            copies_in_flight: in_flight,
        })
    }

    /// Moves the clock forward, processing every event due on the way.
    /// Returns the new clock in milliseconds.
    pub fn advance_clock(&mut self, delta_ms: f64) -> f64 {
        let target = self.now_us + ms_to_us(delta_ms);
        self.advance_to_us(target);
        self.now_ms()
    }

    pub fn advance_to_us(&mut self, target_us: u64) {
        while let Some(due) = self.next_due_us() {
            if due > target_us {
                break;
            }
            self.process_next();
        }
        self.now_us = self.now_us.max(target_us);
    }

    /// Replies that have reached the client, each returned once.
    pub fn poll_replies(&mut self) -> Vec<(DeviceAddress, Vec<u8>)> {
        self.take_arrived()
            .into_iter()
            .map(|d| (d.address, d.payload))
            .collect()
    }

    fn take_arrived(&mut self) -> Vec<Delivered> {
        let mut batch = std::mem::take(&mut self.arrived);
        let window = self.config.reorder_window as u64;
        if window > 0 && batch.len() > 1 {
            // key = position + U{0..=window}; displacement is at most `window`
            let mut keyed: Vec<(u64, usize, InflightEvent)> = batch
                .drain(..)
                .enumerate()
                .map(|(i, e)| (i as u64 + self.rng.random_range(0..=window), i, e))
                .collect();
            keyed.sort_by_key(|&(k, i, _)| (k, i));
            batch = keyed.into_iter().map(|(_, _, e)| e).collect();
        }
        batch
            .into_iter()
            .map(|e| Delivered {
                address: e.address,
                payload: e.payload,
                at_us: e.due_us,
            })
            .collect()
    }

    fn process_next(&mut self) {
        let Some(event) = self.queue.pop() else {
            return;
        };
        self.now_us = self.now_us.max(event.due_us);
        match event.direction {
            Direction::ToClient => {
                self.stats.replies_delivered += 1;
                self.arrived.push(event);
            }
            Direction::ToDevice => {
                let behavior = self.devices[&event.address].behavior;
                let Some(mut reply) = handle_datagram(&event.payload, behavior) else {
                    self.stats.silent += 1;
                    return;
                };
                if self.chance(self.config.drop_probability) {
                    self.stats.dropped_to_client += 1;
                    return;
                }
                self.maybe_corrupt(&mut reply);
                let back = InflightEvent {
                    due_us: event.due_us + event.return_us,
                    address: event.address,
                    direction: Direction::ToClient,
                    payload: reply,
                    return_us: 0,
                    seq: self.bump_seq(),
                };
                self.queue.push(back);
            }
        }
    }

    fn chance(&mut self, p: f64) -> bool {
        p > 0.0 && self.rng.random::<f64>() < p
    }

    fn maybe_corrupt(&mut self, payload: &mut [u8]) {
        if payload.is_empty() || !self.chance(self.config.corruption_probability) {
            return;
        }
        let bit = self.rng.random_range(0..payload.len() * 8);
        payload[bit / 8] ^= 0x80 >> (bit % 8);
        self.stats.corrupted += 1;
    }

    fn bump_seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }
}

impl EchoTransport for SimNetwork {
    fn now_us(&self) -> u64 {
        self.now_us
    }

    fn send_request(&mut self, address: DeviceAddress, bytes: &[u8]) -> Result<(), TransportError> {
        SimNetwork::send_request(self, address, bytes).map(|_| ())
    }

    fn wait_for_replies(&mut self, deadline_us: u64) -> Vec<Delivered> {
        while self.arrived.is_empty() {
            match self.next_due_us() {
                Some(due) if due <= deadline_us => self.process_next(),
                _ => {
                    self.now_us = self.now_us.max(deadline_us);
                    break;
                }
            }
        }
        self.take_arrived()
    }

    fn pause(&mut self, delta_us: u64) {
        self.advance_to_us(self.now_us + delta_us);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icmp::{EchoKind, EchoMessage};
    use crate::ocarith::OcWord;
    use ResponderBehavior::*;

    fn request(seq: u16) -> Vec<u8> {
        EchoMessage::request(OcWord(1), OcWord(seq), vec![OcWord(42)])
            .seal()
            .encode()
    }

    fn net(config: NetworkConfig, n: u64) -> SimNetwork {
        SimNetwork::with_devices(
            config,
            (0..n).map(|a| (DeviceAddress(a), SimDevice::new(Validating))),
        )
        .unwrap()
    }

    #[test]
    fn lossless_single_round_trip() {
        let mut net = net(NetworkConfig::lossless(1), 1);
        net.send_request(DeviceAddress(0), &request(1)).unwrap();
        assert!(net.poll_replies().is_empty());
        net.advance_clock(60_000.0);
        let replies = net.poll_replies();
        assert_eq!(replies.len(), 1);
        let reply = EchoMessage::decode(&replies[0].1).unwrap();
        assert_eq!(reply.kind, EchoKind::Reply);
        assert!(net.poll_replies().is_empty());
    }

    #[test]
    fn unknown_address_rejected() {
        let mut net = net(NetworkConfig::lossless(1), 1);
        assert!(matches!(
            net.send_request(DeviceAddress(9), &request(1)),
            Err(TransportError::UnknownAddress(DeviceAddress(9)))
        ));
    }

    #[test]
    fn total_drop_never_replies() {
        let mut cfg = NetworkConfig::lossless(1);
        cfg.drop_probability = 1.0;
        let mut net = net(cfg, 1);
        for s in 0..20 {
            net.send_request(DeviceAddress(0), &request(s)).unwrap();
        }
        net.advance_clock(1e7);
        assert!(net.poll_replies().is_empty());
    }

    #[test]
    fn forced_duplication_gives_two_replies() {
        let mut cfg = NetworkConfig::lossless(1);
        cfg.duplicate_probability = 1.0;
        let mut net = net(cfg, 1);
        net.send_request(DeviceAddress(0), &request(3)).unwrap();
        net.advance_clock(1e7);
        assert_eq!(net.poll_replies().len(), 2);
    }

    #[test]
    fn zero_advance_keeps_clock() {
        let mut net = net(NetworkConfig::lossless(1), 1);
        net.advance_clock(5.0);
        assert_eq!(net.advance_clock(0.0), 5.0);
    }

    #[test]
    fn fixed_latency_reply_due_exactly() {
        let mut net = SimNetwork::with_devices(
            NetworkConfig::lossless(0),
            [(DeviceAddress(0), SimDevice::with_latency(Validating, LatencyModel::fixed(50.0)))],
        )
        .unwrap();
        net.send_request(DeviceAddress(0), &request(1)).unwrap();
        net.advance_clock(49.999);
        assert!(net.poll_replies().is_empty());
        net.advance_clock(0.001);
        assert_eq!(net.poll_replies().len(), 1);
    }

    fn trace(config: NetworkConfig, steps: &[f64]) -> Vec<(DeviceAddress, Vec<u8>)> {
        let mut net = net(config, 8);
        for s in 0..200u16 {
            net.send_request(DeviceAddress(s as u64 % 8), &request(s)).unwrap();
        }
        for &dt in steps {
            net.advance_clock(dt);
        }
        net.poll_replies()
    }

    #[test]
    fn advance_granularity_does_not_change_trace() {
        let mut cfg = NetworkConfig::lossy(77);
        cfg.drop_probability = 0.2;
        cfg.corruption_probability = 0.1;
        cfg.duplicate_probability = 0.1;
        let one = trace(cfg.clone(), &[10_000.0]);
        let many = trace(cfg.clone(), &[0.5; 20_000]);
        assert_eq!(one, many);
        assert!(!one.is_empty());
        assert_eq!(one, trace(cfg, &[10_000.0]));
    }

    #[test]
    fn reorder_window_bounds_displacement() {
        let mut cfg = NetworkConfig::lossless(5);
        cfg.latency = LatencyModel::fixed(10.0);
        cfg.reorder_window = 2;
        let mut net = net(cfg, 1);
        for s in 0..100u16 {
            net.send_request(DeviceAddress(0), &request(s)).unwrap();
        }
        net.advance_clock(100.0);
        let order: Vec<u16> = net
            .poll_replies()
            .into_iter()
            .map(|(_, b)| EchoMessage::decode(&b).unwrap().sequence.bits())
            .collect();
        assert_eq!(order.len(), 100);
        let mut displaced = false;
        for (pos, &seq) in order.iter().enumerate() {
            let d = (pos as i64 - seq as i64).abs();
            assert!(d <= 2, "sequence {seq} displaced by {d}");
            displaced |= d > 0;
        }
        assert!(displaced);
    }

    #[test]
    fn single_bit_corruption_silences_validating_devices() {
        let mut cfg = NetworkConfig::lossless(9);
        cfg.corruption_probability = 1.0;
        let mut net = net(cfg, 1);
        for s in 0..500 {
            net.send_request(DeviceAddress(0), &request(s)).unwrap();
        }
        net.advance_clock(1e7);
        assert!(net.poll_replies().is_empty());
        assert_eq!(net.stats().silent, 500);
    }

    #[test]
    fn wait_for_replies_stops_at_first_arrival() {
        let mut net = SimNetwork::with_devices(
            NetworkConfig::lossless(0),
            [
                (DeviceAddress(0), SimDevice::with_latency(Validating, LatencyModel::fixed(10.0))),
                (DeviceAddress(1), SimDevice::with_latency(Validating, LatencyModel::fixed(30.0))),
            ],
        )
        .unwrap();
        net.send_request(DeviceAddress(1), &request(1)).unwrap();
        net.send_request(DeviceAddress(0), &request(2)).unwrap();
        let first = net.wait_for_replies(1_000_000);
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].address, DeviceAddress(0));
        assert_eq!(net.now_us, 10_000);
        let second = net.wait_for_replies(1_000_000);
        assert_eq!(second[0].at_us, 30_000);
        assert!(net.wait_for_replies(2_000_000).is_empty());
        assert_eq!(net.now_us, 2_000_000);
    }
}
