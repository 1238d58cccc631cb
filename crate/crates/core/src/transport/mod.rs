//! Unreliable delivery of echo datagrams to devices.
//!
//! [`SimNetwork`] is a seeded discrete-event simulation with loss,
//! duplication, single-bit corruption, bounded reordering and log-normal
//! latency. [`daemon`] carries the same byte format over real UDP sockets.
//! Drivers are written against [`EchoTransport`] and run over either.

pub mod daemon;
mod sim;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sim::{Direction, InflightEvent, SendReceipt, SimDevice, SimNetwork, TransportStats};

/// Opaque device identifier, unique within a pool.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
pub struct DeviceAddress(pub u64);

impl fmt::Display for DeviceAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for DeviceAddress {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(DeviceAddress)
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("no device with address {0}")]
    UnknownAddress(DeviceAddress),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Log-normal round-trip latency. A zero `shape` gives a fixed latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub median_ms: f64,
    pub shape: f64,
}

impl LatencyModel {
    pub const fn fixed(ms: f64) -> Self {
        LatencyModel { median_ms: ms, shape: 0.0 }
    }

    pub const fn log_normal(median_ms: f64, shape: f64) -> Self {
        LatencyModel { median_ms, shape }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.median_ms <= 0.0 {
            return 0.0;
        }
        if self.shape <= 0.0 {
            return self.median_ms;
        }
        LogNormal::new(self.median_ms.ln(), self.shape)
            .expect("finite log-normal parameters")
            .sample(rng)
    }

    /// Expected value of the distribution.
    pub fn mean_ms(&self) -> f64 {
        self.median_ms.max(0.0) * (self.shape * self.shape / 2.0).exp()
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::log_normal(20.0, 0.5)
    }
}

/// Channel impairments for [`SimNetwork`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Independent loss probability, applied once per direction.
    pub drop_probability: f64,
    /// Probability that a request is delivered twice.
    pub duplicate_probability: f64,
    /// Maximum displacement of a reply within a poll batch.
    pub reorder_window: usize,
    /// Per-packet probability of one uniformly chosen bit being flipped.
    pub corruption_probability: f64,
    /// Latency for devices without their own model.
    pub latency: LatencyModel,
    pub rng_seed: u64,
}

impl NetworkConfig {
    /// Single-bit error rate of roughly one packet in 2^10.
    pub const DEFAULT_CORRUPTION: f64 = 1.0 / 1024.0;

    pub fn lossless(seed: u64) -> Self {
        NetworkConfig {
            drop_probability: 0.0,
            duplicate_probability: 0.0,
            reorder_window: 0,
            corruption_probability: 0.0,
            latency: LatencyModel::default(),
            rng_seed: seed,
        }
    }

    /// 1% loss per direction, 0.1% duplication, 2^-10 corruption.
    pub fn lossy(seed: u64) -> Self {
        NetworkConfig {
            drop_probability: 0.01,
            duplicate_probability: 0.001,
            reorder_window: 4,
            corruption_probability: Self::DEFAULT_CORRUPTION,
            latency: LatencyModel::default(),
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        for (name, p) in [
            ("drop_probability", self.drop_probability),
            ("duplicate_probability", self.duplicate_probability),
            ("corruption_probability", self.corruption_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TransportError::InvalidConfig(format!(
                    "{name} = {p} is not in [0, 1]"
                )));
            }
        }
        if !(self.latency.median_ms >= 0.0 && self.latency.shape >= 0.0) {
            return Err(TransportError::InvalidConfig(
                "latency parameters must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::lossless(0)
    }
}

/// A reply datagram as seen by the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivered {
    pub address: DeviceAddress,
    pub payload: Vec<u8>,
    /// Arrival time at the client, in microseconds of transport time.
    pub at_us: u64,
}

/// What a driver needs from a request/reply channel.
///
/// Time is in microseconds since the transport was created: simulated for
/// [`SimNetwork`], wall-clock for the UDP client.
pub trait EchoTransport {
    fn now_us(&self) -> u64;

    /// Fire-and-forget send; never waits for the reply.
    fn send_request(&mut self, address: DeviceAddress, bytes: &[u8]) -> Result<(), TransportError>;

    /// Waits until at least one reply is available or `deadline_us` passes,
    /// then returns everything available.
    fn wait_for_replies(&mut self, deadline_us: u64) -> Vec<Delivered>;

    /// Lets `delta_us` pass without looking at replies.
    fn pause(&mut self, delta_us: u64);

    fn now_ms(&self) -> f64 {
        self.now_us() as f64 / 1000.0
    }
}

pub(crate) fn ms_to_us(ms: f64) -> u64 {
    if ms <= 0.0 || !ms.is_finite() {
        0
    } else {
        (ms * 1000.0).round() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_latency_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = LatencyModel::fixed(50.0);
        assert!((0..10).all(|_| m.sample(&mut rng) == 50.0));
        assert_eq!(LatencyModel::fixed(0.0).sample(&mut rng), 0.0);
    }

    #[test]
    fn log_normal_median_is_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = LatencyModel::log_normal(100.0, 1.0);
        let mut xs: Vec<f64> = (0..20001).map(|_| m.sample(&mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let median = xs[10000];
        assert!((median - 100.0).abs() < 5.0, "median {median}");
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::lossy(0).validate().is_ok());
        let mut bad = NetworkConfig::lossless(0);
        bad.drop_probability = 1.5;
        assert!(bad.validate().is_err());
    }
}
