//! Experiment plumbing: throughput metrics, the bench workload and the CLI.

mod cli;

pub use cli::{run_cli, FileConfig};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hopfield::{
    async_oracle, hebb_couplings, non_validating_network, AsyncConfig, AsyncDriver, HopfieldError,
    HopfieldState, Pattern,
};
use crate::responder::ResponderBehavior;
use crate::transport::daemon::{self, BehaviorMap, UdpEchoClient};
use crate::transport::{DeviceAddress, EchoTransport, NetworkConfig};

/// Reference throughput figures in coupling updates per second, for the
/// message path and for a conventional update loop. They depend on
/// hardware and network and are printed for comparison only, never checked.
pub const CONTEXT_MESSAGE_PATH_CUPS: f64 = 0.76e6;
pub const CONTEXT_CONVENTIONAL_CUPS: f64 = 5.5e6;

/// Counts and rates for one run. Rates are derived from the counts and the
/// elapsed time, never sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub label: String,
    pub messages_sent: u64,
    pub replies_received: u64,
    pub retries: u64,
    pub neuron_updates: u64,
    pub neurons: u64,
    /// Transport-clock time; absent for wall-clock-only runs.
    pub elapsed_simulated_ms: Option<f64>,
    pub elapsed_wall_ms: f64,
    pub cups: f64,
    pub msgs_per_s: f64,
}

impl RunMetrics {
    /// Rates use simulated time when present, wall time otherwise.
    pub fn new(
        label: &str,
        counts: (u64, u64, u64),
        neuron_updates: u64,
        neurons: u64,
        elapsed_simulated_ms: Option<f64>,
        elapsed_wall_ms: f64,
    ) -> Self {
        let mut m = RunMetrics {
            label: label.to_owned(),
            messages_sent: counts.0,
            replies_received: counts.1,
            retries: counts.2,
            neuron_updates,
            neurons,
            elapsed_simulated_ms,
            elapsed_wall_ms,
            cups: 0.0,
            msgs_per_s: 0.0,
        };
        let secs = m.elapsed_ms() / 1000.0;
        m.cups = cups(neuron_updates, neurons, secs);
        m.msgs_per_s = if secs > 0.0 { m.messages_sent as f64 / secs } else { 0.0 };
        m
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.elapsed_simulated_ms.unwrap_or(self.elapsed_wall_ms)
    }

    /// Couplings touched per neuron update.
    pub fn couplings(&self) -> u64 {
        self.neuron_updates * self.neurons.saturating_sub(1)
    }

    /// Both rate identities, recomputed from the stored counts.
    pub fn identities_hold(&self) -> bool {
        let secs = self.elapsed_ms() / 1000.0;
        if secs <= 0.0 {
            return self.cups == 0.0 && self.msgs_per_s == 0.0;
        }
        self.cups == self.couplings() as f64 / secs && self.msgs_per_s == self.messages_sent as f64 / secs
    }
}

/// Coupling updates per second: each neuron update reads `N - 1` couplings.
pub fn cups(neuron_updates: u64, neurons: u64, elapsed_s: f64) -> f64 {
    if elapsed_s <= 0.0 {
        return 0.0;
    }
    (neuron_updates * neurons.saturating_sub(1)) as f64 / elapsed_s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub neurons: usize,
    pub patterns: usize,
    pub bound: i32,
    pub steps: usize,
    pub seed: u64,
    pub devices: usize,
    pub network: NetworkConfig,
    pub driver: AsyncConfig,
    /// Also run the workload through a loopback UDP daemon.
    pub daemon: bool,
    pub daemon_devices: usize,
    pub daemon_window: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            neurons: 512,
            patterns: 32,
            bound: 15,
            steps: 2,
            seed: 1,
            devices: 16,
            network: NetworkConfig::lossless(1),
            driver: AsyncConfig::default(),
            daemon: false,
            daemon_devices: 64,
            daemon_window: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFigures {
    pub message_path_cups: f64,
    pub conventional_cups: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Message-driven updates over the simulated network.
    pub in_process: RunMetrics,
    /// The same updates computed directly, wall clock.
    pub conventional: RunMetrics,
    /// Message-driven updates over loopback UDP, wall clock.
    pub daemon: Option<RunMetrics>,
    pub context: ContextFigures,
}

fn workload(cfg: &BenchConfig) -> Result<(crate::hopfield::CouplingMatrix, Vec<i8>), HopfieldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let patterns: Vec<Pattern> = (0..cfg.patterns.max(1)).map(|_| Pattern::random(cfg.neurons, &mut rng)).collect();
    let j = hebb_couplings(&patterns, cfg.bound)?;
    let start = Pattern::random(cfg.neurons, &mut rng).0;
    Ok((j, start))
}

fn drive<T: EchoTransport>(
    transport: &mut T,
    pool: Vec<DeviceAddress>,
    driver: AsyncConfig,
    j: &crate::hopfield::CouplingMatrix,
    start: &[i8],
    steps: usize,
    seed: u64,
) -> Result<(crate::hopfield::AsyncStats, u64), HopfieldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = HopfieldState::new(start.to_vec());
    let mut d = AsyncDriver::new(transport, pool, driver)?;
    for _ in 0..steps {
        d.async_step(&mut state, j, &mut rng)?;
    }
    Ok((d.stats(), state.update_count))
}

/// Runs the Hopfield workload on the message path (simulated and, if asked,
/// over a loopback daemon) and conventionally, and reports cups and
/// messages per second for each.
pub fn bench_throughput(cfg: &BenchConfig) -> Result<BenchReport, HopfieldError> {
    let (j, start) = workload(cfg)?;
    let n = cfg.neurons as u64;

    let (mut net, pool) = non_validating_network(cfg.network.clone(), cfg.devices)?;
    let wall = Instant::now();
    let (stats, updates) = drive(&mut net, pool, cfg.driver, &j, &start, cfg.steps, cfg.seed)?;
    let in_process = RunMetrics::new(
        "in-process",
        (stats.messages_sent, stats.replies_received, stats.reissued),
        updates,
        n,
        Some(net.now_ms()),
        wall.elapsed().as_secs_f64() * 1000.0,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wall = Instant::now();
    let mut s = start.clone();
    for _ in 0..cfg.steps {
        let mut order: Vec<usize> = (0..cfg.neurons).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        s = async_oracle(&s, &j, &order);
    }
    std::hint::black_box(&s);
    let conventional = RunMetrics::new(
        "conventional",
        (0, 0, 0),
        (cfg.steps * cfg.neurons) as u64,
        n,
        None,
        wall.elapsed().as_secs_f64() * 1000.0,
    );

    let daemon = if cfg.daemon {
        let handle = daemon::spawn("127.0.0.1:0", BehaviorMap::all(ResponderBehavior::NonValidating), 2)?;
        let mut client = UdpEchoClient::connect(handle.local_addr())?;
        let pool: Vec<DeviceAddress> = (0..cfg.daemon_devices.max(1) as u64).map(DeviceAddress).collect();
        let driver = AsyncConfig { window: cfg.daemon_window.max(1), ..cfg.driver };
        let wall = Instant::now();
        let (stats, updates) = drive(&mut client, pool, driver, &j, &start, cfg.steps, cfg.seed)?;
        let m = RunMetrics::new(
            "daemon",
            (stats.messages_sent, stats.replies_received, stats.reissued),
            updates,
            n,
            None,
            wall.elapsed().as_secs_f64() * 1000.0,
        );
        handle.stop().map_err(crate::transport::TransportError::from)?;
        Some(m)
    } else {
        None
    };

    Ok(BenchReport {
        in_process,
        conventional,
        daemon,
        context: ContextFigures {
            message_path_cups: CONTEXT_MESSAGE_PATH_CUPS,
            conventional_cups: CONTEXT_CONVENTIONAL_CUPS,
            note: "reference figures for comparison only; hardware dependent".into(),
        },
    })
}
