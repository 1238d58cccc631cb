//! Hopfield recall with local fields computed by non-validating responders.
//!
//! A request for neuron `i` carries `J_ij * S_j` for every `j != i` as data
//! words, with identifier, sequence and type/code of the reply all zero. The
//! device's recomputed reply checksum is then the complement of the data
//! fold, so complementing it yields the local field `sum_j J_ij S_j`. The
//! one's-complement path is exact while `(N - 1) * L <= 32767`.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icmp::{EchoKind, EchoMessage};
use crate::ocarith::{OcWord, MAX_MAGNITUDE};
use crate::par;
use crate::responder::ResponderBehavior;
use crate::transport::{
    DeviceAddress, EchoTransport, NetworkConfig, SimDevice, SimNetwork, TransportError,
};

#[derive(Debug, Error)]
pub enum HopfieldError {
    #[error("pattern {index} has {found} neurons, expected {expected}")]
    InconsistentPattern { index: usize, expected: usize, found: usize },
    #[error("coupling bound L must be at least 1")]
    ZeroBound,
    #[error("(N - 1) * L = {0} exceeds 32767; local fields would wrap")]
    MagnitudeBound(i64),
    #[error("state vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("reply is not an echo reply with zero identifier and sequence")]
    NotANeuronReply,
    #[error("device pool is empty")]
    EmptyPool,
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// A stored pattern of `+1`/`-1` entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pattern(pub Vec<i8>);

impl Pattern {
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Pattern((0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Dense integer couplings with zero diagonal and `|J_ij| <= L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CouplingMatrix {
    n: usize,
    bound: i32,
    j: Vec<i16>,
}

impl CouplingMatrix {
    pub fn from_rows(rows: Vec<Vec<i32>>, bound: i32) -> Result<Self, HopfieldError> {
        let n = rows.len();
        check_bound(n, bound)?;
        let mut j = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(HopfieldError::InconsistentPattern {
                    index: i,
                    expected: n,
                    found: row.len(),
                });
            }
            for (k, &v) in row.iter().enumerate() {
                j.push(if k == i { 0 } else { v.clamp(-bound, bound) as i16 });
            }
        }
        Ok(CouplingMatrix { n, bound, j })
    }

    pub fn zeros(n: usize, bound: i32) -> Result<Self, HopfieldError> {
        check_bound(n, bound)?;
        Ok(CouplingMatrix { n, bound, j: vec![0; n * n] })
    }

    pub fn neurons(&self) -> usize {
        self.n
    }

    pub fn bound(&self) -> i32 {
        self.bound
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> i32 {
        self.j[i * self.n + k] as i32
    }

    pub fn row(&self, i: usize) -> &[i16] {
        &self.j[i * self.n..(i + 1) * self.n]
    }
}

fn check_bound(n: usize, bound: i32) -> Result<(), HopfieldError> {
    if bound < 1 {
        return Err(HopfieldError::ZeroBound);
    }
    let worst = (n.saturating_sub(1) as i64) * bound as i64;
    if worst > MAX_MAGNITUDE as i64 {
        return Err(HopfieldError::MagnitudeBound(worst));
    }
    Ok(())
}

/// Clipped Hebb rule: `J_ij = clamp(sum_mu xi_i xi_j, -L, L)`, `J_ii = 0`.
pub fn hebb_couplings(patterns: &[Pattern], bound: i32) -> Result<CouplingMatrix, HopfieldError> {
    let n = patterns.first().map_or(0, Pattern::len);
    for (index, p) in patterns.iter().enumerate() {
        if p.len() != n {
            return Err(HopfieldError::InconsistentPattern { index, expected: n, found: p.len() });
        }
    }
    check_bound(n, bound)?;
    let rows = par::map_indexed(n, |i| {
        let mut row = vec![0i16; n];
        for p in patterns {
            let xi = p.0[i] as i32;
            for (k, r) in row.iter_mut().enumerate() {
                *r += (xi * p.0[k] as i32) as i16;
            }
        }
        for (k, r) in row.iter_mut().enumerate() {
            *r = if k == i { 0 } else { (*r as i32).clamp(-bound, bound) as i16 };
        }
        row
    });
    Ok(CouplingMatrix { n, bound, j: rows.concat() })
}

/// Neuron states plus the asynchronous clock: one time step is `N`
/// neuron updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopfieldState {
    pub s: Vec<i8>,
    pub t: u64,
    pub update_count: u64,
}

impl HopfieldState {
    pub fn new(s: Vec<i8>) -> Self {
        HopfieldState { s, t: 0, update_count: 0 }
    }
}

/// `+1` for non-negative fields.
#[inline]
pub fn sign(field: i32) -> i8 {
    if field >= 0 {
        1
    } else {
        -1
    }
}

/// Direct integer local field `sum_{j != i} J_ij S_j`.
pub fn local_field(j: &CouplingMatrix, s: &[i8], i: usize) -> i32 {
    j.row(i)
        .iter()
        .zip(s)
        .map(|(&c, &x)| c as i32 * x as i32)
        .sum()
}

/// Builds the echo request whose reply checksum encodes neuron `i`'s field.
///
/// Identifier, sequence and checksum are all `+0`; the checksum is never
/// looked at by a non-validating device.
pub fn encode_neuron_request(
    i: usize,
    j: &CouplingMatrix,
    s: &[i8],
) -> Result<EchoMessage, HopfieldError> {
    if s.len() != j.neurons() {
        return Err(HopfieldError::LengthMismatch(s.len(), j.neurons()));
    }
    let data = j
        .row(i)
        .iter()
        .zip(s)
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, (&c, &x))| {
            let v = if x >= 0 { c as i32 } else { -(c as i32) };
            OcWord::from_int(v).map_err(|e| HopfieldError::MagnitudeBound(e.0))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EchoMessage::request(OcWord::PLUS_ZERO, OcWord::PLUS_ZERO, data))
}

/// Recovers the local field from a neuron reply's checksum.
pub fn decode_local_field(reply: &EchoMessage) -> Result<i32, HopfieldError> {
    if reply.kind != EchoKind::Reply
        || reply.identifier != OcWord::PLUS_ZERO
        || reply.sequence != OcWord::PLUS_ZERO
    {
        return Err(HopfieldError::NotANeuronReply);
    }
    Ok(reply.checksum.oc_negate().value())
}

/// All neurons updated at once from the previous state.
pub fn parallel_update_oracle(s: &[i8], j: &CouplingMatrix) -> Vec<i8> {
    par::map_indexed(s.len(), |i| sign(local_field(j, s, i)))
}

/// Sequential asynchronous updates in `order`, each seeing all earlier ones.
pub fn async_oracle(s: &[i8], j: &CouplingMatrix, order: &[usize]) -> Vec<i8> {
    let mut s = s.to_vec();
    for &i in order {
        s[i] = sign(local_field(j, &s, i));
    }
    s
}

/// One entry of a recorded message schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleEvent {
    /// A request for the neuron was built from the state at this point.
    Send(usize),
    /// The reply for the neuron's latest request was applied.
    Apply(usize),
}

/// Replays a schedule with direct integer sums: a `Send` snapshots the
/// field, the matching `Apply` sets the sign.
pub fn replay_schedule(s: &[i8], j: &CouplingMatrix, events: &[ScheduleEvent]) -> Vec<i8> {
    let mut s = s.to_vec();
    let mut pending: HashMap<usize, i32> = HashMap::new();
    for &e in events {
        match e {
            ScheduleEvent::Send(i) => {
                pending.insert(i, local_field(j, &s, i));
            }
            ScheduleEvent::Apply(i) => {
                let h = pending.remove(&i).expect("apply without send");
                s[i] = sign(h);
            }
        }
    }
    s
}

/// Fraction of positions where `a` and `b` differ.
pub fn hamming_distance(a: &[i8], b: &[i8]) -> Result<f64, HopfieldError> {
    if a.len() != b.len() {
        return Err(HopfieldError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.len() as f64)
}

/// Copy of `pattern` with exactly `floor(fraction * N)` distinct flips.
pub fn perturb<R: Rng + ?Sized>(pattern: &[i8], fraction: f64, rng: &mut R) -> Vec<i8> {
    let n = pattern.len();
    let flips = ((fraction * n as f64).floor() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out = pattern.to_vec();
    for &k in &idx[..flips] {
        out[k] = -out[k];
    }
    out
}

/// Pipelining and timing for the message-driven update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsyncConfig {
    /// Maximum requests in flight. With 1 each request waits for the
    /// previous update, which reproduces sequential asynchronous dynamics
    /// exactly; larger windows overlap latencies and build some requests
    /// from a state that is a few updates old.
    pub window: usize,
    /// A request with no reply by then is reissued later in the step.
    pub reply_timeout_ms: f64,
    /// Pause after each send.
    pub send_interval_ms: f64,
}

impl Default for AsyncConfig {
    fn default() -> Self {
        AsyncConfig { window: 1, reply_timeout_ms: 1000.0, send_interval_ms: 0.0 }
    }
}

/// Counters for message-driven steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsyncStats {
    pub messages_sent: u64,
    pub replies_received: u64,
    pub updates_applied: u64,
    pub reissued: u64,
    pub discarded: u64,
}

impl AsyncStats {
    fn merge(&mut self, o: &AsyncStats) {
        self.messages_sent += o.messages_sent;
        self.replies_received += o.replies_received;
        self.updates_applied += o.updates_applied;
        self.reissued += o.reissued;
        self.discarded += o.discarded;
    }
}

struct Outstanding {
    neuron: usize,
    data: Vec<OcWord>,
    deadline_us: u64,
}

/// Drives asynchronous updates through a transport and a pool of
/// non-validating devices.
///
/// Requests go out in a seeded random order without waiting for replies,
/// up to `window` at a time, one per idle device. Each reply updates its
/// neuron immediately, so later requests see the new state. Replies are
/// matched by device and echoed payload; anything else is discarded.
pub struct AsyncDriver<'t, T: EchoTransport> {
    transport: &'t mut T,
    pool: Vec<DeviceAddress>,
    config: AsyncConfig,
    stats: AsyncStats,
    schedule: Option<Vec<ScheduleEvent>>,
}

impl<'t, T: EchoTransport> AsyncDriver<'t, T> {
    pub fn new(
        transport: &'t mut T,
        pool: Vec<DeviceAddress>,
        config: AsyncConfig,
    ) -> Result<Self, HopfieldError> {
        if pool.is_empty() {
            return Err(HopfieldError::EmptyPool);
        }
        if config.window == 0 {
            return Err(HopfieldError::InvalidConfig("window must be at least 1".into()));
        }
        Ok(AsyncDriver { transport, pool, config, stats: AsyncStats::default(), schedule: None })
    }

    /// Keeps a [`ScheduleEvent`] log for oracle replay.
    pub fn record_schedule(&mut self) {
        self.schedule = Some(Vec::new());
    }

    pub fn take_schedule(&mut self) -> Vec<ScheduleEvent> {
        self.schedule.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn stats(&self) -> AsyncStats {
        self.stats
    }

    fn log(&mut self, e: ScheduleEvent) {
        if let Some(s) = self.schedule.as_mut() {
            s.push(e);
        }
    }

    /// Runs one time step: every neuron is updated exactly once.
    pub fn async_step<R: Rng + ?Sized>(
        &mut self,
        state: &mut HopfieldState,
        j: &CouplingMatrix,
        rng: &mut R,
    ) -> Result<(), HopfieldError> {
        let n = state.s.len();
        if n != j.neurons() {
            return Err(HopfieldError::LengthMismatch(n, j.neurons()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut queue: VecDeque<usize> = order.into();
        let mut done = vec![false; n];
        let mut remaining = n;
        let mut idle: VecDeque<DeviceAddress> = self.pool.iter().copied().collect();
        let mut outstanding: HashMap<DeviceAddress, Outstanding> = HashMap::new();
        let timeout_us = crate::transport::ms_to_us(self.config.reply_timeout_ms);
        let interval_us = crate::transport::ms_to_us(self.config.send_interval_ms);

        while remaining > 0 {
            while outstanding.len() < self.config.window {
                let Some(device) = idle.front().copied() else { break };
                let Some(i) = queue.pop_front() else { break };
                idle.pop_front();
                let msg = encode_neuron_request(i, j, &state.s)?;
                self.log(ScheduleEvent::Send(i));
                self.transport.send_request(device, &msg.encode())?;
                self.stats.messages_sent += 1;
                outstanding.insert(
                    device,
                    Outstanding {
                        neuron: i,
                        data: msg.data,
                        deadline_us: self.transport.now_us() + timeout_us,
                    },
                );
                self.transport.pause(interval_us);
            }

            let deadline = outstanding
                .values()
                .map(|o| o.deadline_us)
                .min()
                .unwrap_or_else(|| self.transport.now_us());
            for d in self.transport.wait_for_replies(deadline) {
                self.stats.replies_received += 1;
                let Ok(reply) = EchoMessage::decode(&d.payload) else {
                    self.stats.discarded += 1;
                    continue;
                };
                let matches = outstanding
                    .get(&d.address)
                    .is_some_and(|o| o.data == reply.data);
                if !matches || !reply.validate() {
                    self.stats.discarded += 1;
                    continue;
                }
                let Ok(field) = decode_local_field(&reply) else {
                    self.stats.discarded += 1;
                    continue;
                };
                let o = outstanding.remove(&d.address).expect("matched above");
                idle.push_back(d.address);
                state.s[o.neuron] = sign(field);
                state.update_count += 1;
                self.stats.updates_applied += 1;
                self.log(ScheduleEvent::Apply(o.neuron));
                if !done[o.neuron] {
                    done[o.neuron] = true;
                    remaining -= 1;
                }
            }

            let now = self.transport.now_us();
            let expired: Vec<DeviceAddress> = outstanding
                .iter()
                .filter(|(_, o)| o.deadline_us <= now)
                .map(|(&a, _)| a)
                .collect();
            for a in expired {
                let o = outstanding.remove(&a).expect("listed above");
                idle.push_back(a);
                if !done[o.neuron] {
                    queue.push_back(o.neuron);
                    self.stats.reissued += 1;
                }
            }
        }
        state.t += 1;
        Ok(())
    }
}

/// Builds a simulated network of `count` non-validating devices with
/// addresses `0..count`.
pub fn non_validating_network(
    config: NetworkConfig,
    count: usize,
) -> Result<(SimNetwork, Vec<DeviceAddress>), HopfieldError> {
    let pool: Vec<DeviceAddress> = (0..count as u64).map(DeviceAddress).collect();
    let net = SimNetwork::with_devices(
        config,
        pool.iter().map(|&a| (a, SimDevice::new(ResponderBehavior::NonValidating))),
    )?;
    Ok((net, pool))
}

/// Parameters of the recall experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecallConfig {
    pub neurons: usize,
    pub patterns: usize,
    pub bound: i32,
    pub sets: usize,
    pub probes_per_set: usize,
    pub initial_distance: f64,
    pub steps: usize,
    pub seed: u64,
    pub devices: usize,
    pub network: NetworkConfig,
    pub driver: AsyncConfig,
    /// Also replay every message schedule through the direct oracle and
    /// compare trajectories.
    pub check_oracle: bool,
}

impl Default for RecallConfig {
    fn default() -> Self {
        RecallConfig {
            neurons: 512,
            patterns: 32,
            bound: 15,
            sets: 10,
            probes_per_set: 10,
            initial_distance: 0.25,
            steps: 20,
            seed: 1,
            devices: 16,
            network: NetworkConfig::lossless(0),
            driver: AsyncConfig::default(),
            check_oracle: false,
        }
    }
}

/// Per-step mean Hamming distances, index 0 being the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurves {
    pub async_message: Vec<f64>,
    pub parallel: Vec<f64>,
    /// Present when `check_oracle` was set.
    pub async_oracle: Option<Vec<f64>>,
    /// Steps, over all replicas, where the message trajectory differed
    /// from the oracle replay.
    pub oracle_mismatches: u64,
    pub stats: AsyncStats,
    /// Simulated time summed over replicas.
    pub simulated_ms: f64,
}

struct ReplicaResult {
    async_message: Vec<f64>,
    parallel: Vec<f64>,
    async_oracle: Vec<f64>,
    mismatches: u64,
    stats: AsyncStats,
    simulated_ms: f64,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the recall experiment: for each random pattern set, builds the
/// couplings; for each probed pattern, starts at the configured distance and
/// runs both the message-driven asynchronous dynamics and parallel updating.
/// Replicas are independent and run in parallel.
pub fn run_recall_experiment(cfg: &RecallConfig) -> Result<RecallCurves, HopfieldError> {
    if cfg.sets == 0 || cfg.probes_per_set == 0 || cfg.neurons == 0 || cfg.patterns == 0 {
        return Err(HopfieldError::InvalidConfig("sizes must be positive".into()));
    }
    if cfg.probes_per_set > cfg.patterns {
        return Err(HopfieldError::InvalidConfig(
            "probes_per_set cannot exceed the number of stored patterns".into(),
        ));
    }
    cfg.network.validate()?;
    check_bound(cfg.neurons, cfg.bound)?;

    let sets: Vec<(Vec<Pattern>, CouplingMatrix)> = (0..cfg.sets)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, s as u64, 0));
            let patterns: Vec<Pattern> =
                (0..cfg.patterns).map(|_| Pattern::random(cfg.neurons, &mut rng)).collect();
            let j = hebb_couplings(&patterns, cfg.bound)?;
            Ok((patterns, j))
        })
        .collect::<Result<_, HopfieldError>>()?;

    let replicas = cfg.sets * cfg.probes_per_set;
    let results = par::map_indexed(replicas, |r| {
        let (set, probe) = (r / cfg.probes_per_set, r % cfg.probes_per_set);
        let (patterns, j) = &sets[set];
        run_replica(cfg, &patterns[probe].0, j, mix_seed(cfg.seed, set as u64, probe as u64 + 1))
    });

    let mut curves = RecallCurves {
        async_message: vec![0.0; cfg.steps + 1],
        parallel: vec![0.0; cfg.steps + 1],
        async_oracle: cfg.check_oracle.then(|| vec![0.0; cfg.steps + 1]),
        oracle_mismatches: 0,
        stats: AsyncStats::default(),
        simulated_ms: 0.0,
    };
    for res in results {
        let res = res?;
        for t in 0..=cfg.steps {
            curves.async_message[t] += res.async_message[t];
            curves.parallel[t] += res.parallel[t];
            if let Some(o) = curves.async_oracle.as_mut() {
                o[t] += res.async_oracle[t];
            }
        }
        curves.oracle_mismatches += res.mismatches;
        curves.stats.merge(&res.stats);
        curves.simulated_ms += res.simulated_ms;
    }
    let scale = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x /= replicas as f64);
    scale(&mut curves.async_message);
    scale(&mut curves.parallel);
    if let Some(o) = curves.async_oracle.as_mut() {
        scale(o);
    }
    Ok(curves)
}

fn run_replica(
    cfg: &RecallConfig,
    stored: &[i8],
    j: &CouplingMatrix,
    seed: u64,
) -> Result<ReplicaResult, HopfieldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = perturb(stored, cfg.initial_distance, &mut rng);
    let mut net_cfg = cfg.network.clone();
    net_cfg.rng_seed = mix_seed(cfg.network.rng_seed, seed, 7);
    let (mut net, pool) = non_validating_network(net_cfg, cfg.devices.max(1))?;

    let d0 = hamming_distance(&start, stored)?;
    let mut res = ReplicaResult {
        async_message: vec![d0],
        parallel: vec![d0],
        async_oracle: vec![d0],
        mismatches: 0,
        stats: AsyncStats::default(),
        simulated_ms: 0.0,
    };

    let mut par_state = start.clone();
    let mut state = HopfieldState::new(start.clone());
    let mut oracle_state = start;
    {
        let mut driver = AsyncDriver::new(&mut net, pool, cfg.driver)?;
        if cfg.check_oracle {
            driver.record_schedule();
        }
        for _ in 0..cfg.steps {
            driver.async_step(&mut state, j, &mut rng)?;
            res.async_message.push(hamming_distance(&state.s, stored)?);
            if cfg.check_oracle {
                let events = driver.take_schedule();
                oracle_state = replay_schedule(&oracle_state, j, &events);
                if oracle_state != state.s {
                    res.mismatches += 1;
                }
                res.async_oracle.push(hamming_distance(&oracle_state, stored)?);
            }
            par_state = parallel_update_oracle(&par_state, j);
            res.parallel.push(hamming_distance(&par_state, stored)?);
        }
        res.stats = driver.stats();
    }
    res.simulated_ms = net.now_ms();
    Ok(res)
}
