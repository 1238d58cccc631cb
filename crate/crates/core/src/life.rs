//! Conway's Life with each transition predicate evaluated by a validating
//! responder.
//!
//! For every cell two probes ask whether the live-neighbor count equals 2 or
//! 3. A probe is an echo request whose words fold to `-0` exactly when the
//! count matches, so a validating device answers only the true question.
//! Silence is ambiguous (false or lost), hence each unanswered cell is asked
//! again before its silence is taken as "dies".

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devicepool::{self, CellAssignment, PoolError, PoolShape};
use crate::icmp::{EchoKind, EchoMessage};
use crate::ocarith::OcWord;
use crate::par;
use crate::responder::ResponderBehavior;
use crate::transport::{
    ms_to_us, DeviceAddress, EchoTransport, NetworkConfig, SimDevice, SimNetwork, TransportError,
};

#[derive(Debug, Error)]
pub enum LifeError {
    #[error("neighbor sum {0} is outside 0..=8")]
    NeighborSumOutOfRange(u32),
    #[error("probe constant {0} is not 2 or 3")]
    BadProbeConstant(u8),
    #[error("cell ({row}, {col}) answered both probes twice; step aborted")]
    PersistentConflict { row: usize, col: usize },
    #[error("assignment covers {assigned} cells, grid has {cells}")]
    AssignmentMismatch { assigned: usize, cells: usize },
    #[error("grid dimensions must be positive")]
    EmptyGrid,
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Toroidal grid of 0/1 cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LifeGrid {
    width: usize,
    height: usize,
    cells: Vec<u8>,
    pub generation: u64,
}

const OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

impl LifeGrid {
    pub fn new(width: usize, height: usize) -> Result<Self, LifeError> {
        if width == 0 || height == 0 {
            return Err(LifeError::EmptyGrid);
        }
        Ok(LifeGrid { width, height, cells: vec![0; width * height], generation: 0 })
    }

    /// Builds a grid from rows of `0`/`1`; anything non-zero counts as live.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self, LifeError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut g = LifeGrid::new(width, height)?;
        for (r, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().enumerate().take(width) {
                g.set(r, c, v);
            }
        }
        Ok(g)
    }

    /// A glider in the top-left corner.
    pub fn glider(width: usize, height: usize) -> Result<Self, LifeError> {
        let mut g = LifeGrid::new(width.max(3), height.max(3))?;
        for (r, c) in [(0, 1), (1, 2), (2, 0), (2, 1), (2, 2)] {
            g.set(r, c, 1);
        }
        Ok(g)
    }

    pub fn random<R: Rng + ?Sized>(
        width: usize,
        height: usize,
        density: f64,
        rng: &mut R,
    ) -> Result<Self, LifeError> {
        let mut g = LifeGrid::new(width, height)?;
        for c in g.cells.iter_mut() {
            *c = rng.random_bool(density.clamp(0.0, 1.0)) as u8;
        }
        Ok(g)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn live(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.cells[row * self.width + col] = (v != 0) as u8;
    }

    /// The eight wrapped neighbors, row by row, skipping the center.
    pub fn neighbors(&self, row: usize, col: usize) -> [u8; 8] {
        let (h, w) = (self.height as isize, self.width as isize);
        OFFSETS.map(|(dr, dc)| {
            let r = (row as isize + dr).rem_euclid(h) as usize;
            let c = (col as isize + dc).rem_euclid(w) as usize;
            self.get(r, c)
        })
    }

    pub fn neighbor_sum(&self, row: usize, col: usize) -> u32 {
        self.neighbors(row, col).iter().map(|&v| v as u32).sum()
    }

    fn next_row(&self, row: usize) -> Vec<u8> {
        (0..self.width)
            .map(|col| {
                rule_oracle(self.neighbor_sum(row, col), self.get(row, col))
                    .expect("eight neighbors sum to at most 8")
            })
            .collect()
    }

    /// Conventional in-process generation step (the control automaton).
    pub fn step_oracle(&self) -> LifeGrid {
        let rows = par::map_indexed(self.height, |r| self.next_row(r));
        self.with_cells(rows.concat())
    }

    pub fn step_oracle_sequential(&self) -> LifeGrid {
        let rows = par::map_indexed_sequential(self.height, |r| self.next_row(r));
        self.with_cells(rows.concat())
    }

    fn with_cells(&self, cells: Vec<u8>) -> LifeGrid {
        LifeGrid {
            width: self.width,
            height: self.height,
            cells,
            generation: self.generation + 1,
        }
    }

    /// Cells that differ from `other`.
    pub fn diff_count(&self, other: &LifeGrid) -> usize {
        self.cells.iter().zip(&other.cells).filter(|(a, b)| a != b).count()
    }
}

/// Conway's rule on the eight-neighbor sum: birth on 3, survival on 2.
pub fn rule_oracle(neighbor_sum: u32, y: u8) -> Result<u8, LifeError> {
    match neighbor_sum {
        3 => Ok(1),
        2 => Ok(y),
        0..=8 => Ok(0),
        s => Err(LifeError::NeighborSumOutOfRange(s)),
    }
}

/// Probe asking "do the neighbors sum to `k`?" at generation `t`.
///
/// Words: `[0x0800][-0][t][-t][-w1][n1..n8][-k]`. The type word cancels
/// against `-w1`, identifier against sequence, so the fold is
/// `sum(n) - k` and equals `-0` exactly when the sum is `k`.
pub fn encode_cell_probe(t: u64, neighbors: &[u8; 8], k: u8) -> Result<EchoMessage, LifeError> {
    if !(k == 2 || k == 3) {
        return Err(LifeError::BadProbeConstant(k));
    }
    let identifier = OcWord((t % 32_768) as u16);
    let mut data = Vec::with_capacity(10);
    data.push(OcWord((EchoKind::Request.type_byte() as u16) << 8).oc_negate());
    data.extend(neighbors.iter().map(|&n| OcWord((n != 0) as u16)));
    data.push(OcWord::from_int(-(k as i32)).expect("small constant"));
    Ok(EchoMessage {
        kind: EchoKind::Request,
        checksum: OcWord::MINUS_ZERO,
        identifier,
        sequence: identifier.oc_negate(),
        data,
    })
}

/// A probe as sent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellProbe {
    pub cell: (usize, usize),
    pub k: u8,
    pub attempt: u8,
    pub message: EchoMessage,
}

/// Both probes answered: only corruption can do this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("both the k=2 and k=3 probes were answered")]
pub struct Conflict;

/// Next state from which probes were answered.
pub fn interpret_replies(y: u8, replied_k3: bool, replied_k2: bool) -> Result<u8, Conflict> {
    match (replied_k3, replied_k2) {
        (true, true) => Err(Conflict),
        (true, false) => Ok(1),
        (false, true) => Ok(y),
        (false, false) => Ok(0),
    }
}

/// Retry and timing knobs for [`update_step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifeConfig {
    /// Probe rounds per cell; later rounds only go to silent cells.
    pub attempts: u8,
    /// How long to collect replies after the last send of a round.
    pub reply_timeout_ms: f64,
    /// Pause after each send.
    pub send_interval_ms: f64,
    /// Do not send the k=2 probe for dead cells (its answer cannot matter).
    pub skip_k2_when_dead: bool,
}

impl Default for LifeConfig {
    fn default() -> Self {
        LifeConfig {
            attempts: 2,
            reply_timeout_ms: 10_000.0,
            send_interval_ms: 0.0,
            skip_k2_when_dead: false,
        }
    }
}

/// Counters for one generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub messages_sent: u64,
    /// Replies that matched an outstanding probe.
    pub replies: u64,
    /// Replies thrown away (stale, corrupted or unknown).
    pub discarded: u64,
    /// Cells probed again after a silent round.
    pub retries: u64,
    pub conflicts: u64,
    /// Transport time from first send to end of the last collection window.
    pub elapsed_ms: f64,
    /// Transport time from first send to the last matched reply.
    pub last_reply_ms: f64,
}

#[derive(Clone, Copy, Default)]
struct Flags {
    k2: bool,
    k3: bool,
}

impl Flags {
    fn any(self) -> bool {
        self.k2 || self.k3
    }
}

struct Round<'a, T: EchoTransport> {
    grid: &'a LifeGrid,
    transport: &'a mut T,
    assignment: &'a CellAssignment,
    cfg: &'a LifeConfig,
    probes: Vec<[EchoMessage; 2]>,
    report: StepReport,
    start_us: u64,
}

impl<T: EchoTransport> Round<'_, T> {
    fn send(&mut self, cells: &[usize]) -> Result<(), LifeError> {
        let interval = ms_to_us(self.cfg.send_interval_ms);
        for &idx in cells {
            let address = self.assignment.device_at(idx);
            let dead = self.grid.cells[idx] == 0;
            for (slot, probe) in self.probes[idx].iter().enumerate() {
                if slot == 0 && dead && self.cfg.skip_k2_when_dead {
                    continue;
                }
                self.transport.send_request(address, &probe.encode())?;
                self.report.messages_sent += 1;
                self.transport.pause(interval);
            }
        }
        Ok(())
    }

    /// Collects replies until the round's timeout has passed.
    fn collect(&mut self, flags: &mut [Flags], only: Option<&[bool]>) {
        let deadline = self.transport.now_us() + ms_to_us(self.cfg.reply_timeout_ms);
        loop {
            let batch = self.transport.wait_for_replies(deadline);
            if batch.is_empty() {
                break;
            }
            for d in batch {
                match self.match_reply(d.address, &d.payload) {
                    Some((idx, slot)) if only.is_none_or(|o| o[idx]) => {
                        self.report.replies += 1;
                        let at = d.at_us.saturating_sub(self.start_us) as f64 / 1000.0;
                        self.report.last_reply_ms = self.report.last_reply_ms.max(at);
                        if slot == 0 {
                            flags[idx].k2 = true;
                        } else {
                            flags[idx].k3 = true;
                        }
                    }
                    _ => self.report.discarded += 1,
                }
            }
            if self.transport.now_us() >= deadline {
                break;
            }
        }
    }

    /// Accepts a reply only if it is intact and echoes one of this cell's
    /// current probes exactly.
    fn match_reply(&self, address: DeviceAddress, payload: &[u8]) -> Option<(usize, usize)> {
        let idx = self.assignment.cell_of(address)?;
        let reply = EchoMessage::decode(payload).ok()?;
        if reply.kind != EchoKind::Reply || !reply.validate() {
            return None;
        }
        self.probes[idx]
            .iter()
            .position(|p| p.same_payload(&reply))
            .map(|slot| (idx, slot))
    }
}

/// Advances `grid` by one generation through `transport`.
///
/// Both probes go out for every cell, replies are collected, silent cells
/// are probed again (up to `attempts` rounds), and only then is every cell
/// updated at once from the old generation. A cell that answers both probes
/// is probed afresh once; a second conflict aborts the step.
pub fn update_step<T: EchoTransport>(
    grid: &LifeGrid,
    transport: &mut T,
    assignment: &CellAssignment,
    cfg: &LifeConfig,
) -> Result<(LifeGrid, StepReport), LifeError> {
    if assignment.len() != grid.len() {
        return Err(LifeError::AssignmentMismatch { assigned: assignment.len(), cells: grid.len() });
    }
    let t = grid.generation;
    let probes = par::map_indexed(grid.len(), |idx| {
        let n = grid.neighbors(idx / grid.width, idx % grid.width);
        [
            encode_cell_probe(t, &n, 2).expect("valid k"),
            encode_cell_probe(t, &n, 3).expect("valid k"),
        ]
    });
    let start_us = transport.now_us();
    let mut round = Round {
        grid,
        transport,
        assignment,
        cfg,
        probes,
        report: StepReport::default(),
        start_us,
    };

    let mut flags = vec![Flags::default(); grid.len()];
    let all: Vec<usize> = (0..grid.len()).collect();
    round.send(&all)?;
    round.collect(&mut flags, None);
    for _ in 1..cfg.attempts.max(1) {
        let silent: Vec<usize> = (0..grid.len()).filter(|&i| !flags[i].any()).collect();
        if silent.is_empty() {
            break;
        }
        round.report.retries += silent.len() as u64;
        round.send(&silent)?;
        round.collect(&mut flags, None);
    }

    let conflicted: Vec<usize> = (0..grid.len()).filter(|&i| flags[i].k2 && flags[i].k3).collect();
    if !conflicted.is_empty() {
        round.report.conflicts += conflicted.len() as u64;
        let mut mask = vec![false; grid.len()];
        for &i in &conflicted {
            mask[i] = true;
            flags[i] = Flags::default();
        }
        let mut pending = conflicted.clone();
        for _ in 0..cfg.attempts.max(1) {
            round.send(&pending)?;
            round.collect(&mut flags, Some(&mask));
            pending.retain(|&i| !flags[i].any());
            if pending.is_empty() {
                break;
            }
        }
        if let Some(&i) = conflicted.iter().find(|&&i| flags[i].k2 && flags[i].k3) {
            return Err(LifeError::PersistentConflict { row: i / grid.width, col: i % grid.width });
        }
    }

    let cells = (0..grid.len())
        .map(|i| {
            interpret_replies(grid.cells[i], flags[i].k3, flags[i].k2).expect("conflicts resolved")
        })
        .collect();
    let mut report = round.report;
    report.elapsed_ms = (round.transport.now_us() - start_us) as f64 / 1000.0;
    Ok((grid.with_cells(cells), report))
}

/// One row of the per-generation log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u64,
    pub messages_sent: u64,
    pub replies: u64,
    pub retries: u64,
    pub deviations: u64,
    pub elapsed_ms: f64,
}

impl GenerationRecord {
    pub const CSV_HEADER: &'static str = "generation,messages_sent,replies,retries,deviations";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.generation, self.messages_sent, self.replies, self.retries, self.deviations
        )
    }
}

/// Outcome of running the message automaton against a control automaton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub generations: u64,
    pub site_updates: u64,
    pub first_deviation: Option<u64>,
    pub deviating_generations: u64,
    /// Misclassified cells: cells where the message update of a generation
    /// differs from the rule applied to the same input.
    pub misclassified_cells: u64,
    pub aborted_steps: u64,
    pub messages_sent: u64,
    pub replies: u64,
    pub retries: u64,
    pub conflicts: u64,
    pub simulated_ms: f64,
    pub records: Vec<GenerationRecord>,
}

impl DeviationReport {
    pub fn clean(&self) -> bool {
        self.first_deviation.is_none()
    }
}

/// Runs `generations` message-driven steps next to the control automaton
/// started from the same grid, comparing cell by cell after each step.
///
/// `deviations` in each record counts cells where the two automata differ.
/// A step aborted by persistent conflict is retried up to three times.
pub fn run_with_control<T: EchoTransport>(
    initial: &LifeGrid,
    generations: u64,
    transport: &mut T,
    assignment: &CellAssignment,
    cfg: &LifeConfig,
) -> Result<DeviationReport, LifeError> {
    let mut grid = initial.clone();
    let mut control = initial.clone();
    let mut rep = DeviationReport {
        generations: 0,
        site_updates: 0,
        first_deviation: None,
        deviating_generations: 0,
        misclassified_cells: 0,
        aborted_steps: 0,
        messages_sent: 0,
        replies: 0,
        retries: 0,
        conflicts: 0,
        simulated_ms: 0.0,
        records: Vec::with_capacity(generations as usize),
    };
    let start = transport.now_us();
    for _ in 0..generations {
        let mut attempt = 0;
        let (next, step) = loop {
            match update_step(&grid, transport, assignment, cfg) {
                Ok(x) => break x,
                Err(LifeError::PersistentConflict { .. }) if attempt < 3 => {
                    attempt += 1;
                    rep.aborted_steps += 1;
                }
                Err(e) => return Err(e),
            }
        };
        rep.misclassified_cells += next.diff_count(&grid.step_oracle()) as u64;
        control = control.step_oracle();
        let deviations = next.diff_count(&control) as u64;
        grid = next;
        rep.generations += 1;
        rep.site_updates += grid.len() as u64;
        rep.messages_sent += step.messages_sent;
        rep.replies += step.replies;
        rep.retries += step.retries;
        rep.conflicts += step.conflicts;
        if deviations > 0 {
            rep.deviating_generations += 1;
            rep.first_deviation.get_or_insert(grid.generation);
        }
        rep.records.push(GenerationRecord {
            generation: grid.generation,
            messages_sent: step.messages_sent,
            replies: step.replies,
            retries: step.retries,
            deviations,
            elapsed_ms: step.elapsed_ms,
        });
    }
    rep.simulated_ms = (transport.now_us() - start) as f64 / 1000.0;
    Ok(rep)
}

/// Network of one validating device per cell, addresses `0..cells`,
/// assigned row-major.
pub fn validating_network(
    width: usize,
    height: usize,
    config: NetworkConfig,
) -> Result<(SimNetwork, CellAssignment), LifeError> {
    let devices: Vec<DeviceAddress> = (0..(width * height) as u64).map(DeviceAddress).collect();
    let net = SimNetwork::with_devices(
        config,
        devices.iter().map(|&a| (a, SimDevice::new(ResponderBehavior::Validating))),
    )?;
    let assignment = CellAssignment::new(width, height, devices)?;
    Ok((net, assignment))
}

/// Settings for the small glider equivalence run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GliderConfig {
    pub width: usize,
    pub height: usize,
    /// 2^17 site updates on a 4x4 grid.
    pub generations: u64,
    pub network: NetworkConfig,
    pub life: LifeConfig,
}

impl Default for GliderConfig {
    fn default() -> Self {
        GliderConfig {
            width: 4,
            height: 4,
            generations: 8192,
            network: NetworkConfig::lossy(1),
            life: LifeConfig::default(),
        }
    }
}

/// Message-driven glider against its control automaton.
pub fn glider_equivalence_experiment(cfg: &GliderConfig) -> Result<DeviationReport, LifeError> {
    let (mut net, assignment) = validating_network(cfg.width, cfg.height, cfg.network.clone())?;
    let initial = LifeGrid::glider(cfg.width, cfg.height)?;
    run_with_control(&initial, cfg.generations, &mut net, &assignment, &cfg.life)
}

/// Settings for the large grid run over a measured device pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LargeRunConfig {
    pub width: usize,
    pub height: usize,
    /// Candidate devices measured before filtering.
    pub devices: usize,
    pub generations: u64,
    pub density: f64,
    /// Start from a glider instead of a random grid.
    pub glider: bool,
    pub seed: u64,
    pub pool: PoolShape,
    pub probes_per_device: u32,
    pub cutoff_ms: f64,
    pub network: NetworkConfig,
    pub life: LifeConfig,
}

impl Default for LargeRunConfig {
    fn default() -> Self {
        LargeRunConfig {
            width: 200,
            height: 500,
            devices: 105_000,
            generations: 2,
            density: 0.3,
            glider: false,
            seed: 1,
            pool: PoolShape::default(),
            probes_per_device: 3,
            cutoff_ms: devicepool::DEFAULT_CUTOFF_MS,
            network: NetworkConfig::lossless(1),
            life: LifeConfig {
                reply_timeout_ms: 60_000.0,
                send_interval_ms: 5.0,
                ..LifeConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LargeRunReport {
    pub candidate_devices: usize,
    pub usable_devices: usize,
    pub assigned_devices: usize,
    pub run: DeviationReport,
}

/// Measures a synthetic pool, filters and orders it, assigns devices to
/// cells slowest first, then runs the grid against its control.
pub fn large_run(cfg: &LargeRunConfig) -> Result<LargeRunReport, LifeError> {
    let cells = cfg.width * cfg.height;
    if cells == 0 {
        return Err(LifeError::EmptyGrid);
    }
    let mut pool = devicepool::synthetic_pool(cfg.devices, &cfg.pool, (1, 0), cfg.seed);
    let mut net = devicepool::network_for(&pool, cfg.network.clone())?;
    devicepool::measure_response_times(&mut pool, &mut net, cfg.probes_per_device, 120_000.0)?;
    let ordered = devicepool::filter_and_order(&pool, cfg.cutoff_ms)?;
    let usable = ordered.len();
    let assignment = devicepool::assign_to_cells(&ordered, cfg.width, cfg.height)?;

    let initial = if cfg.glider {
        LifeGrid::glider(cfg.width, cfg.height)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11FE);
        LifeGrid::random(cfg.width, cfg.height, cfg.density, &mut rng)?
    };
    let run = run_with_control(&initial, cfg.generations, &mut net, &assignment, &cfg.life)?;
    Ok(LargeRunReport {
        candidate_devices: cfg.devices,
        usable_devices: usable,
        assigned_devices: assignment.len(),
        run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_bits(bits: u32) -> [u8; 8] {
        std::array::from_fn(|k| (bits >> k & 1) as u8)
    }

    #[test]
    fn rule_examples() {
        assert_eq!(rule_oracle(3, 0).unwrap(), 1);
        assert_eq!(rule_oracle(2, 1).unwrap(), 1);
        assert_eq!(rule_oracle(2, 0).unwrap(), 0);
        assert_eq!(rule_oracle(4, 1).unwrap(), 0);
        assert_eq!(rule_oracle(0, 1).unwrap(), 0);
        assert!(matches!(rule_oracle(9, 0), Err(LifeError::NeighborSumOutOfRange(9))));
    }

    #[test]
    fn probe_validity_is_the_sum_predicate() {
        for t in [0u64, 1, 77, 32_767, 32_768, 1 << 40] {
            for bits in 0u32..256 {
                let n = from_bits(bits);
                for k in [2u8, 3] {
                    let probe = encode_cell_probe(t, &n, k).unwrap();
                    assert_eq!(probe.validate(), bits.count_ones() == k as u32);
                }
            }
        }
    }

    #[test]
    fn probe_layout() {
        let p = encode_cell_probe(5, &[1, 1, 1, 0, 0, 0, 0, 0], 3).unwrap();
        assert!(p.validate());
        assert_eq!(p.identifier, OcWord(5));
        assert_eq!(p.sequence, OcWord(5).oc_negate());
        assert_eq!(p.checksum, OcWord::MINUS_ZERO);
        assert_eq!(p.data[0], OcWord(0xF7FF));
        assert_eq!(p.data[9], OcWord(0xFFFC));
        assert!(!encode_cell_probe(5, &[1, 1, 1, 0, 0, 0, 0, 0], 2).unwrap().validate());
        assert!(matches!(encode_cell_probe(0, &[0; 8], 4), Err(LifeError::BadProbeConstant(4))));
    }

    #[test]
    fn interpretation() {
        assert_eq!(interpret_replies(0, true, false), Ok(1));
        assert_eq!(interpret_replies(1, false, true), Ok(1));
        assert_eq!(interpret_replies(0, false, true), Ok(0));
        assert_eq!(interpret_replies(1, false, false), Ok(0));
        assert_eq!(interpret_replies(1, true, true), Err(Conflict));
    }

    #[test]
    fn block_is_still_life_on_torus() {
        let mut g = LifeGrid::new(8, 8).unwrap();
        for (r, c) in [(3, 3), (3, 4), (4, 3), (4, 4)] {
            g.set(r, c, 1);
        }
        let next = g.step_oracle();
        assert_eq!(next.cells(), g.cells());
        let (mut net, a) = validating_network(8, 8, NetworkConfig::lossless(2)).unwrap();
        let (msg, _) = update_step(&g, &mut net, &a, &LifeConfig::default()).unwrap();
        assert_eq!(msg.cells(), g.cells());
        assert_eq!(msg.generation, 1);
    }

    #[test]
    fn all_dead_stays_dead_and_nothing_replies() {
        let g = LifeGrid::new(5, 5).unwrap();
        let (mut net, a) = validating_network(5, 5, NetworkConfig::lossless(2)).unwrap();
        let (next, rep) = update_step(&g, &mut net, &a, &LifeConfig::default()).unwrap();
        assert_eq!(next.live(), 0);
        assert_eq!(rep.replies, 0);
        assert_eq!(rep.retries, 25);
        assert_eq!(rep.messages_sent, 2 * 2 * 25);
    }

    #[test]
    fn lossless_step_equals_oracle_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..5 {
            let g = LifeGrid::random(16, 16, 0.35, &mut rng).unwrap();
            let mut cfg = NetworkConfig::lossless(seed);
            cfg.reorder_window = 5;
            let (mut net, a) = validating_network(16, 16, cfg).unwrap();
            let (next, rep) = update_step(&g, &mut net, &a, &LifeConfig::default()).unwrap();
            assert_eq!(next, g.step_oracle());
            assert!(rep.messages_sent <= 4 * 256);
        }
    }

    #[test]
    fn update_ignores_send_order() {
        // a permuted assignment changes the send order, not the result
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = LifeGrid::random(6, 6, 0.4, &mut rng).unwrap();
        let mut devices: Vec<DeviceAddress> = (0..36).map(DeviceAddress).collect();
        devices.reverse();
        let net_devices = devices.iter().map(|&d| (d, SimDevice::new(ResponderBehavior::Validating)));
        let mut net = SimNetwork::with_devices(NetworkConfig::lossless(3), net_devices).unwrap();
        let a = CellAssignment::new(6, 6, devices).unwrap();
        let (next, _) = update_step(&g, &mut net, &a, &LifeConfig::default()).unwrap();
        assert_eq!(next, g.step_oracle());
    }

    #[test]
    fn stale_generation_replies_are_discarded() {
        let g = LifeGrid::glider(4, 4).unwrap();
        let mut cfg = NetworkConfig::lossless(1);
        cfg.latency = crate::transport::LatencyModel::fixed(250.0);
        let (mut net, a) = validating_network(4, 4, cfg).unwrap();
        // short timeout: replies land in the next generation's windows
        let life = LifeConfig { reply_timeout_ms: 100.0, ..LifeConfig::default() };
        let (next, rep) = update_step(&g, &mut net, &a, &life).unwrap();
        assert_eq!(rep.replies, 0);
        assert_eq!(next.live(), 0);
        let (_, rep2) = update_step(&next, &mut net, &a, &life).unwrap();
        assert!(rep2.discarded > 0);
        assert_eq!(rep2.replies, 0);
    }

    #[test]
    fn skip_k2_reduces_messages_without_changing_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = LifeGrid::random(10, 10, 0.3, &mut rng).unwrap();
        let (mut net, a) = validating_network(10, 10, NetworkConfig::lossless(3)).unwrap();
        let cfg = LifeConfig { skip_k2_when_dead: true, ..LifeConfig::default() };
        let (next, rep) = update_step(&g, &mut net, &a, &cfg).unwrap();
        assert_eq!(next, g.step_oracle());
        assert!(rep.messages_sent < 4 * 100);
    }

    #[test]
    fn glider_lossless_has_no_deviation() {
        let cfg = GliderConfig {
            generations: 64,
            network: NetworkConfig::lossless(5),
            ..GliderConfig::default()
        };
        let rep = glider_equivalence_experiment(&cfg).unwrap();
        assert!(rep.clean());
        assert_eq!(rep.site_updates, 64 * 16);
    }

    #[test]
    fn assignment_size_checked() {
        let g = LifeGrid::new(3, 3).unwrap();
        let (mut net, a) = validating_network(2, 2, NetworkConfig::lossless(0)).unwrap();
        assert!(matches!(
            update_step(&g, &mut net, &a, &LifeConfig::default()),
            Err(LifeError::AssignmentMismatch { assigned: 4, cells: 9 })
        ));
    }
}
