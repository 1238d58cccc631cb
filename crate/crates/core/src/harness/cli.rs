use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use super::{bench_throughput, BenchConfig};
use crate::devicepool::{self, PoolShape};
use crate::hopfield::{run_recall_experiment, AsyncConfig, RecallConfig};
use crate::life::{self, GenerationRecord, LargeRunConfig, LifeConfig, LifeGrid};
use crate::transport::daemon::{self, parse_mix, BehaviorMap};
use crate::transport::{LatencyModel, NetworkConfig};

/// Simulate computing with ICMP echo checksums.
#[derive(Debug, Parser)]
#[command(name = "icmpsim", version)]
struct Cli {
    /// TOML file with defaults for any subcommand flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Hopfield recall through non-validating responders.
    Neuro(NeuroArgs),
    /// Game of Life through validating responders.
    Life(LifeArgs),
    /// Measure, filter and order a device pool.
    Probe(ProbeArgs),
    /// Throughput metrics for the Hopfield workload.
    Bench(BenchArgs),
    /// Serve virtual echo devices over UDP.
    Daemon(DaemonArgs),
}

/// Options shared by file and command line. Unset values fall back to the
/// config file, then to built-in defaults.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NeuroArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    /// Coupling clip bound.
    #[arg(long)]
    l: Option<i32>,
    #[arg(long)]
    sets: Option<usize>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, env = "ICMPSIM_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    drop: Option<f64>,
    #[arg(long)]
    latency_median: Option<f64>,
    #[arg(long)]
    distance: Option<f64>,
    #[arg(long)]
    devices: Option<usize>,
    /// Pause after each send, in ms.
    #[arg(long)]
    send_interval: Option<f64>,
    /// Replay each schedule through the direct oracle and report mismatches.
    #[arg(long)]
    check_oracle: bool,
    /// Per-step CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON run summary.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LifeArgs {
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    /// Size of a measured synthetic device pool; without it every cell
    /// gets its own device.
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long, env = "ICMPSIM_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    drop: Option<f64>,
    #[arg(long)]
    corruption: Option<f64>,
    #[arg(long)]
    duplicate: Option<f64>,
    #[arg(long)]
    reorder: Option<usize>,
    /// Probe rounds per cell (1 disables retry).
    #[arg(long)]
    retries: Option<u8>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    send_interval: Option<f64>,
    #[arg(long)]
    timeout: Option<f64>,
    /// Start from a glider instead of a random grid.
    #[arg(long)]
    glider: bool,
    /// Exit 1 if any generation deviates from the control automaton.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ProbeArgs {
    /// Device file (`address, behavior, median_ms, shape`). Without it a
    /// synthetic pool of `--count` devices is used.
    #[arg(long)]
    devices: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    probes: Option<u32>,
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long, env = "ICMPSIM_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    drop: Option<f64>,
    #[arg(long)]
    histogram_out: Option<PathBuf>,
    /// Usable devices, slowest first, in device-file format.
    #[arg(long)]
    ordered_out: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, env = "ICMPSIM_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    devices: Option<usize>,
    /// Include the loopback UDP daemon path.
    #[arg(long)]
    daemon: bool,
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DaemonArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    bind: Option<String>,
    /// Explicit behaviors per address (device-file format).
    #[arg(long)]
    devices: Option<PathBuf>,
    /// Validating to non-validating ratio for unlisted addresses.
    #[arg(long)]
    behavior_mix: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Stop after this many seconds instead of running until killed.
    #[arg(long)]
    duration: Option<f64>,
}

/// Layout of the `--config` file: one optional table per subcommand, with
/// the same keys as the long flags (dashes become underscores).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Seed for every subcommand unless overridden there.
    seed: Option<u64>,
    neuro: NeuroArgs,
    life: LifeArgs,
    probe: ProbeArgs,
    bench: BenchArgs,
    daemon: DaemonArgs,
}

impl FileConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

macro_rules! merge {
    ($cli:expr, $file:expr; $($opt:ident),*; $($flag:ident),*) => {{
        let (mut c, f) = ($cli, $file);
        $( if c.$opt.is_none() { c.$opt = f.$opt; } )*
        $( c.$flag |= f.$flag; )*
        c
    }};
}

/// Runs the CLI on `argv` (including the program name) and returns the exit
/// code: 0 success, 1 failure or strict-mode deviation, 2 usage error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let file = match &cli.config {
        Some(p) => match std::fs::read_to_string(p).map_err(|e| e.to_string()).and_then(|t| FileConfig::from_toml(&t)) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("error: config {}: {e}", p.display());
                return 2;
            }
        },
        None => FileConfig::default(),
    };
    let result = match cli.command {
        Command::Neuro(a) => {
            let mut f = file.neuro;
            f.seed = f.seed.or(file.seed);
            neuro(merge!(a, f; n, p, l, sets, probes, steps, seed, drop, latency_median, distance, devices, send_interval, out, summary; check_oracle))
        }
        Command::Life(a) => {
            let mut f = file.life;
            f.seed = f.seed.or(file.seed);
            life_cmd(merge!(a, f; width, height, steps, devices, seed, drop, corruption, duplicate, reorder, retries, density, send_interval, timeout, out, summary; glider, strict))
        }
        Command::Probe(a) => {
            let mut f = file.probe;
            f.seed = f.seed.or(file.seed);
            probe(merge!(a, f; devices, count, probes, cutoff, seed, drop, histogram_out, ordered_out, summary;))
        }
        Command::Bench(a) => {
            let mut f = file.bench;
            f.seed = f.seed.or(file.seed);
            bench(merge!(a, f; n, steps, seed, devices, summary; daemon))
        }
        Command::Daemon(a) => {
            daemon_cmd(merge!(a, file.daemon; port, bind, devices, behavior_mix, workers, duration;))
        }
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

enum CliError {
    Usage(String),
    Run(String),
}

fn run_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Run(e.to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

fn emit_summary<S: Serialize>(summary: &S, path: Option<&Path>) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(summary).map_err(run_err)?;
    if let Some(p) = path {
        write_file(p, &(json.clone() + "\n"))?;
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "{json}").map_err(run_err)
}

fn probability(name: &str, p: Option<f64>) -> Result<f64, CliError> {
    let p = p.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&p) {
        return Err(CliError::Usage(format!("--{name} must be in [0, 1], got {p}")));
    }
    Ok(p)
}

fn neuro(a: NeuroArgs) -> Result<i32, CliError> {
    let d = RecallConfig::default();
    let seed = a.seed.unwrap_or(d.seed);
    let mut network = NetworkConfig::lossless(seed);
    network.drop_probability = probability("drop", a.drop)?;
    if let Some(m) = a.latency_median {
        network.latency = LatencyModel::log_normal(m, network.latency.shape);
    }
    let cfg = RecallConfig {
        neurons: a.n.unwrap_or(d.neurons),
        patterns: a.p.unwrap_or(d.patterns),
        bound: a.l.unwrap_or(d.bound),
        sets: a.sets.unwrap_or(d.sets),
        probes_per_set: a.probes.unwrap_or(d.probes_per_set),
        initial_distance: a.distance.unwrap_or(d.initial_distance),
        steps: a.steps.unwrap_or(d.steps),
        seed,
        devices: a.devices.unwrap_or(d.devices),
        network,
        driver: AsyncConfig { send_interval_ms: a.send_interval.unwrap_or(0.0), ..d.driver },
        check_oracle: a.check_oracle,
    };
    let curves = run_recall_experiment(&cfg).map_err(|e| match e {
        crate::hopfield::HopfieldError::InvalidConfig(m) => CliError::Usage(m),
        crate::hopfield::HopfieldError::MagnitudeBound(_) | crate::hopfield::HopfieldError::ZeroBound => {
            CliError::Usage(e.to_string())
        }
        other => run_err(other),
    })?;
    if let Some(path) = &a.out {
        let mut csv = String::from("step,mean_distance_async,mean_distance_parallel\n");
        for (t, (x, y)) in curves.async_message.iter().zip(&curves.parallel).enumerate() {
            let _ = writeln!(csv, "{t},{x:.6},{y:.6}");
        }
        write_file(path, &csv)?;
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a RecallConfig,
        final_distance_async: f64,
        final_distance_parallel: f64,
        oracle_mismatches: Option<u64>,
        stats: crate::hopfield::AsyncStats,
        simulated_ms: f64,
    }
    emit_summary(
        &Summary {
            config: &cfg,
            final_distance_async: *curves.async_message.last().unwrap_or(&0.0),
            final_distance_parallel: *curves.parallel.last().unwrap_or(&0.0),
            oracle_mismatches: cfg.check_oracle.then_some(curves.oracle_mismatches),
            stats: curves.stats,
            simulated_ms: curves.simulated_ms,
        },
        a.summary.as_deref(),
    )?;
    Ok(0)
}

fn life_cmd(a: LifeArgs) -> Result<i32, CliError> {
    let seed = a.seed.unwrap_or(1);
    let mut network = NetworkConfig::lossless(seed);
    network.drop_probability = probability("drop", a.drop)?;
    network.corruption_probability = probability("corruption", a.corruption)?;
    network.duplicate_probability = probability("duplicate", a.duplicate)?;
    network.reorder_window = a.reorder.unwrap_or(0);
    let attempts = a.retries.unwrap_or(2);
    if attempts == 0 {
        return Err(CliError::Usage("--retries must be at least 1".into()));
    }
    let (width, height) = if a.glider { (a.width.unwrap_or(4), a.height.unwrap_or(4)) } else { (a.width.unwrap_or(16), a.height.unwrap_or(16)) };
    if width == 0 || height == 0 {
        return Err(CliError::Usage("grid dimensions must be positive".into()));
    }
    let steps = a.steps.unwrap_or(if a.glider { 8192 } else { 16 });
    let density = a.density.unwrap_or(0.3);

    #[derive(Serialize)]
    struct Summary {
        width: usize,
        height: usize,
        seed: u64,
        attempts: u8,
        candidate_devices: Option<usize>,
        usable_devices: Option<usize>,
        generations: u64,
        site_updates: u64,
        first_deviation: Option<u64>,
        deviating_generations: u64,
        misclassified_cells: u64,
        aborted_steps: u64,
        messages_sent: u64,
        replies: u64,
        retries: u64,
        conflicts: u64,
        simulated_ms: f64,
    }

    let (report, pool_counts) = if let Some(devices) = a.devices {
        let d = LargeRunConfig::default();
        let cfg = LargeRunConfig {
            width,
            height,
            devices,
            generations: steps,
            density,
            seed,
            glider: a.glider,
            network,
            life: LifeConfig {
                attempts,
                reply_timeout_ms: a.timeout.unwrap_or(d.life.reply_timeout_ms),
                send_interval_ms: a.send_interval.unwrap_or(d.life.send_interval_ms),
                ..d.life
            },
            ..d
        };
        let r = life::large_run(&cfg).map_err(run_err)?;
        (r.run, Some((r.candidate_devices, r.usable_devices)))
    } else {
        let cfg = LifeConfig {
            attempts,
            reply_timeout_ms: a.timeout.unwrap_or(LifeConfig::default().reply_timeout_ms),
            send_interval_ms: a.send_interval.unwrap_or(0.0),
            ..LifeConfig::default()
        };
        let initial = if a.glider {
            LifeGrid::glider(width, height)
        } else {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x11FE);
            LifeGrid::random(width, height, density, &mut rng)
        }
        .map_err(run_err)?;
        let (mut net, assignment) = life::validating_network(initial.width(), initial.height(), network).map_err(run_err)?;
        let r = life::run_with_control(&initial, steps, &mut net, &assignment, &cfg).map_err(run_err)?;
        (r, None)
    };

    if let Some(path) = &a.out {
        let mut csv = String::from(GenerationRecord::CSV_HEADER);
        csv.push('\n');
        for r in &report.records {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        write_file(path, &csv)?;
    }
    emit_summary(
        &Summary {
            width,
            height,
            seed,
            attempts,
            candidate_devices: pool_counts.map(|p| p.0),
            usable_devices: pool_counts.map(|p| p.1),
            generations: report.generations,
            site_updates: report.site_updates,
            first_deviation: report.first_deviation,
            deviating_generations: report.deviating_generations,
            misclassified_cells: report.misclassified_cells,
            aborted_steps: report.aborted_steps,
            messages_sent: report.messages_sent,
            replies: report.replies,
            retries: report.retries,
            conflicts: report.conflicts,
            simulated_ms: report.simulated_ms,
        },
        a.summary.as_deref(),
    )?;
    if a.strict && !report.clean() {
        eprintln!(
            "deviation from the control automaton at generation {}",
            report.first_deviation.unwrap_or_default()
        );
        return Ok(1);
    }
    Ok(0)
}

fn probe(a: ProbeArgs) -> Result<i32, CliError> {
    let seed = a.seed.unwrap_or(1);
    let mut pool = match &a.devices {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Run(format!("{}: {e}", p.display())))?;
            devicepool::parse_device_file(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => devicepool::synthetic_pool(a.count.unwrap_or(1000), &PoolShape::default(), (1, 0), seed),
    };
    let mut network = NetworkConfig::lossless(seed);
    network.drop_probability = probability("drop", a.drop)?;
    let mut net = devicepool::network_for(&pool, network).map_err(run_err)?;
    let probes = a.probes.unwrap_or(devicepool::DEFAULT_PROBES);
    let cutoff = a.cutoff.unwrap_or(devicepool::DEFAULT_CUTOFF_MS);
    devicepool::measure_response_times(&mut pool, &mut net, probes, 6.0 * cutoff).map_err(run_err)?;
    if let Some(path) = &a.histogram_out {
        let h = devicepool::histogram(&pool, devicepool::log_bins(1.0, 100_000.0, 4).map_err(run_err)?).map_err(run_err)?;
        write_file(path, &h.to_csv())?;
    }
    let ordered = devicepool::filter_and_order(&pool, cutoff).map_err(run_err)?;
    if let Some(path) = &a.ordered_out {
        write_file(path, &devicepool::write_device_file(&ordered))?;
    }
    #[derive(Serialize)]
    struct Summary {
        candidates: usize,
        answered: usize,
        usable: usize,
        over_cutoff: usize,
        cutoff_ms: f64,
        probes_per_device: u32,
        slowest_usable_ms: Option<f64>,
        fastest_usable_ms: Option<f64>,
    }
    let answered = pool.iter().filter(|d| d.measured_mean_ms.is_some()).count();
    emit_summary(
        &Summary {
            candidates: pool.len(),
            answered,
            usable: ordered.len(),
            over_cutoff: answered - ordered.len(),
            cutoff_ms: cutoff,
            probes_per_device: probes,
            slowest_usable_ms: ordered.first().and_then(|d| d.measured_mean_ms),
            fastest_usable_ms: ordered.last().and_then(|d| d.measured_mean_ms),
        },
        a.summary.as_deref(),
    )?;
    Ok(0)
}

fn bench(a: BenchArgs) -> Result<i32, CliError> {
    let d = BenchConfig::default();
    let cfg = BenchConfig {
        neurons: a.n.unwrap_or(d.neurons),
        steps: a.steps.unwrap_or(d.steps),
        seed: a.seed.unwrap_or(d.seed),
        devices: a.devices.unwrap_or(d.devices),
        daemon: a.daemon,
        ..d
    };
    let report = bench_throughput(&cfg).map_err(run_err)?;
    emit_summary(&report, a.summary.as_deref())?;
    Ok(0)
}

fn daemon_cmd(a: DaemonArgs) -> Result<i32, CliError> {
    let (v, nv) = match &a.behavior_mix {
        Some(m) => parse_mix(m).map_err(CliError::Usage)?,
        None => (1, 0),
    };
    let mut behaviors = BehaviorMap::new(v, nv);
    if let Some(p) = &a.devices {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Run(format!("{}: {e}", p.display())))?;
        for d in devicepool::parse_device_file(&text).map_err(|e| CliError::Usage(e.to_string()))? {
            behaviors.insert(d.address, d.behavior);
        }
    }
    let bind = format!("{}:{}", a.bind.as_deref().unwrap_or("127.0.0.1"), a.port.unwrap_or(7007));
    let handle = daemon::spawn(bind.as_str(), behaviors, a.workers.unwrap_or(2)).map_err(run_err)?;
    eprintln!("serving on {}", handle.local_addr());
    match a.duration {
        Some(s) => std::thread::sleep(Duration::from_secs_f64(s.max(0.0))),
        None => loop {
            std::thread::sleep(Duration::from_secs(3600));
        },
    }
    let answered = handle.stop().map_err(run_err)?;
    eprintln!("answered {answered} requests");
    Ok(0)
}
