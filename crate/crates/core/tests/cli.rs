use std::fs;
use std::process::{Command, Output};

fn icmpsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icmpsim"))
        .args(args)
        .env_remove("ICMPSIM_SEED")
        .output()
        .expect("binary runs")
}

#[test]
fn neuro_writes_csv_with_fixed_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let o = icmpsim(&[
        "neuro", "--n", "64", "--p", "4", "--sets", "2", "--probes", "2", "--steps", "3", "--seed", "1",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,mean_distance_async,mean_distance_parallel"));
    assert_eq!(lines.next(), Some("0,0.250000,0.250000"));
    assert_eq!(csv.lines().count(), 5);
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["config"]["neurons"], 64);
}

#[test]
fn unknown_flag_exits_2() {
    let o = icmpsim(&["life", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert_eq!(icmpsim(&["nonsense"]).status.code(), Some(2));
    assert_eq!(icmpsim(&["--help"]).status.code(), Some(0));
}

#[test]
fn strict_glider_run_exits_zero_on_clean_network() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("life.csv");
    let o = icmpsim(&[
        "life", "--width", "4", "--height", "4", "--glider", "--steps", "512", "--strict", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("generation,messages_sent,replies,retries,deviations\n1,"));
    assert_eq!(csv.lines().count(), 513);
}

#[test]
fn strict_mode_fails_on_deviation() {
    let o = icmpsim(&[
        "life", "--glider", "--steps", "64", "--drop", "0.5", "--retries", "1", "--strict",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn same_seed_gives_identical_csv_and_env_seed_applies() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed_env: Option<&str>, extra: &[&str]| {
        let path = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_icmpsim"));
        cmd.args(["life", "--width", "10", "--height", "10", "--steps", "20", "--drop", "0.05", "--out"])
            .arg(&path)
            .args(extra)
            .env_remove("ICMPSIM_SEED");
        if let Some(s) = seed_env {
            cmd.env("ICMPSIM_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(&path).unwrap()
    };
    let a = run("a.csv", None, &["--seed", "9"]);
    let b = run("b.csv", None, &["--seed", "9"]);
    let c = run("c.csv", Some("9"), &[]);
    let d = run("d.csv", Some("10"), &[]);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_ne!(a, d);
}

#[test]
fn config_file_supplies_defaults_and_cli_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("n.csv");
    fs::write(
        &cfg,
        format!(
            "seed = 4\n[neuro]\nn = 48\np = 3\nsets = 1\nprobes = 1\nsteps = 7\nout = {:?}\n",
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    let o = icmpsim(&["--config", cfg.to_str().unwrap(), "neuro", "--steps", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["config"]["neurons"], 48);
    assert_eq!(summary["config"]["steps"], 2);
    assert_eq!(summary["config"]["seed"], 4);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 4);

    fs::write(&cfg, "[neuro]\nbogus = 1\n").unwrap();
    assert_eq!(icmpsim(&["--config", cfg.to_str().unwrap(), "neuro"]).status.code(), Some(2));
}

#[test]
fn probe_reads_device_file_and_writes_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let devices = dir.path().join("devices.txt");
    let hist = dir.path().join("hist.csv");
    let ordered = dir.path().join("ordered.txt");
    fs::write(&devices, "# address, behavior, median_ms, shape\n1, v, 12, 0\n2, nv, 15000, 0\n3, v, 400, 0\n").unwrap();
    let o = icmpsim(&[
        "probe", "--devices", devices.to_str().unwrap(), "--probes", "3", "--histogram-out",
        hist.to_str().unwrap(), "--ordered-out", ordered.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["usable"], 2);
    assert_eq!(summary["over_cutoff"], 1);
    let kept: Vec<String> = fs::read_to_string(&ordered)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').next().unwrap().to_owned())
        .collect();
    assert_eq!(kept, ["3", "1"]);
    assert!(fs::read_to_string(&hist).unwrap().starts_with("lower_ms,upper_ms,count\n"));
}

#[test]
fn bench_reports_metrics() {
    let o = icmpsim(&["bench", "--n", "64", "--steps", "1"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["in_process"]["cups"].as_f64().unwrap() > 0.0);
    assert_eq!(v["in_process"]["messages_sent"], v["in_process"]["replies_received"]);
    assert_eq!(v["context"]["message_path_cups"], 760000.0);
}

#[test]
fn daemon_runs_for_a_bounded_time() {
    let o = icmpsim(&["daemon", "--port", "0", "--behavior-mix", "3:1", "--duration", "0.1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("serving on 127.0.0.1:"));
}
