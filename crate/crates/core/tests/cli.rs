use std::path::Path;
use std::process::{Command, Output};

fn reflora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reflora"))
        .args(args)
        .env("REFLORA_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).expect("output written")
}

#[test]
fn happy_path_writes_trace_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.csv");
    let o = reflora(&[
        "mf",
        "--method",
        "reflora",
        "--eta",
        "0.01",
        "--steps",
        "200",
        "--seed",
        "42",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(o.stdout.is_empty());
    let text = read(&out);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# reflora "));
    assert!(lines.next().unwrap().starts_with("# command: reflora mf "));
    assert_eq!(lines.next().unwrap(), "# seed: 42");
    assert_eq!(lines.next().unwrap(), reflora::harness::TRACE_HEADER);
    assert_eq!(lines.count(), 201);
}

#[test]
fn exit_codes() {
    let usage = reflora(&[
        "mf",
        "--eta",
        "0",
        "--mode",
        "theorem-exact",
        "--lipschitz",
        "1",
    ]);
    assert_eq!(usage.status.code(), Some(2));
    let err = String::from_utf8_lossy(&usage.stderr);
    assert!(
        err.contains("--eta") && err.contains("discontinuous"),
        "{err}"
    );

    let bad_rank = reflora(&["mf", "--m", "4", "--n", "4", "--r", "2", "--rank", "9"]);
    assert_eq!(bad_rank.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_rank.stderr).contains("--rank"));

    let missing_config = reflora(&["mf", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(missing_config.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing_config.stderr).contains("--config"));

    let dir = tempfile::tempdir().unwrap();
    let unwritable = dir.path().join("missing-dir").join("out.csv");
    let runtime = reflora(&[
        "bound-scan",
        "--points",
        "3",
        "--seed",
        "1",
        "--out",
        unwritable.to_str().unwrap(),
    ]);
    assert_eq!(runtime.status.code(), Some(1));

    assert_eq!(reflora(&["--help"]).status.code(), Some(0));
    assert_eq!(reflora(&["--version"]).status.code(), Some(0));
}

#[test]
fn every_subcommand_exists() {
    for sub in [
        "mf",
        "linreg",
        "bound-scan",
        "compare",
        "overhead",
        "props-report",
    ] {
        let o = reflora(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
    }
}

#[test]
fn config_file_matches_flags_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# comparison at two rates\nproblem = mf\nm = 20\nn = 16\nr = 3\nmethods = lora, reflora, reflora-s\n\
         etas = 0.01, 0.02\nsteps = 30\nlog_every = 3\nseed = 7\noptimizer = adamw\nweight-decay = 0.01\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("flags.csv"), dir.path().join("config.csv"));
    let flags = reflora(&[
        "compare",
        "--problem",
        "mf",
        "--m",
        "20",
        "--n",
        "16",
        "--r",
        "3",
        "--methods",
        "lora,reflora,reflora-s",
        "--etas",
        "0.01,0.02",
        "--steps",
        "30",
        "--log-every",
        "3",
        "--seed",
        "7",
        "--optimizer",
        "adamw",
        "--weight-decay",
        "0.01",
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(
        flags.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&flags.stderr)
    );
    let config = reflora(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_eq!(
        config.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&config.stderr)
    );
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn flags_override_config_entries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "m = 12\nn = 10\nr = 2\nsteps = 50\nseed = 3\nmethod = lora\n",
    )
    .unwrap();
    let o = reflora(&[
        "mf",
        "--steps",
        "5",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "scaledgd",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let command = text.lines().nth(1).unwrap();
    assert!(
        command.contains("--steps 5 ") && command.contains("--method scaledgd "),
        "{command}"
    );
}

fn rerun_header_command(args: &[&str]) {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.csv");
    let mut full: Vec<&str> = args.to_vec();
    let first_str = first.to_str().unwrap().to_string();
    full.extend(["--out", &first_str]);
    let o = reflora(&full);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = read(&first);
    let command = text
        .lines()
        .find_map(|l| l.strip_prefix("# command: reflora "))
        .expect("command line in header");
    let replay: Vec<&str> = command.split_whitespace().collect();
    let again = reflora(&replay);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn header_command_reproduces_output() {
    rerun_header_command(&[
        "mf",
        "--m",
        "16",
        "--n",
        "12",
        "--r",
        "2",
        "--steps",
        "40",
        "--mode",
        "theorem-exact",
    ]);
    rerun_header_command(&[
        "linreg",
        "--m",
        "6",
        "--n",
        "5",
        "--k",
        "9",
        "--steps",
        "25",
        "--method",
        "reflora-s",
    ]);
    rerun_header_command(&[
        "bound-scan",
        "--eta-min",
        "-0.25",
        "--eta-max",
        "0.5",
        "--points",
        "31",
    ]);
    rerun_header_command(&["props-report", "--trials", "2"]);
}

#[test]
fn props_report_passes_and_fault_fails() {
    let ok = reflora(&["props-report", "--trials", "1", "--seed", "11"]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    let bad = reflora(&[
        "props-report",
        "--trials",
        "5",
        "--seed",
        "11",
        "--inject-fault",
    ]);
    assert_ne!(bad.status.code(), Some(0));
    let table = String::from_utf8(bad.stdout).unwrap();
    let stationarity = table
        .lines()
        .find(|l| l.starts_with("stationarity"))
        .expect("row present");
    assert!(stationarity.ends_with("FAIL"), "{stationarity}");
}
