use std::path::Path;
use std::process::{Command, Output};

use recorp::format::{parse_metrics, parse_policy, parse_workload, Verdict};

fn recorp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recorp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn generate_synthesize_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = recorp(
        &[
            "generate",
            "--kind",
            "col",
            "--count",
            "3",
            "--topology",
            "mesh:10:3.5",
            "--base-period",
            "60",
            "--out",
            "w.toml",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    parse_workload(&std::fs::read_to_string(d.join("w.toml")).unwrap()).unwrap();

    let o = recorp(
        &[
            "synthesize",
            "--workload",
            "w.toml",
            "--m",
            "0.7",
            "--out",
            "p.toml",
            "--metrics",
            "m.json",
            "--dump-lp",
            "lp.txt",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    parse_policy(&std::fs::read_to_string(d.join("p.toml")).unwrap()).unwrap();
    let m = parse_metrics(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m.verdict, Verdict::Schedulable);
    assert!(std::fs::read_to_string(d.join("lp.txt")).unwrap().contains("maximize"));

    let o = recorp(
        &[
            "simulate",
            "--workload",
            "w.toml",
            "--policy",
            "p.toml",
            "--hyperperiods",
            "300",
            "--csv",
            "win.csv",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("win.csv")).unwrap();
    assert!(csv.starts_with("window,pdr\n"));
    assert_eq!(csv.lines().count(), 4);

    let o = recorp(
        &[
            "simulate",
            "--workload",
            "w.toml",
            "--policy",
            "p.toml",
            "--links",
            "constant:0.5",
        ],
        d,
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn unschedulable_exits_one_with_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let w = "[topology]\nnodes = [0, 1]\nedges = [[1, 0]]\nbase_station = 0\n\n[[flow]]\nid = 0\nphase = 0\nperiod = 10\ndeadline = 3\nreliability = 0.99\npath = [1, 0]\n";
    std::fs::write(d.join("w.toml"), w).unwrap();
    let o = recorp(&["synthesize", "--workload", "w.toml", "--metrics", "m.json"], d);
    assert_eq!(code(&o), 1);
    let m = parse_metrics(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m.verdict, Verdict::Unschedulable);
    assert_eq!(m.unschedulable.unwrap().slot, 3);
}

#[test]
fn input_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&recorp(&["synthesize", "--no-such-flag"], d)), 2);
    assert_eq!(code(&recorp(&["synthesize", "--workload", "missing.toml"], d)), 2);
    std::fs::write(
        d.join("bad.toml"),
        "[topology]\nnodes = [0]\nedges = []\nbase_station = \"x\"\n",
    )
    .unwrap();
    let o = recorp(&["synthesize", "--workload", "bad.toml"], d);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("base_station") && err.contains("line 4"), "{err}");
}

#[test]
fn config_file_feeds_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), "m = 0.6\nservice_cap = 1\n").unwrap();
    let o = recorp(&["maxflows", "--config", "c.toml"], d);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["max_flows"], 16);
    std::fs::write(d.join("bad.toml"), "colour = 1\n").unwrap();
    assert_eq!(code(&recorp(&["maxflows", "--config", "bad.toml"], d)), 2);
}

#[test]
fn verify_quick_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = recorp(&["verify", "--seed", "42", "--quick", "--json", "r.json"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("pass"));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert!(v.as_array().unwrap().iter().all(|r| r["failures"] == 0));
}

#[test]
fn capacity_reports_packet_rate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = recorp(
        &[
            "generate",
            "--kind",
            "col",
            "--count",
            "4",
            "--topology",
            "star:4",
            "--base-period",
            "100",
            "--out",
            "w.toml",
        ],
        d,
    );
    assert_eq!(code(&o), 0);
    let o = recorp(&["capacity", "--workload", "w.toml", "--max-base", "200"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["packets_per_second"].as_f64().unwrap() > 0.0);
}
