//! Multi-process runs: real server, agent and baseline binaries on loopback.

use std::path::PathBuf;

use pullsched_core::harness::{compute_metrics, parse_log};
use pullsched_net::bench::{run, BenchOptions, Mode, Scenario};

fn bin_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_server")).parent().unwrap().to_path_buf()
}

#[test]
fn faulty_agents_drop_jobs_and_everything_still_completes() {
    let out = tempfile::tempdir().unwrap();
    let opts = BenchOptions {
        hosts: Some(3),
        slots: Some(12),
        jobs: Some(48),
        job_length_s: 60.0,
        time_scale: Some(60.0),
        fault_rate: Some(0.3),
        seed: 5,
        bin_dir: Some(bin_dir()),
        timeout_s: 120.0,
        ..BenchOptions::new(Scenario::Throughput, Mode::Wire, out.path())
    };
    let summary = run(&opts).unwrap();
    assert_eq!(summary["all_done"], true, "{summary:#}");
    assert_eq!(summary["accounting"]["completed"], 48);
    assert!(summary["metrics"]["dropped"].as_u64().unwrap() > 0, "{summary:#}");

    let events = parse_log(&std::fs::read_to_string(out.path().join("events.log")).unwrap()).unwrap();
    let series = compute_metrics(&events, 60.0).unwrap();
    assert!(series.rows.iter().all(|r| r.conserved()));
    assert_eq!(series.summary.completed, 48);
    assert_eq!(series.summary.dropped, summary["server"]["drops"].as_u64().unwrap());
    let csv = std::fs::read_to_string(out.path().join("metrics.csv")).unwrap();
    assert!(csv.lines().skip(1).any(|l| l.split(',').nth(5).is_some_and(|d| d != "0")), "dropped column stays 0");
    assert!(out.path().join("logs/server.log").exists());
}

#[test]
fn push_baseline_over_the_wire_respects_the_throttle_and_loses_nothing() {
    let out = tempfile::tempdir().unwrap();
    let opts = BenchOptions {
        hosts: Some(2),
        slots: Some(20),
        queue_lengths: Some(vec![10, 400]),
        window_s: Some(30.0),
        bin_dir: Some(bin_dir()),
        ..BenchOptions::new(Scenario::BaselineQueue, Mode::Wire, out.path())
    };
    let summary = run(&opts).unwrap();
    assert_eq!(summary["throttle_violations"], 0, "{summary:#}");
    assert_eq!(summary["lost_jobs"], 0, "{summary:#}");
    let samples = summary["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 2);
    for s in samples {
        let rate = s["achieved_rate"].as_f64().unwrap();
        assert!(rate > 0.0 && rate <= 2.0 + 0.2, "{s}");
    }
    let csv = std::fs::read_to_string(out.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
