use std::collections::BTreeMap;

use pullsched_core::harness::{
    compute_metrics, parse_log, render_csv, render_log, run_pull, scenarios, steady_state_throughput, LogEvent,
    LogKind, PullScenario, WorkloadSpec,
};

fn small(seed: u64) -> PullScenario {
    PullScenario {
        hosts: 6,
        slots_per_host: 2,
        seed,
        time_scale: 10.0,
        faulty_fraction: 0.5,
        fault_rate: 0.2,
        workload: WorkloadSpec::Mixed { classes: vec![(60, 60.0), (12, 300.0)] },
        ..Default::default()
    }
}

#[test]
fn same_seed_gives_identical_event_log() {
    let a = run_pull(&small(5)).unwrap();
    let b = run_pull(&small(5)).unwrap();
    let c = run_pull(&small(6)).unwrap();
    assert!(a.all_done);
    assert_eq!(render_log(&a.events), render_log(&b.events));
    assert_ne!(render_log(&a.events), render_log(&c.events));
}

#[test]
fn event_log_round_trips_and_reproduces_the_census() {
    let out = run_pull(&small(9)).unwrap();
    let text = render_log(&out.events);
    let parsed = parse_log(&text).unwrap();
    assert_eq!(parsed, out.events);
    let recomputed = compute_metrics(&parsed, 60.0).unwrap();
    assert_eq!(recomputed.rows.len(), out.metrics.rows.len());
    for (a, b) in recomputed.rows.iter().zip(&out.metrics.rows) {
        assert_eq!((a.idle, a.matched, a.running, a.completed, a.turnover), (b.idle, b.matched, b.running, b.completed, b.turnover));
    }
    assert!(render_csv(&out.metrics).starts_with("t_s,idle,matched,running,completed,dropped,turnover,hb_p50_ms,hb_p99_ms"));
}

/// Job states at time `t` from the last event of each job at or before `t`.
fn census(events: &[LogEvent], t_us: i64) -> [u64; 5] {
    let mut last: BTreeMap<u64, LogKind> = BTreeMap::new();
    for e in events.iter().take_while(|e| e.t_us <= t_us) {
        if let Some(j) = e.job_id {
            last.insert(j, e.event);
        }
    }
    let mut counts = [0u64; 5];
    for kind in last.values() {
        let slot = match kind {
            LogKind::Submitted | LogKind::MatchExpired | LogKind::Dropped => 0,
            LogKind::Matched => 1,
            LogKind::Started => 2,
            LogKind::Completed => 3,
            LogKind::Removed => 4,
            LogKind::MachineBoot => continue,
        };
        counts[slot] += 1;
    }
    counts
}

#[test]
fn metrics_rows_match_an_independent_census() {
    let out = run_pull(&small(3)).unwrap();
    assert!(out.metrics.summary.dropped > 0, "scenario should exercise drops");
    for row in &out.metrics.rows {
        let c = census(&out.events, (row.t_s * 1e6).round() as i64);
        assert_eq!([row.idle, row.matched, row.running, row.completed, row.removed], c, "row at {} s", row.t_s);
        assert!(row.conserved());
    }
}

#[test]
fn uniform_hour_of_minute_jobs_runs_at_slots_per_minute() {
    let sc = PullScenario { workload: WorkloadSpec::Uniform { count: 3600, duration_s: 60.0 }, ..scenarios::throughput(60.0) };
    let out = run_pull(&sc).unwrap();
    assert!(out.all_done);
    let rate = steady_state_throughput(&out.events, sc.slots()).unwrap();
    assert!((rate - 3.0).abs() < 0.15, "rate {rate}");
    // 20 waves of 60 s plus scheduling slack
    let makespan_min = out.metrics.summary.makespan_s / 60.0;
    assert!((20.0..22.0).contains(&makespan_min), "makespan {makespan_min}");
}

#[test]
fn stock_scenarios_have_the_documented_shapes() {
    assert_eq!(scenarios::throughput(60.0).slots(), 180);
    assert_eq!(scenarios::mixed().slots(), 540);
    assert_eq!(scenarios::mixed().workload.total_jobs(), 8100);
    let large = scenarios::large_cluster();
    assert_eq!(large.slots(), 2000);
    assert_eq!(large.workload.total_jobs(), 10_000);
}
