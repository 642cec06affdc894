//! Experiment driver behind `bench run`.
//!
//! Embedded mode runs the in-process harness under a virtual clock. Wire mode
//! launches the sibling `server`, `agent` and `baseline` binaries as real
//! processes on loopback ports, drives them over HTTP, and rebuilds the
//! event log from the service's history. Both write `events.log`,
//! `metrics.csv` and `summary.json` into the output directory.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use pullsched_core::agent::ApiError;
use pullsched_core::clock::{Clock, SystemClock};
use pullsched_core::harness::sweep::{measure_throughput, render_sweep_csv, spearman, window_violations, SweepSample};
use pullsched_core::harness::{
    attach_server_samples, compute_metrics, emit_report, generate_workload, ideal_throughput, render_log, scenarios,
    steady_state_throughput, LogEvent, LogKind, PullScenario, ServerSample, WorkloadSpec,
};
use pullsched_core::baseline::THROTTLE_WINDOW_S;
use pullsched_core::model::{HistoryEvent, HistoryKind, Timestamp};
use pullsched_core::service::{QueryFilter, QueryKind, QueryRows, SubmitRequest};
use serde_json::{json, Value};
use tracing::info;

use crate::baselined::BaselineStats;
use crate::client::SchedulerClient;
use crate::http::JsonClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scenario {
    Throughput,
    LargeCluster,
    Mixed,
    BaselineQueue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Embedded,
    Wire,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub scenario: Scenario,
    pub mode: Mode,
    /// Total slots; split evenly across hosts.
    pub slots: Option<u32>,
    pub hosts: Option<u32>,
    pub time_scale: Option<f64>,
    pub seed: u64,
    pub out: PathBuf,
    /// Job length for the throughput scenario, paper seconds.
    pub job_length_s: f64,
    /// Overrides the job count of the throughput scenario.
    pub jobs: Option<u64>,
    pub fault_rate: Option<f64>,
    pub faulty_fraction: Option<f64>,
    pub heartbeat_interval_s: Option<f64>,
    /// Queue lengths for the baseline sweep.
    pub queue_lengths: Option<Vec<usize>>,
    /// Paper seconds measured per sweep bucket.
    pub window_s: Option<f64>,
    /// Directory holding the sibling binaries; defaults to this executable's.
    pub bin_dir: Option<PathBuf>,
    /// Real seconds after which a wire-mode run gives up.
    pub timeout_s: f64,
}

impl BenchOptions {
    pub fn new(scenario: Scenario, mode: Mode, out: impl Into<PathBuf>) -> Self {
        BenchOptions {
            scenario,
            mode,
            slots: None,
            hosts: None,
            time_scale: None,
            seed: 1,
            out: out.into(),
            job_length_s: 60.0,
            jobs: None,
            fault_rate: None,
            faulty_fraction: None,
            heartbeat_interval_s: None,
            queue_lengths: None,
            window_s: None,
            bin_dir: None,
            timeout_s: 3600.0,
        }
    }
}

/// The pull-model scenario with command-line overrides applied.
pub fn pull_scenario(o: &BenchOptions) -> anyhow::Result<PullScenario> {
    let base = match o.scenario {
        Scenario::Throughput => scenarios::throughput(o.job_length_s),
        Scenario::Mixed => scenarios::mixed(),
        Scenario::LargeCluster => scenarios::large_cluster(),
        Scenario::BaselineQueue => bail!("baseline-queue is not a pull scenario"),
    };
    let mut sc = scenarios::with_cluster(base, o.hosts, o.slots);
    if o.scenario == Scenario::Throughput {
        let waves = (scenarios::THROUGHPUT_BACKLOG_S / o.job_length_s).ceil() as u64 + 1;
        let count = o.jobs.unwrap_or(sc.slots() * waves);
        sc.workload = WorkloadSpec::Uniform { count, duration_s: o.job_length_s };
    }
    if let Some(x) = o.time_scale {
        sc.time_scale = x;
    }
    if let Some(h) = o.heartbeat_interval_s {
        sc.heartbeat_interval_s = h;
    }
    if let Some(p) = o.fault_rate {
        sc.fault_rate = p;
        // A fault rate alone applies to every host.
        sc.faulty_fraction = o.faulty_fraction.unwrap_or(1.0);
    } else if let Some(f) = o.faulty_fraction {
        sc.faulty_fraction = f;
    }
    sc.seed = o.seed;
    sc.workload.validate().map_err(|e| anyhow!(e))?;
    Ok(sc)
}

pub fn run(o: &BenchOptions) -> anyhow::Result<Value> {
    std::fs::create_dir_all(&o.out).with_context(|| format!("creating {}", o.out.display()))?;
    let summary = match (o.scenario, o.mode) {
        (Scenario::BaselineQueue, Mode::Embedded) => embedded_sweep(o)?,
        (Scenario::BaselineQueue, Mode::Wire) => wire_sweep(o)?,
        (_, Mode::Embedded) => embedded_pull(o)?,
        (_, Mode::Wire) => wire_pull(o)?,
    };
    std::fs::write(o.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

fn scenario_name(s: Scenario) -> &'static str {
    match s {
        Scenario::Throughput => "throughput",
        Scenario::LargeCluster => "large-cluster",
        Scenario::Mixed => "mixed",
        Scenario::BaselineQueue => "baseline-queue",
    }
}

fn pull_summary(o: &BenchOptions, sc: &PullScenario, events: &[LogEvent], series: &pullsched_core::harness::MetricsSeries) -> Value {
    let ideal = ideal_throughput(sc.slots(), sc.workload.mean_duration_s());
    json!({
        "scenario": scenario_name(o.scenario),
        "mode": if o.mode == Mode::Wire { "wire" } else { "embedded" },
        "seed": sc.seed,
        "hosts": sc.hosts,
        "slots": sc.slots(),
        "time_scale": sc.time_scale,
        "jobs": sc.workload.total_jobs(),
        "ideal_throughput": ideal,
        "steady_state_throughput": steady_state_throughput(events, sc.slots()),
        "metrics": series.summary,
    })
}

fn embedded_pull(o: &BenchOptions) -> anyhow::Result<Value> {
    let sc = pull_scenario(o)?;
    info!(event = "bench_start", scenario = scenario_name(o.scenario), slots = sc.slots(), "embedded run");
    let out = pullsched_core::harness::run_pull(&sc)?;
    std::fs::write(o.out.join("events.log"), render_log(&out.events))?;
    let ideal = ideal_throughput(sc.slots(), sc.workload.mean_duration_s());
    emit_report(&out.metrics, Some(ideal), &o.out)?;
    let mut summary = pull_summary(o, &sc, &out.events, &out.metrics);
    summary["all_done"] = json!(out.all_done);
    summary["accounting"] = json!(out.final_accounting);
    summary["agents"] = json!(out.agents);
    summary["txns"] = json!(out.txns);
    summary["wall_s"] = json!(out.wall_s);
    Ok(summary)
}

fn sweep_config(o: &BenchOptions) -> pullsched_core::harness::sweep::SweepConfig {
    let mut cfg = scenarios::baseline_queue();
    if let Some(s) = o.slots {
        cfg.slots = s.max(1);
    }
    if let Some(x) = o.time_scale {
        cfg.baseline.time_scale = x;
    }
    if let Some(q) = &o.queue_lengths {
        cfg.queue_lengths = q.clone();
    }
    if let Some(w) = o.window_s {
        cfg.window_s = w;
    }
    cfg
}

fn sweep_summary(o: &BenchOptions, throttle: f64, samples: &[SweepSample], violations: u64, lost: u64) -> Value {
    let lengths: Vec<f64> = samples.iter().map(|s| s.queue_length as f64).collect();
    let rates: Vec<f64> = samples.iter().map(|s| s.achieved_rate).collect();
    json!({
        "scenario": "baseline-queue",
        "mode": if o.mode == Mode::Wire { "wire" } else { "embedded" },
        "throttle": throttle,
        "samples": samples,
        "spearman_rho": spearman(&lengths, &rates),
        "throttle_violations": violations,
        "lost_jobs": lost,
    })
}

fn fresh_dir(dir: &Path) -> anyhow::Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    Ok(())
}

fn embedded_sweep(o: &BenchOptions) -> anyhow::Result<Value> {
    let mut cfg = sweep_config(o);
    let journal = o.out.join("journal");
    fresh_dir(&journal)?;
    cfg.journal_dir = Some(journal);
    let out = measure_throughput(&cfg)?;
    let events: Vec<LogEvent> = out
        .start_times_s
        .iter()
        .map(|t| LogEvent { t_us: (t * 1e6).round() as i64, event: LogKind::Started, job_id: None, vm_id: None })
        .collect();
    std::fs::write(o.out.join("events.log"), render_log(&events))?;
    std::fs::write(o.out.join("metrics.csv"), render_sweep_csv(&out.samples))?;
    Ok(sweep_summary(o, cfg.baseline.throttle, &out.samples, out.throttle_violations, out.lost_jobs))
}

// ---------------------------------------------------------------------------
// Wire mode.

/// Child processes, killed when dropped.
#[derive(Default)]
struct Fleet(Vec<(String, Child)>);

impl Fleet {
    fn spawn(&mut self, bin: &Path, name: &str, args: &[String], log_dir: &Path) -> anyhow::Result<()> {
        let log = File::create(log_dir.join(format!("{name}.log")))?;
        let child = Command::new(bin)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(log)
            .spawn()
            .with_context(|| format!("starting {}", bin.display()))?;
        self.0.push((name.to_string(), child));
        Ok(())
    }

    /// Fails if any child has exited.
    fn check(&mut self) -> anyhow::Result<()> {
        for (name, child) in &mut self.0 {
            if let Some(status) = child.try_wait()? {
                bail!("{name} exited early with {status}");
            }
        }
        Ok(())
    }
}

impl Drop for Fleet {
    fn drop(&mut self) {
        for (_, child) in &mut self.0 {
            let _ = child.kill();
        }
        for (_, child) in &mut self.0 {
            let _ = child.wait();
        }
    }
}

fn bin_dir(o: &BenchOptions) -> anyhow::Result<PathBuf> {
    if let Some(d) = &o.bin_dir {
        return Ok(d.clone());
    }
    let exe = std::env::current_exe()?;
    Ok(exe.parent().ok_or_else(|| anyhow!("executable has no directory"))?.to_path_buf())
}

fn binary(dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
    let p = dir.join(format!("{name}{}", std::env::consts::EXE_SUFFIX));
    if !p.exists() {
        bail!("{} not found; build the workspace binaries or pass --bin-dir", p.display());
    }
    Ok(p)
}

fn free_port() -> anyhow::Result<u16> {
    Ok(std::net::TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

fn wait_for(what: &str, timeout: Duration, fleet: &mut Fleet, mut ready: impl FnMut() -> bool) -> anyhow::Result<()> {
    let deadline = Instant::now() + timeout;
    while !ready() {
        fleet.check()?;
        if Instant::now() > deadline {
            bail!("timed out waiting for {what}");
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    Ok(())
}

fn log_kind(k: HistoryKind) -> LogKind {
    match k {
        HistoryKind::Submitted => LogKind::Submitted,
        HistoryKind::Matched => LogKind::Matched,
        HistoryKind::Started => LogKind::Started,
        HistoryKind::Completed => LogKind::Completed,
        HistoryKind::Dropped => LogKind::Dropped,
        HistoryKind::Removed => LogKind::Removed,
        HistoryKind::MachineBoot => LogKind::MachineBoot,
    }
}

/// Maps service-clock times to paper time since the first submission.
#[derive(Debug, Clone, Copy)]
struct PaperClock {
    t0: Timestamp,
    scale: f64,
}

impl PaperClock {
    fn us(&self, t: i64) -> i64 {
        ((t - self.t0.0) as f64 * self.scale).round() as i64
    }

    fn event(&self, h: &HistoryEvent) -> LogEvent {
        LogEvent {
            t_us: self.us(h.timestamp.0),
            event: log_kind(h.kind),
            job_id: h.job_id.map(|j| j.0),
            vm_id: h.vm_id.as_ref().map(ToString::to_string),
        }
    }
}

/// Fetches history rows past `seen`, in commit order.
fn fetch_history(fetch: impl Fn(&QueryFilter) -> Result<pullsched_core::service::QueryPage, ApiError>, seen: &mut Vec<HistoryEvent>) -> anyhow::Result<()> {
    loop {
        let page = fetch(&QueryFilter { offset: Some(seen.len()), limit: Some(5000), ..Default::default() })
            .map_err(|e| anyhow!("history query: {e}"))?;
        let QueryRows::History(rows) = page.rows else { bail!("history query returned other rows") };
        let n = rows.len();
        seen.extend(rows);
        if n == 0 || seen.len() >= page.total {
            return Ok(());
        }
    }
}

/// Commit order can differ from timestamp order by a few microseconds when
/// requests race; a stable sort keeps each job's own events in order.
fn ordered_events(clock: PaperClock, history: &[HistoryEvent]) -> Vec<LogEvent> {
    let mut events: Vec<LogEvent> = history.iter().map(|h| clock.event(h)).collect();
    events.sort_by_key(|e| e.t_us);
    events
}

fn wire_pull(o: &BenchOptions) -> anyhow::Result<Value> {
    let sc = pull_scenario(o)?;
    let bins = bin_dir(o)?;
    let logs = o.out.join("logs");
    std::fs::create_dir_all(&logs)?;
    let journal = o.out.join("journal");
    fresh_dir(&journal)?;
    let wall = Instant::now();
    let mut fleet = Fleet::default();
    let port = free_port()?;
    let url = format!("http://127.0.0.1:{port}");
    let num = |x: f64| x.to_string();
    fleet.spawn(
        &binary(&bins, "server")?,
        "server",
        &[
            "run".into(),
            "--listen".into(),
            format!("127.0.0.1:{port}"),
            "--journal-dir".into(),
            journal.display().to_string(),
            "--heartbeat-interval".into(),
            num(sc.heartbeat_interval_s),
            "--schedule-interval".into(),
            num(sc.schedule_interval_s),
            "--time-scale".into(),
            num(sc.time_scale),
            "--durability".into(),
            "batched".into(),
        ],
        &logs,
    )?;
    let client = SchedulerClient::new(&url, Duration::from_secs(30))?;
    wait_for("the server", Duration::from_secs(20), &mut fleet, || client.stats().is_ok())?;

    let agent_bin = binary(&bins, "agent")?;
    let faulty = sc.faulty_hosts();
    for h in 0..sc.hosts {
        let host = format!("host{h:05}");
        let mut args = vec![
            "run".into(),
            "--server".into(),
            url.clone(),
            "--host-id".into(),
            host.clone(),
            "--vms".into(),
            sc.slots_per_host.to_string(),
            "--heartbeat-interval".into(),
            num(sc.heartbeat_interval_s),
            "--time-scale".into(),
            num(sc.time_scale),
            "--fault-rate".into(),
            num(if h < faulty { sc.fault_rate } else { 0.0 }),
            "--seed".into(),
            sc.seed.to_string(),
            "--attr".into(),
            format!("memory_mb={}", 1024 * sc.slots_per_host),
            "--attr".into(),
            format!("cpus={}", sc.slots_per_host),
        ];
        if let Some(g) = sc.slot_groups {
            args.extend(["--slot-groups".into(), g.to_string()]);
        }
        fleet.spawn(&agent_bin, &host, &args, &logs)?;
    }
    let period = sc.heartbeat_interval_s / sc.time_scale;
    let machines = |c: &SchedulerClient| {
        c.query(QueryKind::Machines, &QueryFilter { limit: Some(0), ..Default::default() }).map(|p| p.total as u64)
    };
    wait_for("agent registration", Duration::from_secs_f64((3.0 * period).max(30.0)), &mut fleet, || {
        machines(&client).is_ok_and(|n| n == sc.slots())
    })?;

    let clock = PaperClock { t0: SystemClock.now(), scale: sc.time_scale };
    let start = Instant::now();
    let deadline = start + Duration::from_secs_f64((sc.max_paper_s / sc.time_scale).min(o.timeout_s));
    let plan = generate_workload(&sc.workload);
    let total: u64 = plan.iter().map(|p| p.count).sum();
    let mut next = 0;
    let mut history = Vec::new();
    let mut all_done = false;
    loop {
        fleet.check()?;
        let elapsed = start.elapsed().as_secs_f64();
        while next < plan.len() && plan[next].at_s / sc.time_scale <= elapsed {
            let p = &plan[next];
            let mut req = SubmitRequest::new("bench", p.duration_s, p.count as u32);
            if let Some(g) = sc.slot_groups {
                req.requirements = format!("machine.slot_group == {}", p.batch % g);
            }
            req.token = Some(format!("plan-{next}"));
            client.submit(&req).map_err(|e| anyhow!("submit: {e}"))?;
            next += 1;
        }
        let acc = client.stats().map_err(|e| anyhow!("stats: {e}"))?.accounting;
        if next == plan.len() && acc.submitted == total && acc.completed + acc.removed == total {
            all_done = true;
            break;
        }
        if Instant::now() > deadline {
            break;
        }
        let wake = plan.get(next).map_or(0.2, |p| (p.at_s / sc.time_scale - elapsed).clamp(0.0, 0.2));
        std::thread::sleep(Duration::from_secs_f64(wake));
    }
    fetch_history(|f| client.query(QueryKind::History, f), &mut history)?;
    let stats = client.stats().map_err(|e| anyhow!("stats: {e}"))?;
    let raw_samples = client.samples().map_err(|e| anyhow!("samples: {e}"))?;
    drop(fleet);

    let events = ordered_events(clock, &history);
    std::fs::write(o.out.join("events.log"), render_log(&events))?;
    let mut series = compute_metrics(&events, sc.interval_s)?;
    let samples: Vec<ServerSample> = raw_samples
        .into_iter()
        .filter_map(|s| match s {
            ServerSample::Heartbeat { t_us, latency_us } if t_us >= clock.t0.0 => {
                Some(ServerSample::Heartbeat { t_us: clock.us(t_us), latency_us })
            }
            ServerSample::Txn { t_us } if t_us >= clock.t0.0 => Some(ServerSample::Txn { t_us: clock.us(t_us) }),
            _ => None,
        })
        .collect();
    attach_server_samples(&mut series, &samples);
    let ideal = ideal_throughput(sc.slots(), sc.workload.mean_duration_s());
    emit_report(&series, Some(ideal), &o.out)?;
    let mut summary = pull_summary(o, &sc, &events, &series);
    summary["all_done"] = json!(all_done);
    summary["accounting"] = json!(stats.accounting);
    summary["server"] = json!(stats);
    summary["wall_s"] = json!(wall.elapsed().as_secs_f64());
    Ok(summary)
}

fn wire_sweep(o: &BenchOptions) -> anyhow::Result<Value> {
    let cfg = sweep_config(o);
    let scale = cfg.baseline.time_scale;
    let hosts = o.hosts.unwrap_or(10).max(1);
    let per_host = (cfg.slots / hosts).max(1);
    let slots = u64::from(per_host) * u64::from(hosts);
    let bins = bin_dir(o)?;
    let logs = o.out.join("logs");
    std::fs::create_dir_all(&logs)?;
    let journal = o.out.join("journal");
    fresh_dir(&journal)?;
    let mut fleet = Fleet::default();
    let port = free_port()?;
    let url = format!("http://127.0.0.1:{port}");
    fleet.spawn(
        &binary(&bins, "baseline")?,
        "baseline",
        &[
            "run".into(),
            "--listen".into(),
            format!("127.0.0.1:{port}"),
            "--throttle".into(),
            cfg.baseline.throttle.to_string(),
            "--journal-dir".into(),
            journal.display().to_string(),
            "--compact-every".into(),
            cfg.baseline.compact_every.to_string(),
            "--time-scale".into(),
            scale.to_string(),
        ],
        &logs,
    )?;
    let http = JsonClient::new(&url, Duration::from_secs(60))?;
    let stats = |h: &JsonClient| h.get::<BaselineStats>("/v1/stats");
    wait_for("the baseline", Duration::from_secs(20), &mut fleet, || stats(&http).is_ok())?;
    let agent_bin = binary(&bins, "agent")?;
    let mut agents = Fleet::default();
    for h in 0..hosts {
        let host = format!("exec{h:03}");
        let agent_port = free_port()?;
        let args = vec![
            "run".into(),
            "--mode".into(),
            "push".into(),
            "--listen".into(),
            format!("127.0.0.1:{agent_port}"),
            "--server".into(),
            url.clone(),
            "--host-id".into(),
            host.clone(),
            "--vms".into(),
            per_host.to_string(),
            "--heartbeat-interval".into(),
            "5".into(),
            "--time-scale".into(),
            scale.to_string(),
            "--seed".into(),
            o.seed.to_string(),
        ];
        agents.spawn(&agent_bin, &host, &args, &logs)?;
    }
    wait_for("agent registration", Duration::from_secs(30), &mut agents, || {
        stats(&http).is_ok_and(|s| s.slots as u64 == slots)
    })?;

    let t0 = SystemClock.now();
    let submit = |n: usize| -> anyhow::Result<()> {
        if n > 0 {
            let req = SubmitRequest::new("sweep", cfg.job_duration_s, n as u32);
            http.post::<_, crate::server::SubmitResponse>("/v1/jobs", &req).map_err(|e| anyhow!("submit: {e}"))?;
        }
        Ok(())
    };
    // Holds the queue at `target` for `secs` real seconds.
    let hold = |target: usize, secs: f64, fleet: &mut Fleet| -> anyhow::Result<BaselineStats> {
        let end = Instant::now() + Duration::from_secs_f64(secs);
        loop {
            fleet.check()?;
            let s = stats(&http).map_err(|e| anyhow!("stats: {e}"))?;
            if Instant::now() >= end {
                return Ok(s);
            }
            submit(target.saturating_sub(s.queue_len))?;
            std::thread::sleep(Duration::from_millis(10).min(end.saturating_duration_since(Instant::now())));
        }
    };
    let mut samples = Vec::new();
    for &target in &cfg.queue_lengths {
        let before = hold(target, cfg.settle_s / scale, &mut agents)?;
        let started = Instant::now();
        let after = hold(target, cfg.window_s / scale, &mut agents)?;
        let window_s = started.elapsed().as_secs_f64() * scale;
        let starts = after.starts - before.starts;
        info!(event = "sweep_bucket", queue = target, starts, "bucket measured");
        samples.push(SweepSample {
            queue_length: target,
            starts,
            window_s,
            achieved_rate: starts as f64 / window_s,
            ticks: after.ticks - before.ticks,
            compactions: after.compactions - before.compactions,
        });
    }
    // With the agents gone nothing completes, so the counts below agree.
    drop(agents);
    let last = stats(&http).map_err(|e| anyhow!("stats: {e}"))?;
    let mut history = Vec::new();
    fetch_history(|f| http.get_query("/v1/history", f), &mut history)?;
    drop(fleet);
    let count = |k: HistoryKind| history.iter().filter(|h| h.kind == k).count() as u64;
    let lost = count(HistoryKind::Submitted).saturating_sub(count(HistoryKind::Completed) + last.queue_len as u64);
    let clock = PaperClock { t0, scale };
    let events = ordered_events(clock, &history);
    std::fs::write(o.out.join("events.log"), render_log(&events))?;
    std::fs::write(o.out.join("metrics.csv"), render_sweep_csv(&samples))?;
    let starts: Vec<f64> =
        events.iter().filter(|e| e.event == LogKind::Started && e.t_us >= 0).map(LogEvent::t_s).collect();
    let limit = ((cfg.baseline.throttle * THROTTLE_WINDOW_S + 1e-9).floor() as usize).max(1);
    let violations = window_violations(&starts, THROTTLE_WINDOW_S, limit);
    Ok(sweep_summary(o, cfg.baseline.throttle, &samples, violations, lost))
}
