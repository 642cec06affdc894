//! Embedded mode: scheduler, store and every node agent in one process under
//! a virtual clock, driven by a discrete event queue. Runs are deterministic
//! for a fixed seed; only the heartbeat latency samples depend on the host.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::metrics::{attach_server_samples, compute_metrics, LogEvent, LogKind, MetricsSeries, ServerSample};
use super::workload::{generate_workload, PlannedSubmit, WorkloadSpec};
use crate::agent::{exchange, AgentConfig, AgentEvent, ApiError, NodeAgent, SchedulerApi};
use crate::clock::{Clock, VirtualClock};
use crate::model::{
    AcceptStatus, AttrValue, Attributes, HeartbeatReport, HeartbeatResponse, HistoryKind, JobId, Timestamp, VmId,
};
use crate::service::{Accounting, Scheduler, ServiceConfig, ServiceError, SubmitRequest};
use crate::store::{list_segments, Durability, Key, OpKind, Relation, Store, StoreOptions, TupleOp};

/// Virtual time at which the cluster boots. Submissions start one heartbeat
/// period later, once every agent has registered.
const EPOCH_S: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PullScenario {
    pub hosts: u32,
    pub slots_per_host: u32,
    pub workload: WorkloadSpec,
    pub time_scale: f64,
    pub seed: u64,
    pub heartbeat_interval_s: f64,
    pub schedule_interval_s: f64,
    /// Metrics interval, paper seconds.
    pub interval_s: f64,
    /// Fraction of hosts (rounded down) that abandon jobs at `fault_rate`.
    pub faulty_fraction: f64,
    pub fault_rate: f64,
    /// Splits slots into this many groups (`slot_group` attribute) and sends
    /// pulse `k` to group `k mod groups` only.
    pub slot_groups: Option<u32>,
    /// Journal directory; in-memory store when absent.
    pub journal_dir: Option<PathBuf>,
    pub durability: Durability,
    /// Paper-scale times at which the server is killed and restarted.
    pub kill_at_s: Vec<f64>,
    /// Gives up after this much paper time past the first submission.
    pub max_paper_s: f64,
    pub verify_full: bool,
}

impl Default for PullScenario {
    fn default() -> Self {
        PullScenario {
            hosts: 45,
            slots_per_host: 4,
            workload: WorkloadSpec::Uniform { count: 0, duration_s: 60.0 },
            time_scale: 1.0,
            seed: 1,
            heartbeat_interval_s: 60.0,
            schedule_interval_s: 1.0,
            interval_s: 60.0,
            faulty_fraction: 0.0,
            fault_rate: 0.0,
            slot_groups: None,
            journal_dir: None,
            durability: Durability::Full,
            kill_at_s: Vec::new(),
            max_paper_s: 7.0 * 24.0 * 3600.0,
            verify_full: false,
        }
    }
}

impl PullScenario {
    pub fn slots(&self) -> u64 {
        u64::from(self.hosts) * u64::from(self.slots_per_host)
    }

    pub fn faulty_hosts(&self) -> u32 {
        (f64::from(self.hosts) * self.faulty_fraction).floor() as u32
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentTotals {
    pub accepted: u64,
    pub completed: u64,
    pub abandoned: u64,
    pub released: u64,
    pub stale: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PullOutcome {
    pub events: Vec<LogEvent>,
    #[serde(skip)]
    pub samples: Vec<ServerSample>,
    pub metrics: MetricsSeries,
    /// Service-side accounting at every metrics interval boundary.
    pub accounting: Vec<Accounting>,
    pub final_accounting: Accounting,
    pub agents: AgentTotals,
    pub submitted_ids: Vec<JobId>,
    pub all_done: bool,
    pub restarts: u32,
    pub txns: u64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Heartbeat(u32),
    Finish(u32),
    Tick,
    Submit(usize),
    Sample,
    Kill(usize),
}

struct Queue {
    heap: BinaryHeap<Reverse<(i64, u64, Action)>>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, at: Timestamp, action: Action) {
        self.seq += 1;
        self.heap.push(Reverse((at.0, self.seq, action)));
    }

    fn pop(&mut self) -> Option<(Timestamp, Action)> {
        self.heap.pop().map(|Reverse((t, _, a))| (Timestamp(t), a))
    }
}

/// Wraps the in-process scheduler to time heartbeat handling.
struct Timed<'a> {
    sched: &'a Scheduler,
    samples: &'a Mutex<Vec<ServerSample>>,
    t_us: i64,
}

impl SchedulerApi for Timed<'_> {
    fn heartbeat(&self, report: &HeartbeatReport) -> Result<HeartbeatResponse, ApiError> {
        let started = Instant::now();
        let resp = self.sched.handle_heartbeat(report);
        let latency_us = started.elapsed().as_micros() as u64;
        self.samples.lock().unwrap().push(ServerSample::Heartbeat { t_us: self.t_us, latency_us });
        Ok(resp?)
    }

    fn accept_match(&self, job_id: JobId, vm_id: &VmId) -> Result<AcceptStatus, ApiError> {
        Ok(self.sched.accept_match(job_id, vm_id)?)
    }
}

struct Recorder {
    clock: VirtualClock,
    start: Timestamp,
    scale: f64,
    events: Mutex<Vec<LogEvent>>,
    samples: Mutex<Vec<ServerSample>>,
    txns: std::sync::atomic::AtomicU64,
}

impl Recorder {
    fn paper_us(&self, t: Timestamp) -> i64 {
        ((t.0 - self.start.0) as f64 * self.scale).round() as i64
    }

    fn observe(&self, ops: &[TupleOp]) {
        let t_us = self.paper_us(self.clock.now());
        self.txns.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.samples.lock().unwrap().push(ServerSample::Txn { t_us });
        let mut events = self.events.lock().unwrap();
        for op in ops {
            match (op.relation, op.kind, &op.key) {
                (Relation::History, _, _) => {
                    let Some(crate::store::Tuple::History(h)) = &op.value else { continue };
                    let event = match h.kind {
                        HistoryKind::Submitted => LogKind::Submitted,
                        HistoryKind::Matched => LogKind::Matched,
                        HistoryKind::Started => LogKind::Started,
                        HistoryKind::Completed => LogKind::Completed,
                        HistoryKind::Dropped => LogKind::Dropped,
                        HistoryKind::Removed => LogKind::Removed,
                        HistoryKind::MachineBoot => LogKind::MachineBoot,
                    };
                    events.push(LogEvent {
                        t_us: self.paper_us(h.timestamp),
                        event,
                        job_id: h.job_id.map(|j| j.0),
                        vm_id: h.vm_id.as_ref().map(ToString::to_string),
                    });
                }
                (Relation::Matches, OpKind::Delete, Key::Job(job)) => {
                    // A match deleted without a run replacing it, and without
                    // the job leaving the system, lapsed back to idle.
                    let superseded = ops.iter().any(|o| {
                        o.key == Key::Job(*job) && matches!((o.relation, o.kind), (Relation::Runs, OpKind::Insert) | (Relation::Jobs, OpKind::Delete))
                    });
                    if !superseded {
                        events.push(LogEvent { t_us, event: LogKind::MatchExpired, job_id: Some(job.0), vm_id: None });
                    }
                }
                _ => {}
            }
        }
    }
}

fn open_store(sc: &PullScenario) -> Result<Arc<Store>, ServiceError> {
    let options = StoreOptions { durability: sc.durability, verify_full: sc.verify_full };
    Ok(Arc::new(match &sc.journal_dir {
        Some(dir) => Store::open(dir, options)?,
        None => Store::in_memory(options),
    }))
}

fn start_scheduler(sc: &PullScenario, clock: &VirtualClock, rec: &Arc<Recorder>) -> Result<Scheduler, ServiceError> {
    let store = open_store(sc)?;
    let r = Arc::clone(rec);
    store.set_observer(Some(Box::new(move |_, ops| r.observe(ops))));
    let config = ServiceConfig {
        heartbeat_interval_s: sc.heartbeat_interval_s,
        schedule_interval_s: sc.schedule_interval_s,
        time_scale: sc.time_scale,
        durability: sc.durability,
        ..Default::default()
    };
    Scheduler::new(store, Arc::new(clock.clone()), config)
}

/// Appends a torn, never-acknowledged record fragment to the live segment,
/// as a crash in the middle of a write would leave it.
fn tear_journal(sc: &PullScenario, rng: &mut ChaCha8Rng) -> std::io::Result<()> {
    let Some(dir) = &sc.journal_dir else { return Ok(()) };
    let Some((_, seg)) = list_segments(dir)?.pop() else { return Ok(()) };
    let len = rng.gen_range(1..48usize);
    let mut junk = vec![0u8; len];
    rng.fill(junk.as_mut_slice());
    // A plausible length prefix followed by a short body.
    junk[..len.min(4)].copy_from_slice(&200u32.to_le_bytes()[..len.min(4)]);
    OpenOptions::new().append(true).open(seg)?.write_all(&junk)
}

fn agent_config(sc: &PullScenario, host: u32, faulty: bool) -> AgentConfig {
    let mut attributes = Attributes::new();
    attributes.insert("memory_mb".into(), AttrValue::Int(1024 * i64::from(sc.slots_per_host)));
    attributes.insert("cpus".into(), AttrValue::Int(i64::from(sc.slots_per_host)));
    let slot_attributes = match sc.slot_groups {
        Some(g) => (0..sc.slots_per_host)
            .map(|i| [("slot_group".to_string(), AttrValue::Int(i64::from(i % g)))].into_iter().collect())
            .collect(),
        None => Vec::new(),
    };
    AgentConfig {
        server: "embedded".into(),
        host_id: format!("host{host:05}"),
        vm_count: sc.slots_per_host,
        heartbeat_interval_s: sc.heartbeat_interval_s,
        time_scale: sc.time_scale,
        attributes,
        slot_attributes,
        fault_rate: if faulty { sc.fault_rate } else { 0.0 },
        seed: sc.seed,
        report_on_change: true,
    }
}

fn submit_request(sc: &PullScenario, p: &PlannedSubmit, index: usize) -> SubmitRequest {
    let mut req = SubmitRequest::new("bench", p.duration_s, p.count as u32);
    if let Some(g) = sc.slot_groups {
        req.requirements = format!("machine.slot_group == {}", p.batch % g);
    }
    req.token = Some(format!("plan-{index}"));
    req
}

/// Runs one pull-model experiment to completion (or the time cap).
pub fn run_pull(sc: &PullScenario) -> Result<PullOutcome, ServiceError> {
    sc.workload.validate().map_err(ServiceError::Validation)?;
    let wall = Instant::now();
    let scale = sc.time_scale;
    let virt = |paper_s: f64| paper_s / scale;
    let clock = VirtualClock::new(Timestamp::from_secs_f64(EPOCH_S));
    let period = virt(sc.heartbeat_interval_s);
    let start = Timestamp::from_secs_f64(EPOCH_S + period);
    let rec = Arc::new(Recorder {
        clock: clock.clone(),
        start,
        scale,
        events: Mutex::new(Vec::new()),
        samples: Mutex::new(Vec::new()),
        txns: Default::default(),
    });
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut sched = start_scheduler(sc, &clock, &rec)?;

    let faulty = sc.faulty_hosts();
    let mut agents: Vec<NodeAgent> = (0..sc.hosts)
        .map(|h| NodeAgent::new(agent_config(sc, h, h < faulty), 1).expect("valid agent config"))
        .collect();
    let plan = generate_workload(&sc.workload);
    let total_jobs: u64 = plan.iter().map(|p| p.count).sum();

    let mut q = Queue { heap: BinaryHeap::new(), seq: 0 };
    for h in 0..sc.hosts {
        let phase = rng.gen_range(0.0..period);
        q.push(Timestamp::from_secs_f64(EPOCH_S + phase), Action::Heartbeat(h));
    }
    q.push(Timestamp::from_secs_f64(EPOCH_S), Action::Tick);
    for (i, p) in plan.iter().enumerate() {
        q.push(start.plus_secs(virt(p.at_s)), Action::Submit(i));
    }
    q.push(start.plus_secs(virt(sc.interval_s)), Action::Sample);
    for (i, k) in sc.kill_at_s.iter().enumerate() {
        q.push(start.plus_secs(virt(*k)), Action::Kill(i));
    }
    let deadline = start.plus_secs(virt(sc.max_paper_s));

    let mut submitted_ids = Vec::new();
    let mut accounting = Vec::new();
    let mut stale = 0u64;
    let mut restarts = 0;
    let mut submitted_so_far = 0u64;
    let done = |sched: &Scheduler, submitted_so_far: u64| {
        submitted_so_far == total_jobs && sched.store().read(|s| s.terminal_count()) == total_jobs
    };

    while let Some((at, action)) = q.pop() {
        if at > deadline {
            break;
        }
        clock.set(at);
        let t_us = rec.paper_us(at);
        match action {
            Action::Heartbeat(h) | Action::Finish(h) => {
                let agent = &mut agents[h as usize];
                let mut finished = false;
                if matches!(action, Action::Finish(_)) {
                    finished = agent.finish_due(at).iter().any(|e| matches!(e, AgentEvent::Finished { .. }));
                    if !finished {
                        continue;
                    }
                } else {
                    agent.finish_due(at);
                }
                let api = Timed { sched: &sched, samples: &rec.samples, t_us };
                let events = exchange(agent, &api, at).map_err(|e| ServiceError::Validation(e.0))?;
                for e in &events {
                    match e {
                        AgentEvent::Started { ends_at, .. } => q.push(*ends_at, Action::Finish(h)),
                        AgentEvent::Stale { .. } => stale += 1,
                        _ => {}
                    }
                }
                if !finished {
                    q.push(at.plus_secs(period), Action::Heartbeat(h));
                }
            }
            Action::Tick => {
                sched.tick()?;
                q.push(at.plus_secs(virt(sc.schedule_interval_s)), Action::Tick);
            }
            Action::Submit(i) => {
                let ids = sched.submit_job(&submit_request(sc, &plan[i], i))?;
                submitted_so_far += ids.len() as u64;
                submitted_ids.extend(ids);
            }
            Action::Sample => {
                accounting.push(sched.accounting());
                if done(&sched, submitted_so_far) {
                    break;
                }
                q.push(at.plus_secs(virt(sc.interval_s)), Action::Sample);
            }
            Action::Kill(i) => {
                let report = sched.store().txn_count();
                drop(sched);
                tear_journal(sc, &mut rng).map_err(|e| ServiceError::Unavailable(e.into()))?;
                sched = start_scheduler(sc, &clock, &rec)?;
                restarts += 1;
                info!(event = "restart", kill = i, txns_before = report, "server killed and restarted");
            }
        }
        if !matches!(action, Action::Sample) && done(&sched, submitted_so_far) {
            accounting.push(sched.accounting());
            break;
        }
    }

    let all_done = done(&sched, submitted_so_far);
    let final_accounting = sched.accounting();
    sched.store().set_observer(None);
    drop(sched);
    let events = std::mem::take(&mut *rec.events.lock().unwrap());
    let samples = std::mem::take(&mut *rec.samples.lock().unwrap());
    let mut metrics = compute_metrics(&events, sc.interval_s).expect("recorder emits ordered events");
    attach_server_samples(&mut metrics, &samples);
    let mut totals = AgentTotals { stale, ..Default::default() };
    for a in &agents {
        let c = a.counters();
        totals.accepted += c.accepted;
        totals.completed += c.completed;
        totals.abandoned += c.abandoned;
        totals.released += c.released;
    }
    Ok(PullOutcome {
        events,
        samples,
        metrics,
        accounting,
        final_accounting,
        agents: totals,
        submitted_ids,
        all_done,
        restarts,
        txns: rec.txns.load(std::sync::atomic::Ordering::Relaxed),
        wall_s: wall.elapsed().as_secs_f64(),
    })
}
