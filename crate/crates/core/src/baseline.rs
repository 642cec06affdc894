//! Push-model contrast: a single-threaded queue manager with a start throttle.
//!
//! The architecture is reproduced on purpose, costs included: every tick scans
//! the whole in-memory queue, each running job has a shadow record, and the
//! journal is compacted (a full snapshot) every `compact_every` completions.
//! Nothing sleeps artificially; any slowdown with queue length comes from
//! that work.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::agent::ApiError;
use crate::clock::Clock;
use crate::matchmaker::{is_satisfied, parse_expression, Expression};
use crate::model::{
    Attributes, HistoryEvent, HistoryKind, JobDescriptor, JobId, JobRecord, JobState, MachineRecord, MachineState,
    RunPhase, RunRecord, Timestamp, VmId,
};
use crate::service::{ServiceError, SubmitRequest};
use crate::store::{Store, StoreError, TupleOp};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    /// Paper-scale job starts per second.
    pub throttle: f64,
    /// Paper-scale seconds between ticks.
    pub tick_s: f64,
    pub time_scale: f64,
    /// Completions between journal compactions; 0 disables compaction.
    pub compact_every: u64,
    /// Linear queue scan per tick. Off means the store's idle index is used.
    pub scan_queue: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { throttle: 0.5, tick_s: 1.0, time_scale: 1.0, compact_every: 100, scan_queue: true }
    }
}

impl BaselineConfig {
    pub fn tick_period(&self) -> f64 {
        self.tick_s / self.time_scale
    }
}

/// Length of the window over which the start rate is capped, paper seconds.
pub const THROTTLE_WINDOW_S: f64 = 10.0;

/// Start budget. Accrual per tick is capped at one nominal tick's worth, and
/// whole tokens left unused at the end of a tick are forfeited. On top of the
/// bucket, starts inside any sliding window are capped at `rate * window`
/// (at least one), which the bucket alone only meets to within one start.
#[derive(Debug, Clone, PartialEq)]
pub struct ThrottleState {
    /// Starts per second on the baseline's clock.
    pub rate: f64,
    /// Seconds per tick on the baseline's clock.
    pub tick: f64,
    /// Seconds of sliding window on the baseline's clock.
    pub window: f64,
    pub budget: f64,
    last_tick: Option<Timestamp>,
    recent: VecDeque<Timestamp>,
}

impl ThrottleState {
    pub fn new(rate: f64, tick: f64, window: f64) -> Self {
        ThrottleState { rate, tick, window, budget: 0.0, last_tick: None, recent: VecDeque::new() }
    }

    fn window_cap(&self) -> usize {
        ((self.rate * self.window + 1e-9).floor() as usize).max(1)
    }

    /// Starts a tick at `now`. The first tick accrues a full tick's worth.
    pub fn accrue(&mut self, now: Timestamp) {
        let dt = match self.last_tick {
            Some(prev) => (now.0 - prev.0) as f64 / 1e6,
            None => self.tick,
        };
        self.last_tick = Some(now);
        self.budget = (self.budget + self.rate * dt.clamp(0.0, self.tick)).min(1.0 + self.rate * self.tick);
        let horizon = now.minus_secs(self.window);
        while self.recent.front().is_some_and(|t| *t <= horizon) {
            self.recent.pop_front();
        }
    }

    pub fn available(&self) -> u64 {
        let room = self.window_cap().saturating_sub(self.recent.len()) as u64;
        (self.budget.floor() as u64).min(room)
    }

    /// Spends one start at the current tick's time.
    pub fn consume(&mut self) {
        self.budget -= 1.0;
        self.recent.push_back(self.last_tick.unwrap_or_default());
    }

    /// Ends a tick, forfeiting unused whole tokens.
    pub fn end_tick(&mut self) {
        self.budget = self.budget.fract().max(0.0);
    }

    pub fn last_tick(&self) -> Option<Timestamp> {
        self.last_tick
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowRecord {
    pub job_id: JobId,
    pub vm_id: VmId,
    pub spawn_time: Timestamp,
    pub last_status: RunPhase,
}

/// The push side of the protocol: ask an agent to run a job on a slot.
pub trait ClaimApi {
    /// `Ok(false)` means the agent refused the claim.
    fn claim(&mut self, vm_id: &VmId, job: &JobDescriptor) -> Result<bool, ApiError>;
}

#[derive(Debug, Clone)]
struct QueueEntry {
    job_id: JobId,
    requirements: Expression,
    attributes: Attributes,
    duration_s: f64,
    running: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartEvent {
    pub job_id: JobId,
    pub at: Timestamp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BaselineCounters {
    pub ticks: u64,
    pub starts: u64,
    pub completions: u64,
    pub refused_claims: u64,
    pub compactions: u64,
    pub scanned: u64,
}

pub struct Baseline {
    config: BaselineConfig,
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
    throttle: ThrottleState,
    /// Keyed by job id, which is also submission order.
    queue: BTreeMap<JobId, QueueEntry>,
    shadows: BTreeMap<JobId, ShadowRecord>,
    slots: BTreeMap<VmId, Attributes>,
    free: BTreeSet<VmId>,
    since_compact: u64,
    counters: BaselineCounters,
}

impl std::fmt::Debug for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Baseline")
            .field("config", &self.config)
            .field("queue", &self.queue.len())
            .field("counters", &self.counters)
            .finish()
    }
}

impl Baseline {
    /// Builds the queue manager over `store`, reloading any jobs it holds.
    /// Jobs that were running when the previous instance stopped are put back
    /// in the queue as idle.
    pub fn new(config: BaselineConfig, store: Arc<Store>, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        if !(config.throttle > 0.0 && config.tick_s > 0.0 && config.time_scale > 0.0) {
            return Err(ServiceError::Validation("throttle, tick and time scale must be positive".into()));
        }
        let throttle = ThrottleState::new(
            config.throttle * config.time_scale,
            config.tick_period(),
            THROTTLE_WINDOW_S / config.time_scale,
        );
        let mut b = Baseline {
            config,
            store,
            clock,
            throttle,
            queue: BTreeMap::new(),
            shadows: BTreeMap::new(),
            slots: BTreeMap::new(),
            free: BTreeSet::new(),
            since_compact: 0,
            counters: BaselineCounters::default(),
        };
        b.reload()?;
        Ok(b)
    }

    fn reload(&mut self) -> Result<(), ServiceError> {
        let now = self.clock.now();
        let (jobs, runs): (Vec<JobRecord>, Vec<RunRecord>) =
            self.store.read(|s| (s.tables().jobs.values().cloned().collect(), s.tables().runs.values().cloned().collect()));
        if !runs.is_empty() {
            // Orphaned runs from a previous incarnation: requeue.
            self.store.transact(|tx| {
                for r in &runs {
                    let mut j = tx.state().job(r.job_id).expect("run references a job").clone();
                    j.state = JobState::Idle;
                    j.phase = None;
                    j.retry_count += 1;
                    tx.push(TupleOp::delete_run(r.job_id));
                    tx.push(TupleOp::update_job(j));
                    let mut m = tx.state().machine(&r.vm_id).expect("run references a machine").clone();
                    m.state = MachineState::Unclaimed;
                    tx.push(TupleOp::update_machine(m));
                    tx.append(HistoryEvent::job(r.job_id, HistoryKind::Dropped, now).on(&r.vm_id));
                }
                Ok::<_, StoreError>(())
            })?;
        }
        self.queue = jobs
            .into_iter()
            .map(|j| (j.job_id, QueueEntry {
                job_id: j.job_id,
                requirements: j.requirements,
                attributes: j.attributes,
                duration_s: j.duration_s,
                running: false,
            }))
            .collect();
        for m in self.store.select(|_: &MachineRecord| true) {
            self.free.insert(m.vm_id.clone());
            self.slots.insert(m.vm_id, m.attributes);
        }
        Ok(())
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn counters(&self) -> BaselineCounters {
        self.counters
    }

    pub fn throttle(&self) -> &ThrottleState {
        &self.throttle
    }

    /// Jobs in the queue, running ones included.
    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn shadow_count(&self) -> usize {
        self.shadows.len()
    }

    pub fn running_count(&self) -> usize {
        self.queue.values().filter(|q| q.running).count()
    }

    pub fn free_slots(&self) -> usize {
        self.free.len()
    }

    /// Registered slots and the attributes they advertised.
    pub fn slots(&self) -> impl Iterator<Item = (&VmId, &Attributes)> {
        self.slots.iter()
    }

    pub fn register_slot(&mut self, vm_id: VmId, attributes: Attributes) -> Result<(), ServiceError> {
        if self.slots.contains_key(&vm_id) {
            return Ok(());
        }
        let now = self.clock.now();
        self.store.execute_txn(vec![TupleOp::insert_machine(MachineRecord {
            vm_id: vm_id.clone(),
            attributes: attributes.clone(),
            state: MachineState::Unclaimed,
            last_heartbeat: now,
            boot_epoch: 1,
        })])?;
        self.free.insert(vm_id.clone());
        self.slots.insert(vm_id, attributes);
        Ok(())
    }

    pub fn submit(&mut self, req: &SubmitRequest) -> Result<Vec<JobId>, ServiceError> {
        if !(req.duration_s > 0.0 && req.duration_s.is_finite()) || req.count < 1 {
            return Err(ServiceError::Validation("duration_s must be positive and count at least 1".into()));
        }
        let requirements =
            parse_expression(&req.requirements).map_err(|e| ServiceError::Validation(format!("requirements: {e}")))?;
        if let Some(token) = &req.token {
            if let Some(ids) = self.store.read(|s| s.jobs_for_token(token).map(<[JobId]>::to_vec)) {
                return Ok(ids);
            }
        }
        let now = self.clock.now();
        let (_, ids) = self.store.transact(|tx| {
            let first = tx.state().max_job_id() + 1;
            let mut ids = Vec::with_capacity(req.count as usize);
            for n in 0..u64::from(req.count) {
                let job_id = JobId(first + n);
                tx.push(TupleOp::insert_job(JobRecord {
                    job_id,
                    owner: req.owner.clone(),
                    duration_s: req.duration_s,
                    requirements: requirements.clone(),
                    rank: None,
                    attributes: req.attributes.clone(),
                    state: JobState::Idle,
                    submit_time: now,
                    retry_count: 0,
                    phase: None,
                    remove_requested: false,
                }));
                let mut ev = HistoryEvent::job(job_id, HistoryKind::Submitted, now);
                ev.token = req.token.clone();
                tx.append(ev);
                ids.push(job_id);
            }
            Ok::<_, StoreError>(ids)
        })?;
        self.queue.extend(ids.iter().map(|&job_id| {
            let entry = QueueEntry {
                job_id,
                requirements: requirements.clone(),
                attributes: req.attributes.clone(),
                duration_s: req.duration_s,
                running: false,
            };
            (job_id, entry)
        }));
        Ok(ids)
    }

    /// One scheduling tick: accrue budget, scan the queue, push up to
    /// `floor(budget)` jobs onto free slots.
    pub fn schedd_tick(&mut self, now: Timestamp, agents: &mut dyn ClaimApi) -> Result<Vec<StartEvent>, ServiceError> {
        self.counters.ticks += 1;
        self.throttle.accrue(now);
        let candidates: Vec<JobId> = if self.config.scan_queue {
            // Every idle job is checked against a free slot, whether or not
            // any budget is left this tick.
            self.counters.scanned += self.queue.len() as u64;
            let probe = self.free.iter().next().map(|vm| &self.slots[vm]);
            self.queue
                .values()
                .filter(|q| !q.running)
                .filter(|q| probe.is_none_or(|m| is_satisfied(&q.requirements, &q.attributes, m)))
                .map(|q| q.job_id)
                .collect()
        } else {
            let wanted = self.throttle.available() as usize;
            self.store.read(|s| s.idle_jobs().take(wanted).map(|j| j.job_id).collect())
        };
        let mut started = Vec::new();
        let mut refused = BTreeSet::new();
        for job_id in candidates {
            if self.throttle.available() == 0 || self.free.is_empty() {
                break;
            }
            let entry = &self.queue[&job_id];
            let desc =
                JobDescriptor { job_id: entry.job_id, duration_s: entry.duration_s, attributes: entry.attributes.clone() };
            let fits: Vec<VmId> = self
                .free
                .iter()
                .filter(|vm| !refused.contains(*vm))
                .filter(|vm| is_satisfied(&entry.requirements, &entry.attributes, &self.slots[*vm]))
                .cloned()
                .collect();
            let mut claimed = None;
            for vm in fits {
                match agents.claim(&vm, &desc) {
                    Ok(true) => {
                        claimed = Some(vm);
                        break;
                    }
                    Ok(false) | Err(_) => {
                        self.counters.refused_claims += 1;
                        debug!(vm = %vm, job = desc.job_id.0, "claim refused");
                        refused.insert(vm);
                    }
                }
            }
            let Some(vm) = claimed else { continue };
            self.record_start(desc.job_id, &vm, now)?;
            self.queue.get_mut(&job_id).expect("queued").running = true;
            self.free.remove(&vm);
            self.throttle.consume();
            self.counters.starts += 1;
            started.push(StartEvent { job_id: desc.job_id, at: now });
        }
        self.throttle.end_tick();
        Ok(started)
    }

    fn record_start(&mut self, job_id: JobId, vm: &VmId, now: Timestamp) -> Result<(), ServiceError> {
        self.store.transact(|tx| {
            let mut j = tx.state().job(job_id).expect("queued job exists").clone();
            j.state = JobState::Running;
            j.phase = Some(RunPhase::Starting);
            let mut m = tx.state().machine(vm).expect("registered slot").clone();
            m.state = MachineState::Claimed;
            tx.push(TupleOp::insert_run(RunRecord { job_id, vm_id: vm.clone(), started_at: now, missed_reports: 0 }));
            tx.push(TupleOp::update_job(j));
            tx.push(TupleOp::update_machine(m));
            tx.append(HistoryEvent::job(job_id, HistoryKind::Started, now).on(vm));
            Ok::<_, StoreError>(())
        })?;
        self.shadows.insert(
            job_id,
            ShadowRecord { job_id, vm_id: vm.clone(), spawn_time: now, last_status: RunPhase::Starting },
        );
        Ok(())
    }

    /// Exit status from a shadow. Unknown jobs are ignored, which makes
    /// redelivery harmless.
    pub fn handle_completion(&mut self, job_id: JobId, exit_code: i32) -> Result<bool, ServiceError> {
        let Some(shadow) = self.shadows.get(&job_id).cloned() else {
            debug!(job = job_id.0, "completion for unknown job ignored");
            return Ok(false);
        };
        let now = self.clock.now();
        self.store.transact(|tx| {
            let mut m = tx.state().machine(&shadow.vm_id).expect("registered slot").clone();
            m.state = MachineState::Unclaimed;
            tx.push(TupleOp::delete_run(job_id));
            tx.push(TupleOp::delete_job(job_id));
            tx.push(TupleOp::update_machine(m));
            let mut ev = HistoryEvent::job(job_id, HistoryKind::Completed, now).on(&shadow.vm_id);
            ev.exit_code = Some(exit_code);
            tx.append(ev);
            Ok::<_, StoreError>(())
        })?;
        self.shadows.remove(&job_id);
        self.queue.remove(&job_id);
        self.free.insert(shadow.vm_id);
        self.counters.completions += 1;
        self.since_compact += 1;
        if self.config.compact_every > 0 && self.since_compact >= self.config.compact_every {
            self.since_compact = 0;
            self.counters.compactions += 1;
            let w = self.store.checkpoint()?;
            info!(event = "compact", watermark = w, queue = self.queue.len(), "journal compacted");
        }
        Ok(true)
    }

    /// Marks a shadow's job as executing (status relay from the starter).
    pub fn note_status(&mut self, job_id: JobId, phase: RunPhase) {
        if let Some(s) = self.shadows.get_mut(&job_id) {
            s.last_status = phase;
        }
    }
}
