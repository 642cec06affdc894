//! The central scheduler service.
//!
//! Every request becomes one or more store transactions. Agents are never
//! contacted: match offers and release orders ride on heartbeat responses.

use std::collections::HashSet;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::clock::Clock;
use crate::matchmaker::{match_in_order, parse_expression, Expression};
use crate::model::{
    AcceptStatus, Attributes, Directive, HeartbeatReport, HeartbeatResponse, HistoryEvent, HistoryKind,
    JobDescriptor, JobId, JobRecord, JobState, MachineRecord, MachineState, MatchRecord, RunPhase, RunRecord,
    SlotReport, Timestamp, VmId,
};
use crate::store::{Durability, State, Store, StoreError, Txn, TupleOp};

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: String,
    pub journal_dir: Option<PathBuf>,
    /// Paper-scale seconds between agent heartbeats.
    pub heartbeat_interval_s: f64,
    /// Matches expire after this many heartbeat intervals.
    pub match_expiry_intervals: u32,
    /// Machines silent for this many heartbeat intervals are declared dead.
    pub dead_node_intervals: u32,
    /// Paper-scale seconds between periodic scheduling passes.
    pub schedule_interval_s: f64,
    pub durability: Durability,
    /// Divides every interval and job duration.
    pub time_scale: f64,
    /// `None` requeues dropped jobs forever.
    pub max_retries: Option<u32>,
    /// Consecutive reports that may omit a running job before it is dropped.
    pub missed_report_limit: u32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            journal_dir: None,
            heartbeat_interval_s: 60.0,
            match_expiry_intervals: 3,
            dead_node_intervals: 3,
            schedule_interval_s: 1.0,
            durability: Durability::Full,
            time_scale: 1.0,
            max_retries: None,
            missed_report_limit: 2,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: &str| Err(ServiceError::Validation(m.to_string()));
        if !(self.heartbeat_interval_s > 0.0 && self.schedule_interval_s > 0.0) {
            return bad("intervals must be positive");
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return bad("time_scale must be positive");
        }
        if self.match_expiry_intervals < 1 || self.dead_node_intervals < 1 || self.missed_report_limit < 1 {
            return bad("interval counts must be at least 1");
        }
        Ok(())
    }

    /// Heartbeat period on the service clock, in seconds.
    pub fn heartbeat_period(&self) -> f64 {
        self.heartbeat_interval_s / self.time_scale
    }

    pub fn schedule_period(&self) -> f64 {
        self.schedule_interval_s / self.time_scale
    }

    pub fn match_lifetime(&self) -> f64 {
        self.heartbeat_period() * f64::from(self.match_expiry_intervals)
    }

    pub fn dead_after(&self) -> f64 {
        self.heartbeat_period() * f64::from(self.dead_node_intervals)
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("job {0} not found")]
    NotFound(JobId),
    #[error("job {0} already finished")]
    AlreadyTerminal(JobId),
    #[error("bad filter: {0}")]
    BadFilter(String),
    #[error("service unavailable: {0}")]
    Unavailable(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub owner: String,
    pub duration_s: f64,
    #[serde(default = "one")]
    pub count: u32,
    #[serde(default = "always")]
    pub requirements: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<String>,
    #[serde(default)]
    pub attributes: Attributes,
    /// Retries carrying the same token return the original job ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

fn one() -> u32 {
    1
}

fn always() -> String {
    "true".into()
}

impl SubmitRequest {
    pub fn new(owner: impl Into<String>, duration_s: f64, count: u32) -> Self {
        SubmitRequest {
            owner: owner.into(),
            duration_s,
            count,
            requirements: always(),
            rank: None,
            attributes: Attributes::new(),
            token: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpireCounts {
    pub expired_matches: usize,
    pub requeued_drops: usize,
    pub dead_machines: usize,
}

/// Job accounting; `submitted == idle + matched + running + completed + removed`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub submitted: u64,
    pub idle: u64,
    pub matched: u64,
    pub running: u64,
    pub completed: u64,
    pub removed: u64,
    pub dropped: u64,
}

impl Accounting {
    pub fn from_state(s: &State) -> Accounting {
        let matched = s.tables().matches.len() as u64;
        let running = s.tables().runs.len() as u64;
        Accounting {
            submitted: s.submitted_count(),
            idle: s.tables().jobs.len() as u64 - matched - running,
            matched,
            running,
            completed: s.completed_count(),
            removed: s.removed_count(),
            dropped: s.dropped_count(),
        }
    }

    pub fn conserved(&self) -> bool {
        self.submitted == self.idle + self.matched + self.running + self.completed + self.removed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Jobs,
    Machines,
    History,
}

impl FromStr for QueryKind {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jobs" => Ok(QueryKind::Jobs),
            "machines" => Ok(QueryKind::Machines),
            "history" => Ok(QueryKind::History),
            _ => Err(ServiceError::BadFilter(format!("unknown query kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryFilter {
    /// Job state, machine state, or history event kind.
    #[serde(default)]
    pub state: Option<String>,
    #[serde(default)]
    pub owner: Option<String>,
    #[serde(default)]
    pub job_id: Option<u64>,
    /// Lower bound on submit time, last heartbeat, or event time (microseconds).
    #[serde(default)]
    pub since: Option<i64>,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QueryRows {
    Jobs(Vec<JobRecord>),
    Machines(Vec<MachineRecord>),
    History(Vec<HistoryEvent>),
}

impl QueryRows {
    pub fn len(&self) -> usize {
        match self {
            QueryRows::Jobs(r) => r.len(),
            QueryRows::Machines(r) => r.len(),
            QueryRows::History(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPage {
    /// Matching rows before pagination.
    pub total: usize,
    pub offset: usize,
    pub rows: QueryRows,
}

#[derive(Debug, Default)]
pub struct ServiceStats {
    pub heartbeats: AtomicU64,
    pub matches_created: AtomicU64,
    pub passes: AtomicU64,
    pub drops: AtomicU64,
    pub expired_matches: AtomicU64,
}

pub struct Scheduler {
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
    config: ServiceConfig,
    /// Machines are not declared dead on silence that predates this instant.
    liveness_floor: Timestamp,
    stats: ServiceStats,
}

impl std::fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler").field("config", &self.config).finish_non_exhaustive()
    }
}

/// What a heartbeat transaction decided, per slot.
struct SlotOutcome {
    directive: Directive,
    freed: bool,
}

impl Scheduler {
    pub fn new(store: Arc<Store>, clock: Arc<dyn Clock>, config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let liveness_floor = clock.now();
        Ok(Scheduler { store, clock, config, liveness_floor, stats: ServiceStats::default() })
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn stats(&self) -> &ServiceStats {
        &self.stats
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn accounting(&self) -> Accounting {
        self.store.read(Accounting::from_state)
    }

    pub fn submit_job(&self, req: &SubmitRequest) -> Result<Vec<JobId>, ServiceError> {
        if !(req.duration_s > 0.0 && req.duration_s.is_finite()) {
            return Err(ServiceError::Validation("duration_s must be positive".into()));
        }
        if req.count < 1 {
            return Err(ServiceError::Validation("count must be at least 1".into()));
        }
        let requirements = parse_expression(&req.requirements)
            .map_err(|e| ServiceError::Validation(format!("requirements: {e}")))?;
        let rank: Option<Expression> = req
            .rank
            .as_deref()
            .map(parse_expression)
            .transpose()
            .map_err(|e| ServiceError::Validation(format!("rank: {e}")))?;
        if let Some(token) = &req.token {
            if let Some(ids) = self.store.read(|s| s.jobs_for_token(token).map(<[JobId]>::to_vec)) {
                return Ok(ids);
            }
        }
        let now = self.now();
        let (_, ids) = self.store.transact(|tx| {
            if let Some(token) = &req.token {
                if let Some(ids) = tx.state().jobs_for_token(token) {
                    return Ok::<_, ServiceError>(ids.to_vec());
                }
            }
            let first = tx.state().max_job_id() + 1;
            let mut ids = Vec::with_capacity(req.count as usize);
            for n in 0..u64::from(req.count) {
                let job_id = JobId(first + n);
                tx.push(TupleOp::insert_job(JobRecord {
                    job_id,
                    owner: req.owner.clone(),
                    duration_s: req.duration_s,
                    requirements: requirements.clone(),
                    rank: rank.clone(),
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
            Ok(ids)
        })?;
        info!(event = "submit", owner = %req.owner, count = ids.len(), first = ids[0].0, "jobs submitted");
        Ok(ids)
    }

    pub fn remove_job(&self, job_id: JobId) -> Result<(), ServiceError> {
        let now = self.now();
        self.store.transact(|tx| {
            let state = tx.state();
            let Some(job) = state.job(job_id) else {
                return match state.last_history_kind(job_id) {
                    Some(_) => Err(ServiceError::AlreadyTerminal(job_id)),
                    None => Err(ServiceError::NotFound(job_id)),
                };
            };
            match job.state {
                JobState::Idle => {}
                JobState::Matched => {
                    let m = state.match_for_job(job_id).expect("matched job has a match");
                    tx.push(TupleOp::delete_match(job_id));
                    push_machine_state(tx, &m.vm_id, MachineState::Unclaimed);
                }
                JobState::Running => {
                    let mut j = job.clone();
                    j.remove_requested = true;
                    tx.push(TupleOp::update_job(j));
                    return Ok(());
                }
            }
            tx.push(TupleOp::delete_job(job_id));
            tx.append(HistoryEvent::job(job_id, HistoryKind::Removed, now));
            Ok(())
        })?;
        info!(event = "remove", job = job_id.0, "job removal accepted");
        Ok(())
    }

    pub fn handle_heartbeat(&self, report: &HeartbeatReport) -> Result<HeartbeatResponse, ServiceError> {
        validate_report(report)?;
        self.stats.heartbeats.fetch_add(1, Ordering::Relaxed);
        let now = self.now();
        let (_, (mut outcomes, resync)) = self.store.transact(|tx| {
            let mut outcomes = Vec::with_capacity(report.entries.len());
            let mut resync = false;
            let mut seen_jobs = HashSet::new();
            for entry in &report.entries {
                outcomes.push(self.heartbeat_slot(tx, report.boot_epoch, entry, now, &mut resync, &mut seen_jobs));
            }
            Ok::<_, ServiceError>((outcomes, resync))
        })?;

        let freed = outcomes.iter().any(|o| o.freed);
        if freed && self.store.read(|s| s.idle_count() > 0) {
            self.scheduling_pass(now)?;
            self.store.read(|s| {
                for o in outcomes.iter_mut().filter(|o| o.directive.action == crate::model::Action::None) {
                    if let Some(d) = matchinfo_for(s, &o.directive.vm_id, now) {
                        o.directive = d;
                    }
                }
            });
        }
        Ok(HeartbeatResponse { directives: outcomes.into_iter().map(|o| o.directive).collect(), resync })
    }

    fn heartbeat_slot(
        &self,
        tx: &mut Txn<'_>,
        epoch: u64,
        entry: &SlotReport,
        now: Timestamp,
        resync: &mut bool,
        seen_jobs: &mut HashSet<JobId>,
    ) -> SlotOutcome {
        let state = tx.state();
        let vm = &entry.vm_id;
        let mut release: Option<JobId> = None;
        let mut freed = false;

        let existing = state.machine(vm);
        let mut machine = match existing {
            Some(m) => {
                let mut m = m.clone();
                m.last_heartbeat = now;
                if let Some(attrs) = &entry.attributes {
                    m.attributes = attrs.clone();
                }
                Some(m)
            }
            None => match &entry.attributes {
                Some(attrs) => Some(MachineRecord {
                    vm_id: vm.clone(),
                    attributes: attrs.clone(),
                    state: MachineState::Unclaimed,
                    last_heartbeat: now,
                    boot_epoch: epoch,
                }),
                None => {
                    *resync = true;
                    None
                }
            },
        };
        let rebooted = existing.is_some_and(|m| m.boot_epoch != epoch);
        if (existing.is_none() && machine.is_some()) || rebooted {
            let m = machine.as_mut().expect("machine present");
            m.boot_epoch = epoch;
            if entry.attributes.is_none() {
                *resync = true;
            }
            tx.append(HistoryEvent {
                job_id: None,
                vm_id: Some(vm.clone()),
                kind: HistoryKind::MachineBoot,
                exit_code: None,
                timestamp: now,
                token: None,
                attributes: Some(m.attributes.clone()),
            });
            info!(event = "boot", vm = %vm, epoch, "slot registered");
        }

        // Tuples on this vm as of the committed state, tracked as we go.
        let mut live_match = state.match_on_vm(vm).cloned();
        let mut live_run = state.run_on_vm(vm).cloned();
        let was_busy = live_match.is_some() || live_run.is_some();

        if rebooted {
            if let Some(r) = live_run.take() {
                self.drop_run(tx, &r, now, "slot rebooted");
            }
            if let Some(m) = live_match.take() {
                expire_match_keep_machine(tx, &m);
            }
        }

        for c in &entry.completed {
            if !seen_jobs.insert(c.job_id) {
                continue;
            }
            match &live_run {
                Some(r) if r.job_id == c.job_id => {
                    tx.push(TupleOp::delete_run(c.job_id));
                    tx.push(TupleOp::delete_job(c.job_id));
                    let mut ev = HistoryEvent::job(c.job_id, HistoryKind::Completed, now).on(vm);
                    ev.exit_code = Some(c.exit_code);
                    tx.append(ev);
                    live_run = None;
                    info!(event = "complete", job = c.job_id.0, vm = %vm, exit_code = c.exit_code, "job completed");
                }
                _ => debug!(job = c.job_id.0, vm = %vm, "completion for unknown run ignored"),
            }
        }

        let mut reported_running = None;
        if let Some(running) = &entry.running {
            if seen_jobs.insert(running.job_id) {
                reported_running = Some(running.job_id);
                match live_run.clone() {
                    Some(r) if r.job_id == running.job_id => {
                        let job = state.job(r.job_id).expect("run references a job");
                        if job.remove_requested {
                            tx.push(TupleOp::delete_run(r.job_id));
                            tx.push(TupleOp::delete_job(r.job_id));
                            tx.append(HistoryEvent::job(r.job_id, HistoryKind::Removed, now).on(vm));
                            release = Some(r.job_id);
                            live_run = None;
                            info!(event = "release", job = r.job_id.0, vm = %vm, "running job removed");
                        } else {
                            if r.missed_reports > 0 {
                                let mut r2 = r.clone();
                                r2.missed_reports = 0;
                                tx.push(TupleOp::update_run(r2));
                            }
                            if job.phase != Some(running.phase) {
                                let mut j = job.clone();
                                j.phase = Some(running.phase);
                                tx.push(TupleOp::update_job(j));
                            }
                        }
                    }
                    _ => {
                        // The slot is working on something the service no longer
                        // assigns to it.
                        release = Some(running.job_id);
                        debug!(job = running.job_id.0, vm = %vm, "releasing unassigned job");
                    }
                }
            }
        }

        if let Some(r) = live_run.clone() {
            if reported_running != Some(r.job_id) {
                let missed = r.missed_reports + 1;
                if missed >= self.config.missed_report_limit {
                    self.drop_run(tx, &r, now, "slot stopped reporting job");
                    live_run = None;
                } else {
                    let mut r2 = r;
                    r2.missed_reports = missed;
                    tx.push(TupleOp::update_run(r2));
                }
            }
        }

        let Some(mut machine) = machine else {
            let directive = match release {
                Some(j) => Directive::release(vm.clone(), j),
                None => Directive::none(vm.clone()),
            };
            return SlotOutcome { directive, freed: false };
        };
        machine.state = match (&live_match, &live_run) {
            (Some(_), _) => MachineState::Matched,
            (None, Some(_)) => MachineState::Claimed,
            (None, None) => MachineState::Unclaimed,
        };
        freed |= was_busy && machine.state == MachineState::Unclaimed;
        if existing.is_some() {
            tx.push(TupleOp::update_machine(machine));
        } else {
            tx.push(TupleOp::insert_machine(machine));
        }

        let directive = match (release, &live_match) {
            (Some(j), _) => Directive::release(vm.clone(), j),
            (None, Some(m)) if m.expires_at > now => {
                let job = state.job(m.job_id).expect("match references a job");
                Directive::matchinfo(vm.clone(), descriptor(job))
            }
            _ => Directive::none(vm.clone()),
        };
        SlotOutcome { directive, freed }
    }

    /// Deletes `run` and requeues its job, or finishes it when removal was
    /// requested or the retry cap is reached.
    fn drop_run(&self, tx: &mut Txn<'_>, run: &RunRecord, now: Timestamp, why: &str) {
        let job = tx.state().job(run.job_id).expect("run references a job").clone();
        tx.push(TupleOp::delete_run(run.job_id));
        self.stats.drops.fetch_add(1, Ordering::Relaxed);
        if job.remove_requested {
            tx.push(TupleOp::delete_job(job.job_id));
            tx.append(HistoryEvent::job(job.job_id, HistoryKind::Removed, now).on(&run.vm_id));
            return;
        }
        let retries = job.retry_count + 1;
        tx.append(HistoryEvent::job(job.job_id, HistoryKind::Dropped, now).on(&run.vm_id));
        if self.config.max_retries.is_some_and(|max| retries > max) {
            tx.push(TupleOp::delete_job(job.job_id));
            tx.append(HistoryEvent::job(job.job_id, HistoryKind::Removed, now));
            warn!(event = "drop", job = job.job_id.0, vm = %run.vm_id, retries, reason = why, "retry cap reached; job removed");
            return;
        }
        let mut j = job;
        j.state = JobState::Idle;
        j.phase = None;
        j.retry_count = retries;
        tx.push(TupleOp::update_job(j));
        warn!(event = "drop", job = run.job_id.0, vm = %run.vm_id, retries, reason = why, "job dropped and requeued");
    }

    pub fn accept_match(&self, job_id: JobId, vm_id: &VmId) -> Result<AcceptStatus, ServiceError> {
        let now = self.now();
        let (_, status) = self.store.transact(|tx| {
            let state = tx.state();
            if let Some(r) = state.run_for_job(job_id) {
                return Ok::<_, ServiceError>(if &r.vm_id == vm_id { AcceptStatus::Ok } else { AcceptStatus::Stale });
            }
            let Some(m) = state.match_for_job(job_id).filter(|m| &m.vm_id == vm_id).cloned() else {
                return Ok(AcceptStatus::Stale);
            };
            if m.expires_at <= now {
                expire_match(tx, &m);
                return Ok(AcceptStatus::Stale);
            }
            let mut job = state.job(job_id).expect("match references a job").clone();
            job.state = JobState::Running;
            job.phase = Some(RunPhase::Starting);
            tx.push(TupleOp::delete_match(job_id));
            tx.push(TupleOp::insert_run(RunRecord {
                job_id,
                vm_id: vm_id.clone(),
                started_at: now,
                missed_reports: 0,
            }));
            tx.push(TupleOp::update_job(job));
            push_machine_state(tx, vm_id, MachineState::Claimed);
            tx.append(HistoryEvent::job(job_id, HistoryKind::Started, now).on(vm_id));
            Ok(AcceptStatus::Ok)
        })?;
        debug!(event = "accept", job = job_id.0, vm = %vm_id, status = ?status, "accept-match");
        Ok(status)
    }

    /// Matches idle jobs to fresh unclaimed machines; one transaction per pair.
    pub fn scheduling_pass(&self, now: Timestamp) -> Result<usize, ServiceError> {
        self.stats.passes.fetch_add(1, Ordering::Relaxed);
        let fresh_after = self.fresh_cutoff(now);
        let pairs = self.store.read(|s| {
            if s.idle_count() == 0 {
                return Vec::new();
            }
            let machines: Vec<&MachineRecord> = s
                .tables()
                .machines
                .values()
                .filter(|m| m.state == MachineState::Unclaimed && m.last_heartbeat.max(self.liveness_floor) >= fresh_after)
                .collect();
            if machines.is_empty() {
                return Vec::new();
            }
            match_in_order(s.idle_jobs(), &machines)
        });
        let expires_at = now.plus_secs(self.config.match_lifetime());
        let mut created = 0;
        for (job_id, vm_id) in pairs {
            let res = self.store.transact(|tx| {
                let state = tx.state();
                let (Some(job), Some(machine)) = (state.job(job_id), state.machine(&vm_id)) else {
                    return Ok::<_, StoreError>(false);
                };
                if job.state != JobState::Idle || machine.state != MachineState::Unclaimed {
                    return Ok(false);
                }
                let mut j = job.clone();
                j.state = JobState::Matched;
                tx.push(TupleOp::insert_match(MatchRecord {
                    job_id,
                    vm_id: vm_id.clone(),
                    created_at: now,
                    expires_at,
                }));
                tx.push(TupleOp::update_job(j));
                push_machine_state(tx, &vm_id, MachineState::Matched);
                tx.append(HistoryEvent::job(job_id, HistoryKind::Matched, now).on(&vm_id));
                Ok(true)
            });
            match res {
                Ok((_, true)) => {
                    created += 1;
                    info!(event = "match", job = job_id.0, vm = %vm_id, "match created");
                }
                Ok((_, false)) => {}
                Err(e) => warn!(job = job_id.0, vm = %vm_id, error = %e, "match transaction failed; skipping pair"),
            }
        }
        self.stats.matches_created.fetch_add(created as u64, Ordering::Relaxed);
        Ok(created)
    }

    fn fresh_cutoff(&self, now: Timestamp) -> Timestamp {
        now.minus_secs(self.config.dead_after())
    }

    pub fn expire_stale(&self, now: Timestamp) -> Result<ExpireCounts, ServiceError> {
        let mut counts = ExpireCounts::default();
        let expired: Vec<MatchRecord> = self
            .store
            .read(|s| s.tables().matches.values().filter(|m| m.expires_at <= now).cloned().collect());
        if !expired.is_empty() {
            self.store.transact(|tx| {
                for m in &expired {
                    if tx.state().match_for_job(m.job_id) == Some(m) {
                        expire_match(tx, m);
                        counts.expired_matches += 1;
                    }
                }
                Ok::<_, StoreError>(())
            })?;
            self.stats.expired_matches.fetch_add(counts.expired_matches as u64, Ordering::Relaxed);
            info!(event = "expire", count = counts.expired_matches, "matches expired");
        }

        let cutoff = self.fresh_cutoff(now);
        let dead: Vec<VmId> = self.store.read(|s| {
            s.tables()
                .machines
                .values()
                .filter(|m| m.last_heartbeat.max(self.liveness_floor) < cutoff)
                .map(|m| m.vm_id.clone())
                .collect()
        });
        for vm in dead {
            let (_, drops) = self.store.transact(|tx| {
                let state = tx.state();
                let Some(m) = state.machine(&vm) else { return Ok::<_, StoreError>(0) };
                if m.last_heartbeat.max(self.liveness_floor) >= cutoff {
                    return Ok(0);
                }
                let mut drops = 0;
                if let Some(r) = state.run_on_vm(&vm).cloned() {
                    self.drop_run(tx, &r, now, "node silent");
                    drops += 1;
                }
                if let Some(mm) = state.match_on_vm(&vm).cloned() {
                    expire_match_keep_machine(tx, &mm);
                }
                tx.push(TupleOp::delete_machine(vm.clone()));
                Ok(drops)
            })?;
            counts.requeued_drops += drops;
            counts.dead_machines += 1;
            warn!(event = "dead_node", vm = %vm, drops, "machine declared dead");
        }
        Ok(counts)
    }

    /// One timer tick: expiry then a scheduling pass.
    pub fn tick(&self) -> Result<(ExpireCounts, usize), ServiceError> {
        let now = self.now();
        let counts = self.expire_stale(now)?;
        let created = self.scheduling_pass(now)?;
        Ok((counts, created))
    }

    pub fn query(&self, kind: QueryKind, filter: &QueryFilter) -> Result<QueryPage, ServiceError> {
        let offset = filter.offset.unwrap_or(0);
        let limit = filter.limit.unwrap_or(usize::MAX);
        let since = filter.since.map(Timestamp);
        let page = |total: usize, rows: QueryRows| QueryPage { total, offset, rows };
        match kind {
            QueryKind::Jobs => {
                let st = filter.state.as_deref().map(JobState::from_str).transpose().map_err(ServiceError::BadFilter)?;
                self.store.read(|s| {
                    let hits: Vec<&JobRecord> = s
                        .tables()
                        .jobs
                        .values()
                        .filter(|j| st.is_none_or(|x| j.state == x))
                        .filter(|j| filter.owner.as_ref().is_none_or(|o| &j.owner == o))
                        .filter(|j| filter.job_id.is_none_or(|id| j.job_id.0 == id))
                        .filter(|j| since.is_none_or(|t| j.submit_time >= t))
                        .collect();
                    let rows = hits.iter().skip(offset).take(limit).map(|j| (*j).clone()).collect();
                    Ok(page(hits.len(), QueryRows::Jobs(rows)))
                })
            }
            QueryKind::Machines => {
                if filter.owner.is_some() || filter.job_id.is_some() {
                    return Err(ServiceError::BadFilter("machines have no owner or job_id".into()));
                }
                let st = filter
                    .state
                    .as_deref()
                    .map(MachineState::from_str)
                    .transpose()
                    .map_err(ServiceError::BadFilter)?;
                self.store.read(|s| {
                    let hits: Vec<&MachineRecord> = s
                        .tables()
                        .machines
                        .values()
                        .filter(|m| st.is_none_or(|x| m.state == x))
                        .filter(|m| since.is_none_or(|t| m.last_heartbeat >= t))
                        .collect();
                    let rows = hits.iter().skip(offset).take(limit).map(|m| (*m).clone()).collect();
                    Ok(page(hits.len(), QueryRows::Machines(rows)))
                })
            }
            QueryKind::History => {
                if filter.owner.is_some() {
                    return Err(ServiceError::BadFilter("history has no owner".into()));
                }
                let kind = filter.state.as_deref().map(parse_history_kind).transpose()?;
                self.store.read(|s| {
                    let hits: Vec<&HistoryEvent> = s
                        .history_since(since.unwrap_or(Timestamp(i64::MIN)))
                        .map(|(_, e)| e)
                        .filter(|e| kind.is_none_or(|k| e.kind == k))
                        .filter(|e| filter.job_id.is_none_or(|id| e.job_id == Some(JobId(id))))
                        .collect();
                    let rows = hits.iter().skip(offset).take(limit).map(|e| (*e).clone()).collect();
                    Ok(page(hits.len(), QueryRows::History(rows)))
                })
            }
        }
    }
}

fn parse_history_kind(s: &str) -> Result<HistoryKind, ServiceError> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
        .map_err(|_| ServiceError::BadFilter(format!("unknown history kind {s:?}")))
}

fn validate_report(report: &HeartbeatReport) -> Result<(), ServiceError> {
    let mut vms = HashSet::new();
    for e in &report.entries {
        if e.vm_id.host_id != report.host_id {
            return Err(ServiceError::Validation(format!("slot {} does not belong to {}", e.vm_id, report.host_id)));
        }
        if !vms.insert(&e.vm_id) {
            return Err(ServiceError::Validation(format!("slot {} reported twice", e.vm_id)));
        }
        if let Some(r) = &e.running {
            if e.completed.iter().any(|c| c.job_id == r.job_id) {
                return Err(ServiceError::Validation(format!("job {} both running and completed", r.job_id)));
            }
        }
    }
    Ok(())
}

fn descriptor(job: &JobRecord) -> JobDescriptor {
    JobDescriptor { job_id: job.job_id, duration_s: job.duration_s, attributes: job.attributes.clone() }
}

fn matchinfo_for(s: &State, vm: &VmId, now: Timestamp) -> Option<Directive> {
    let m = s.match_on_vm(vm).filter(|m| m.expires_at > now)?;
    let job = s.job(m.job_id)?;
    Some(Directive::matchinfo(vm.clone(), descriptor(job)))
}

fn push_machine_state(tx: &mut Txn<'_>, vm: &VmId, to: MachineState) {
    let mut m = tx.state().machine(vm).expect("machine exists").clone();
    m.state = to;
    tx.push(TupleOp::update_machine(m));
}

/// Deletes a match and returns its job to IDLE. The caller updates the machine.
fn expire_match_keep_machine(tx: &mut Txn<'_>, m: &MatchRecord) {
    let mut job = tx.state().job(m.job_id).expect("match references a job").clone();
    job.state = JobState::Idle;
    tx.push(TupleOp::delete_match(m.job_id));
    tx.push(TupleOp::update_job(job));
}

fn expire_match(tx: &mut Txn<'_>, m: &MatchRecord) {
    expire_match_keep_machine(tx, m);
    push_machine_state(tx, &m.vm_id, MachineState::Unclaimed);
}
