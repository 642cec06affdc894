//! Execute-node agent: one per host, managing its slots.
//!
//! [`NodeAgent`] is a synchronous state machine. The caller owns the clock and
//! the transport: it asks for a report, delivers it through a
//! [`SchedulerApi`], and hands the response back. The embedded harness drives
//! it from a virtual-time event queue; the network daemon drives it from a
//! timer loop.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::model::{
    AcceptStatus, Action, AttrValue, Attributes, Completion, HeartbeatReport, HeartbeatResponse, JobDescriptor,
    JobId, RunPhase, RunningJob, SlotReport, Timestamp, VmId,
};
use crate::service::{Scheduler, ServiceError};

/// Host-wide attributes that are split evenly across slots.
pub const DIVIDED_ATTRS: &[&str] = &["memory_mb", "disk_mb", "cpus"];

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub server: String,
    pub host_id: String,
    pub vm_count: u32,
    /// Paper-scale seconds between heartbeats.
    pub heartbeat_interval_s: f64,
    pub time_scale: f64,
    /// Host attributes; see [`DIVIDED_ATTRS`].
    pub attributes: Attributes,
    /// Extra attributes per slot index, merged over the host attributes.
    pub slot_attributes: Vec<Attributes>,
    /// Probability that a finished job is silently abandoned.
    pub fault_rate: f64,
    pub seed: u64,
    /// Send an extra heartbeat as soon as a job finishes.
    pub report_on_change: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            server: "http://127.0.0.1:8080".into(),
            host_id: "host0".into(),
            vm_count: 1,
            heartbeat_interval_s: 60.0,
            time_scale: 1.0,
            attributes: Attributes::new(),
            slot_attributes: Vec::new(),
            fault_rate: 0.0,
            seed: 0,
            report_on_change: true,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.vm_count < 1 {
            return Err("vm_count must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.fault_rate) {
            return Err("fault_rate must be within [0, 1]".into());
        }
        if !(self.heartbeat_interval_s > 0.0 && self.time_scale > 0.0) {
            return Err("heartbeat interval and time scale must be positive".into());
        }
        if self.host_id.is_empty() || self.host_id.contains('/') {
            return Err("host_id must be non-empty and contain no '/'".into());
        }
        Ok(())
    }

    pub fn heartbeat_period(&self) -> f64 {
        self.heartbeat_interval_s / self.time_scale
    }

    /// Attributes advertised for one slot.
    pub fn slot_attrs(&self, slot: u32) -> Attributes {
        let mut attrs = self.attributes.clone();
        for name in DIVIDED_ATTRS {
            let share = match attrs.get(*name) {
                Some(AttrValue::Int(v)) => Some(AttrValue::Int(v / i64::from(self.vm_count))),
                Some(AttrValue::Real(v)) => Some(AttrValue::Real(v / f64::from(self.vm_count))),
                _ => None,
            };
            if let Some(v) = share {
                attrs.insert((*name).to_string(), v);
            }
        }
        attrs.insert("slot_index".into(), AttrValue::Int(i64::from(slot)));
        if let Some(extra) = self.slot_attributes.get(slot as usize) {
            attrs.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        attrs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError(pub String);

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ApiError {}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e.to_string())
    }
}

/// The two calls an agent makes. Implemented in-process by [`Scheduler`] and
/// over HTTP by the network client.
pub trait SchedulerApi {
    fn heartbeat(&self, report: &HeartbeatReport) -> Result<HeartbeatResponse, ApiError>;
    fn accept_match(&self, job_id: JobId, vm_id: &VmId) -> Result<AcceptStatus, ApiError>;
}

impl SchedulerApi for Scheduler {
    fn heartbeat(&self, report: &HeartbeatReport) -> Result<HeartbeatResponse, ApiError> {
        Ok(self.handle_heartbeat(report)?)
    }

    fn accept_match(&self, job_id: JobId, vm_id: &VmId) -> Result<AcceptStatus, ApiError> {
        Ok(Scheduler::accept_match(self, job_id, vm_id)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SlotPhase {
    Unclaimed,
    Starting,
    Executing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveJob {
    pub job: JobDescriptor,
    pub started_at: Timestamp,
    pub ends_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotState {
    pub vm_id: VmId,
    pub phase: SlotPhase,
    pub current: Option<ActiveJob>,
    /// Completions not yet acknowledged by a heartbeat response.
    pub pending: Vec<Completion>,
    pub abandoned: u64,
}

/// Things the agent did, for logs and metrics.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentEvent {
    Started { vm_id: VmId, job_id: JobId, ends_at: Timestamp },
    Stale { vm_id: VmId, job_id: JobId },
    Refused { vm_id: VmId, job_id: JobId },
    Released { vm_id: VmId, job_id: JobId },
    Finished { vm_id: VmId, job_id: JobId },
    Abandoned { vm_id: VmId, job_id: JobId },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentCounters {
    pub accepted: u64,
    pub completed: u64,
    pub abandoned: u64,
    pub released: u64,
}

pub struct NodeAgent {
    config: AgentConfig,
    boot_epoch: u64,
    slots: Vec<SlotState>,
    send_attributes: bool,
    /// Completions carried by the report currently in flight, per slot.
    in_flight: Vec<usize>,
    rng: ChaCha8Rng,
    counters: AgentCounters,
}

impl fmt::Debug for NodeAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeAgent")
            .field("host_id", &self.config.host_id)
            .field("boot_epoch", &self.boot_epoch)
            .field("counters", &self.counters)
            .finish()
    }
}

/// FNV-1a; a stable per-host salt for the fault generator.
fn host_salt(host: &str) -> u64 {
    host.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl NodeAgent {
    pub fn new(config: AgentConfig, boot_epoch: u64) -> Result<Self, String> {
        config.validate()?;
        let slots = (0..config.vm_count)
            .map(|i| SlotState {
                vm_id: VmId::new(config.host_id.clone(), i),
                phase: SlotPhase::Unclaimed,
                current: None,
                pending: Vec::new(),
                abandoned: 0,
            })
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ host_salt(&config.host_id));
        Ok(NodeAgent {
            in_flight: vec![0; config.vm_count as usize],
            config,
            boot_epoch,
            slots,
            send_attributes: true,
            rng,
            counters: AgentCounters::default(),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn host_id(&self) -> &str {
        &self.config.host_id
    }

    pub fn boot_epoch(&self) -> u64 {
        self.boot_epoch
    }

    pub fn slots(&self) -> &[SlotState] {
        &self.slots
    }

    pub fn counters(&self) -> AgentCounters {
        self.counters
    }

    pub fn has_pending_completions(&self) -> bool {
        self.slots.iter().any(|s| !s.pending.is_empty())
    }

    /// Builds the next heartbeat report. Pending completions stay queued until
    /// [`NodeAgent::apply_response`] sees the server's answer.
    pub fn build_report(&mut self) -> HeartbeatReport {
        let with_attrs = self.send_attributes;
        let entries = self
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| {
                self.in_flight[i] = s.pending.len();
                SlotReport {
                    vm_id: s.vm_id.clone(),
                    attributes: with_attrs.then(|| self.config.slot_attrs(i as u32)),
                    running: s.current.as_ref().map(|a| RunningJob {
                        job_id: a.job.job_id,
                        phase: if s.phase == SlotPhase::Starting { RunPhase::Starting } else { RunPhase::Executing },
                    }),
                    completed: s.pending.clone(),
                }
            })
            .collect();
        HeartbeatReport { host_id: self.config.host_id.clone(), boot_epoch: self.boot_epoch, entries }
    }

    /// The report was not delivered; everything stays queued.
    pub fn report_failed(&mut self) {
        self.in_flight.iter_mut().for_each(|n| *n = 0);
    }

    /// Applies the server's directives for the report last built.
    pub fn apply_response(
        &mut self,
        resp: &HeartbeatResponse,
        api: &dyn SchedulerApi,
        now: Timestamp,
    ) -> Vec<AgentEvent> {
        for (slot, n) in self.slots.iter_mut().zip(self.in_flight.iter_mut()) {
            slot.pending.drain(..(*n).min(slot.pending.len()));
            *n = 0;
        }
        self.send_attributes = resp.resync;
        let mut events = Vec::new();
        for d in &resp.directives {
            let Some(idx) = self.slot_index(&d.vm_id) else {
                warn!(vm = %d.vm_id, "directive for a slot this host does not have");
                continue;
            };
            match d.action {
                Action::None => {}
                Action::Matchinfo => {
                    let Some(job) = d.job.clone() else {
                        warn!(vm = %d.vm_id, "MATCHINFO without a job descriptor");
                        continue;
                    };
                    if self.slots[idx].current.is_some() {
                        warn!(vm = %d.vm_id, job = job.job_id.0, "MATCHINFO for an occupied slot refused");
                        events.push(AgentEvent::Refused { vm_id: d.vm_id.clone(), job_id: job.job_id });
                        continue;
                    }
                    match api.accept_match(job.job_id, &d.vm_id) {
                        Ok(AcceptStatus::Ok) => events.push(self.start(idx, job, now)),
                        Ok(AcceptStatus::Stale) => {
                            events.push(AgentEvent::Stale { vm_id: d.vm_id.clone(), job_id: job.job_id })
                        }
                        Err(e) => debug!(vm = %d.vm_id, error = %e, "accept-match failed; slot stays free"),
                    }
                }
                Action::Release => {
                    let slot = &mut self.slots[idx];
                    let target = d.release_job_id;
                    if slot.current.as_ref().is_some_and(|a| Some(a.job.job_id) == target) {
                        let a = slot.current.take().expect("checked");
                        slot.phase = SlotPhase::Unclaimed;
                        self.counters.released += 1;
                        events.push(AgentEvent::Released { vm_id: d.vm_id.clone(), job_id: a.job.job_id });
                    }
                }
            }
        }
        events
    }

    /// A job pushed directly onto a slot, bypassing the match protocol. Only
    /// the push baseline does this; an occupied or unknown slot refuses.
    pub fn claim(&mut self, vm_id: &VmId, job: JobDescriptor, now: Timestamp) -> AgentEvent {
        match self.slot_index(vm_id) {
            Some(idx) if self.slots[idx].current.is_none() => self.start(idx, job, now),
            _ => AgentEvent::Refused { vm_id: vm_id.clone(), job_id: job.job_id },
        }
    }

    fn start(&mut self, idx: usize, job: JobDescriptor, now: Timestamp) -> AgentEvent {
        let ends_at = now.plus_secs(job.duration_s / self.config.time_scale);
        let slot = &mut self.slots[idx];
        let job_id = job.job_id;
        slot.current = Some(ActiveJob { job, started_at: now, ends_at });
        // The starter comes up immediately; the next report says EXECUTING.
        slot.phase = SlotPhase::Executing;
        self.counters.accepted += 1;
        AgentEvent::Started { vm_id: slot.vm_id.clone(), job_id, ends_at }
    }

    /// Earliest time a running job finishes.
    pub fn next_finish(&self) -> Option<Timestamp> {
        self.slots.iter().filter_map(|s| s.current.as_ref().map(|a| a.ends_at)).min()
    }

    /// Finishes every job whose work is done by `now`: either queues a
    /// completion or, with probability `fault_rate`, drops it silently.
    pub fn finish_due(&mut self, now: Timestamp) -> Vec<AgentEvent> {
        let mut events = Vec::new();
        for slot in &mut self.slots {
            let due = slot.current.as_ref().is_some_and(|a| a.ends_at <= now);
            if !due {
                continue;
            }
            let a = slot.current.take().expect("checked");
            slot.phase = SlotPhase::Unclaimed;
            let job_id = a.job.job_id;
            let abandon = self.config.fault_rate > 0.0 && self.rng.gen_bool(self.config.fault_rate);
            if abandon {
                slot.abandoned += 1;
                self.counters.abandoned += 1;
                events.push(AgentEvent::Abandoned { vm_id: slot.vm_id.clone(), job_id });
            } else {
                slot.pending.push(Completion { job_id, exit_code: 0, end_time: a.ends_at });
                self.counters.completed += 1;
                events.push(AgentEvent::Finished { vm_id: slot.vm_id.clone(), job_id });
            }
        }
        events
    }

    fn slot_index(&self, vm: &VmId) -> Option<usize> {
        if vm.host_id != self.config.host_id {
            return None;
        }
        let i = vm.slot_index as usize;
        (i < self.slots.len()).then_some(i)
    }
}

/// One complete heartbeat exchange: report, deliver, apply.
pub fn exchange(agent: &mut NodeAgent, api: &dyn SchedulerApi, now: Timestamp) -> Result<Vec<AgentEvent>, ApiError> {
    let report = agent.build_report();
    match api.heartbeat(&report) {
        Ok(resp) => Ok(agent.apply_response(&resp, api, now)),
        Err(e) => {
            agent.report_failed();
            Err(e)
        }
    }
}
