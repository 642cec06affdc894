//! Domain types shared by the store, the scheduler service, the node agent and
//! the push baseline.
//!
//! Job and machine state is a pure function of which match/run tuples exist.
//! The `state` fields on [`JobRecord`] and [`MachineRecord`] are a denormalized
//! copy that the store re-checks after every transaction.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matchmaker::Expression;

/// Microseconds on the service clock (virtual or wall, depending on mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * 1_000_000.0).round() as i64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    pub fn plus_secs(self, secs: f64) -> Self {
        Timestamp(self.0 + (secs * 1_000_000.0).round() as i64)
    }

    pub fn minus_secs(self, secs: f64) -> Self {
        Timestamp(self.0 - (secs * 1_000_000.0).round() as i64)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A schedulable slot: `(host_id, slot_index)`. Ordering is the tuple order,
/// which is also the tie-break order used by the matchmaker.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VmId {
    pub host_id: String,
    pub slot_index: u32,
}

impl VmId {
    pub fn new(host_id: impl Into<String>, slot_index: u32) -> Self {
        VmId { host_id: host_id.into(), slot_index }
    }
}

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.host_id, self.slot_index)
    }
}

impl FromStr for VmId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (host, slot) = s.rsplit_once('/').ok_or_else(|| format!("bad vm id {s:?}"))?;
        let slot_index = slot.parse().map_err(|_| format!("bad slot index in {s:?}"))?;
        Ok(VmId::new(host, slot_index))
    }
}

/// Scalar attribute value. No nested structures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Int(i64),
    Real(f64),
    Str(String),
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Bool(b) => write!(f, "{b}"),
            AttrValue::Int(i) => write!(f, "{i}"),
            AttrValue::Real(r) => write!(f, "{r:?}"),
            AttrValue::Str(s) => write!(f, "{s:?}"),
        }
    }
}

impl AttrValue {
    /// Parses `1024`, `2.5`, `true`, or falls back to a string.
    pub fn parse_loose(s: &str) -> AttrValue {
        if let Ok(i) = s.parse::<i64>() {
            AttrValue::Int(i)
        } else if let Ok(r) = s.parse::<f64>() {
            AttrValue::Real(r)
        } else if s == "true" || s == "false" {
            AttrValue::Bool(s == "true")
        } else {
            AttrValue::Str(s.to_string())
        }
    }
}

pub type Attributes = BTreeMap<String, AttrValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Idle,
    Matched,
    Running,
}

impl FromStr for JobState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "IDLE" => Ok(JobState::Idle),
            "MATCHED" => Ok(JobState::Matched),
            "RUNNING" => Ok(JobState::Running),
            _ => Err(format!("unknown job state {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MachineState {
    Unclaimed,
    Matched,
    Claimed,
}

impl FromStr for MachineState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "UNCLAIMED" => Ok(MachineState::Unclaimed),
            "MATCHED" => Ok(MachineState::Matched),
            "CLAIMED" => Ok(MachineState::Claimed),
            _ => Err(format!("unknown machine state {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunPhase {
    Starting,
    Executing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: JobId,
    pub owner: String,
    pub duration_s: f64,
    pub requirements: Expression,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<Expression>,
    #[serde(default)]
    pub attributes: Attributes,
    pub state: JobState,
    pub submit_time: Timestamp,
    pub retry_count: u32,
    /// Last phase reported by the executing slot (RUNNING jobs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<RunPhase>,
    /// Set by `remove_job` on a RUNNING job; the slot receives RELEASE.
    #[serde(default)]
    pub remove_requested: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineRecord {
    pub vm_id: VmId,
    #[serde(default)]
    pub attributes: Attributes,
    pub state: MachineState,
    pub last_heartbeat: Timestamp,
    pub boot_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub job_id: JobId,
    pub vm_id: VmId,
    pub created_at: Timestamp,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub job_id: JobId,
    pub vm_id: VmId,
    pub started_at: Timestamp,
    /// Consecutive heartbeats from the slot that did not mention the job.
    #[serde(default)]
    pub missed_reports: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HistoryKind {
    Submitted,
    Matched,
    Started,
    Completed,
    Dropped,
    Removed,
    /// Machine-level note: a slot came up with a new boot epoch.
    MachineBoot,
}

impl HistoryKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, HistoryKind::Completed | HistoryKind::Removed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    /// Absent only for machine-level notes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<JobId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vm_id: Option<VmId>,
    pub kind: HistoryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    pub timestamp: Timestamp,
    /// Client idempotency token (SUBMITTED only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    /// Full machine attributes (MACHINE_BOOT only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Attributes>,
}

impl HistoryEvent {
    pub fn job(job_id: JobId, kind: HistoryKind, timestamp: Timestamp) -> Self {
        HistoryEvent {
            job_id: Some(job_id),
            vm_id: None,
            kind,
            exit_code: None,
            timestamp,
            token: None,
            attributes: None,
        }
    }

    pub fn on(mut self, vm_id: &VmId) -> Self {
        self.vm_id = Some(vm_id.clone());
        self
    }
}

// ---------------------------------------------------------------------------
// Heartbeat protocol messages.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatReport {
    pub host_id: String,
    pub boot_epoch: u64,
    pub entries: Vec<SlotReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    pub vm_id: VmId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Attributes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running: Option<RunningJob>,
    #[serde(default)]
    pub completed: Vec<Completion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningJob {
    pub job_id: JobId,
    pub phase: RunPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub job_id: JobId,
    pub exit_code: i32,
    pub end_time: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    None,
    Matchinfo,
    Release,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobDescriptor {
    pub job_id: JobId,
    pub duration_s: f64,
    #[serde(default)]
    pub attributes: Attributes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub vm_id: VmId,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job: Option<JobDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release_job_id: Option<JobId>,
}

impl Directive {
    pub fn none(vm_id: VmId) -> Self {
        Directive { vm_id, action: Action::None, job: None, release_job_id: None }
    }

    pub fn matchinfo(vm_id: VmId, job: JobDescriptor) -> Self {
        Directive { vm_id, action: Action::Matchinfo, job: Some(job), release_job_id: None }
    }

    pub fn release(vm_id: VmId, job_id: JobId) -> Self {
        Directive { vm_id, action: Action::Release, job: None, release_job_id: Some(job_id) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatResponse {
    pub directives: Vec<Directive>,
    /// The server has no attributes for at least one reported slot; the
    /// agent should include full attributes in its next report.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub resync: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AcceptStatus {
    Ok,
    Stale,
}

// ---------------------------------------------------------------------------
// Lifecycle state machine.

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("a job cannot hold both a match tuple and a run tuple")]
    InvalidCombination,
    #[error("illegal transition {event:?} from {from:?}")]
    IllegalTransition { from: JobState, event: LifecycleEvent },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LifecycleEvent {
    MatchCreated,
    MatchExpired,
    MatchAccepted,
    RunCompleted,
    RunDropped,
    JobRemoved,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 6] = [
        LifecycleEvent::MatchCreated,
        LifecycleEvent::MatchExpired,
        LifecycleEvent::MatchAccepted,
        LifecycleEvent::RunCompleted,
        LifecycleEvent::RunDropped,
        LifecycleEvent::JobRemoved,
    ];
}

/// Where a job goes after a lifecycle event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Successor {
    State(JobState),
    Terminal,
}

pub fn derive_job_state(has_match: bool, has_run: bool) -> Result<JobState, ModelError> {
    match (has_match, has_run) {
        (false, false) => Ok(JobState::Idle),
        (true, false) => Ok(JobState::Matched),
        (false, true) => Ok(JobState::Running),
        (true, true) => Err(ModelError::InvalidCombination),
    }
}

/// Machine state follows the same tuple-presence rule as jobs.
pub fn derive_machine_state(has_match: bool, has_run: bool) -> Result<MachineState, ModelError> {
    derive_job_state(has_match, has_run).map(|s| match s {
        JobState::Idle => MachineState::Unclaimed,
        JobState::Matched => MachineState::Matched,
        JobState::Running => MachineState::Claimed,
    })
}

pub fn validate_event(current: JobState, event: LifecycleEvent) -> Result<Successor, ModelError> {
    use JobState::*;
    use LifecycleEvent::*;
    match (current, event) {
        (_, JobRemoved) => Ok(Successor::Terminal),
        (Idle, MatchCreated) => Ok(Successor::State(Matched)),
        (Matched, MatchExpired) => Ok(Successor::State(Idle)),
        (Matched, MatchAccepted) => Ok(Successor::State(Running)),
        (Running, RunCompleted) => Ok(Successor::Terminal),
        (Running, RunDropped) => Ok(Successor::State(Idle)),
        (from, event) => Err(ModelError::IllegalTransition { from, event }),
    }
}
