//! Node agent daemon: the control loop around a [`NodeAgent`].
//!
//! One thread owns all slot state; a helper thread only carries reports to
//! the server and hands the responses back. The control thread sleeps
//! until the next heartbeat or the next job finish, whichever comes first,
//! and wakes early for commands (pushed claims, report responses, shutdown).
//! Starters are not separate workers: a running job is its finish time,
//! checked by the loop.

use std::path::Path;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use pullsched_core::agent::{AgentCounters, AgentEvent, ApiError, NodeAgent, SchedulerApi};
use pullsched_core::clock::{Clock, SystemClock};
use pullsched_core::model::{HeartbeatReport, HeartbeatResponse, JobDescriptor, Timestamp, VmId};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tracing::{debug, info, warn};

use crate::http::HttpError;

/// First retry delay after a failed heartbeat; doubles up to the period.
const INITIAL_BACKOFF: Duration = Duration::from_millis(100);

/// Attribute through which a push-mode slot advertises its claim endpoint.
pub const CLAIM_URL_ATTR: &str = "claim_url";

#[derive(Debug)]
pub enum Command {
    /// A job pushed by the baseline; the reply says whether it started.
    Claim { vm_id: VmId, job: JobDescriptor, reply: oneshot::Sender<bool> },
    /// Outcome of the report last sent.
    Reported(Result<HeartbeatResponse, ApiError>),
    Shutdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaimRequest {
    pub vm_id: VmId,
    pub job: JobDescriptor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaimResponse {
    pub accepted: bool,
}

/// Reads, increments and persists the boot counter in `state_dir`. Without a
/// state directory the Unix time in seconds stands in, which also grows
/// across restarts.
pub fn next_boot_epoch(state_dir: Option<&Path>) -> std::io::Result<u64> {
    let Some(dir) = state_dir else {
        return Ok(SystemClock.now().0 as u64 / 1_000_000);
    };
    std::fs::create_dir_all(dir)?;
    let path = dir.join("boot_epoch");
    let prev = match std::fs::read_to_string(&path) {
        Ok(s) => s.trim().parse::<u64>().map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
        Err(e) => return Err(e),
    };
    let next = prev + 1;
    let tmp = dir.join("boot_epoch.tmp");
    std::fs::write(&tmp, next.to_string())?;
    std::fs::File::open(&tmp)?.sync_all()?;
    std::fs::rename(&tmp, &path)?;
    Ok(next)
}

fn log_events(events: &[AgentEvent]) {
    for e in events {
        match e {
            AgentEvent::Started { vm_id, job_id, ends_at } => {
                info!(event = "start", vm = %vm_id, job = job_id.0, ends_at = ends_at.0, "job started")
            }
            AgentEvent::Finished { vm_id, job_id } => info!(event = "finish", vm = %vm_id, job = job_id.0, "job finished"),
            AgentEvent::Abandoned { vm_id, job_id } => {
                warn!(event = "abandon", vm = %vm_id, job = job_id.0, "job abandoned by fault injection")
            }
            AgentEvent::Released { vm_id, job_id } => info!(event = "release", vm = %vm_id, job = job_id.0, "job released"),
            AgentEvent::Stale { vm_id, job_id } => debug!(event = "stale", vm = %vm_id, job = job_id.0, "match was stale"),
            AgentEvent::Refused { vm_id, job_id } => warn!(event = "refuse", vm = %vm_id, job = job_id.0, "job refused"),
        }
    }
}

fn until(t: Timestamp, now: Timestamp) -> Duration {
    Duration::from_micros(t.0.saturating_sub(now.0).max(0) as u64)
}

/// Runs the agent until a shutdown command arrives or every sender is gone.
///
/// Reports travel on a separate uplink thread and their responses come back
/// through `commands`, so the loop keeps serving pushed claims while a
/// report is in flight. `loopback` must feed `commands`.
pub fn run_agent(
    mut agent: NodeAgent,
    api: &(dyn SchedulerApi + Sync),
    commands: Receiver<Command>,
    loopback: Sender<Command>,
) -> AgentCounters {
    let clock = SystemClock;
    let period = Duration::from_secs_f64(agent.config().heartbeat_period());
    let report_on_change = agent.config().report_on_change;
    info!(event = "agent_boot", host = agent.host_id(), epoch = agent.boot_epoch(), slots = agent.slots().len(), "agent up");
    let (uplink, outbox) = mpsc::channel::<HeartbeatReport>();
    std::thread::scope(|scope| {
        scope.spawn(move || {
            for report in outbox {
                if loopback.send(Command::Reported(api.heartbeat(&report))).is_err() {
                    break;
                }
            }
        });
        let mut next_beat = Instant::now();
        let mut backoff: Option<Duration> = None;
        let mut in_flight = false;
        // A job finished since the last report went out.
        let mut changed = false;
        loop {
            let finished = agent.finish_due(clock.now());
            log_events(&finished);
            changed |= finished.iter().any(|e| matches!(e, AgentEvent::Finished { .. }));
            let due = Instant::now() >= next_beat;
            if !in_flight && (due || (changed && report_on_change && backoff.is_none())) {
                if uplink.send(agent.build_report()).is_err() {
                    break;
                }
                in_flight = true;
                changed = false;
                if due {
                    next_beat = Instant::now() + period;
                }
            }
            let now = clock.now();
            let mut wait = if in_flight { period } else { next_beat.saturating_duration_since(Instant::now()) };
            if let Some(t) = agent.next_finish() {
                wait = wait.min(until(t, now));
            }
            match commands.recv_timeout(wait) {
                Ok(Command::Reported(Ok(resp))) => {
                    in_flight = false;
                    backoff = None;
                    log_events(&agent.apply_response(&resp, api, clock.now()));
                }
                Ok(Command::Reported(Err(e))) => {
                    in_flight = false;
                    agent.report_failed();
                    let wait = backoff.map_or(INITIAL_BACKOFF, |b| (b * 2).min(period));
                    warn!(event = "heartbeat_failed", error = %e, retry_ms = wait.as_millis() as u64, "heartbeat failed");
                    backoff = Some(wait);
                    next_beat = Instant::now() + wait;
                }
                Ok(Command::Claim { vm_id, job, reply }) => {
                    let event = agent.claim(&vm_id, job, clock.now());
                    let accepted = matches!(event, AgentEvent::Started { .. });
                    log_events(&[event]);
                    let _ = reply.send(accepted);
                }
                Ok(Command::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {}
            }
        }
        drop(uplink);
    });
    let counters = agent.counters();
    info!(
        event = "agent_stop",
        accepted = counters.accepted,
        completed = counters.completed,
        abandoned = counters.abandoned,
        "agent stopped"
    );
    counters
}

async fn claim(
    State(tx): State<Sender<Command>>,
    Json(req): Json<ClaimRequest>,
) -> Result<Json<ClaimResponse>, HttpError> {
    let (reply, rx) = oneshot::channel();
    tx.send(Command::Claim { vm_id: req.vm_id, job: req.job, reply })
        .map_err(|_| HttpError::internal("agent is shutting down"))?;
    let accepted = rx.await.map_err(|_| HttpError::internal("agent is shutting down"))?;
    Ok(Json(ClaimResponse { accepted }))
}

/// The push-mode endpoint, handing claims to the control loop.
pub fn claim_router(commands: Sender<Command>) -> Router {
    Router::new().route("/v1/claim", post(claim)).with_state(commands)
}
