//! Push baseline daemon.
//!
//! One thread owns the [`Baseline`] and does everything: scheduling ticks,
//! submissions, status reports, and the claim requests it pushes to agents,
//! which are sent inline and block the tick exactly as a single-threaded
//! queue manager would. HTTP handlers only forward commands to that thread.

use std::collections::HashMap;
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use axum::extract::{Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use pullsched_core::agent::ApiError;
use pullsched_core::baseline::{Baseline, ClaimApi};
use pullsched_core::clock::{Clock, SystemClock};
use pullsched_core::model::{AttrValue, Directive, HeartbeatReport, HeartbeatResponse, JobDescriptor, JobId, VmId};
use pullsched_core::service::{QueryFilter, QueryPage, QueryRows, ServiceError, SubmitRequest};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tracing::{debug, error, info};

use crate::agentd::{ClaimRequest, ClaimResponse, CLAIM_URL_ATTR};
use crate::http::{HttpError, JsonClient};
use crate::server::SubmitResponse;

type Reply<T> = oneshot::Sender<Result<T, ServiceError>>;

#[derive(Debug)]
pub enum Command {
    Submit(SubmitRequest, Reply<Vec<JobId>>),
    Heartbeat(HeartbeatReport, Reply<HeartbeatResponse>),
    Stats(oneshot::Sender<BaselineStats>),
    /// History rows in commit order, paged by offset and limit.
    History(QueryFilter, Reply<QueryPage>),
    Shutdown,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BaselineStats {
    pub now_us: i64,
    pub queue_len: usize,
    pub running: usize,
    pub shadows: usize,
    pub slots: usize,
    pub free_slots: usize,
    pub ticks: u64,
    pub starts: u64,
    pub completions: u64,
    pub refused_claims: u64,
    pub compactions: u64,
    pub scanned: u64,
    pub txns: u64,
}

/// Claim requests to agents' `claim_url` endpoints over one connection pool.
pub struct HttpClaims {
    http: reqwest::blocking::Client,
    agents: HashMap<VmId, JsonClient>,
}

impl HttpClaims {
    pub fn new(timeout: Duration) -> Result<Self, ApiError> {
        let http = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(|e| ApiError(e.to_string()))?;
        Ok(HttpClaims { http, agents: HashMap::new() })
    }

    pub fn set_url(&mut self, vm_id: VmId, url: &str) {
        if self.agents.get(&vm_id).is_none_or(|c| c.base() != url.trim_end_matches('/')) {
            self.agents.insert(vm_id, JsonClient::with_client(url, self.http.clone()));
        }
    }

    pub fn knows(&self, vm_id: &VmId) -> bool {
        self.agents.contains_key(vm_id)
    }
}

impl ClaimApi for HttpClaims {
    fn claim(&mut self, vm_id: &VmId, job: &JobDescriptor) -> Result<bool, ApiError> {
        let agent = self.agents.get(vm_id).ok_or_else(|| ApiError(format!("no claim endpoint for {vm_id}")))?;
        let req = ClaimRequest { vm_id: vm_id.clone(), job: job.clone() };
        agent.post::<_, ClaimResponse>("/v1/claim", &req).map(|r| r.accepted)
    }
}

fn claim_url(attrs: &pullsched_core::model::Attributes) -> Option<&str> {
    match attrs.get(CLAIM_URL_ATTR) {
        Some(AttrValue::Str(u)) => Some(u),
        _ => None,
    }
}

/// Registers advertised slots, relays status and completions. Every slot
/// gets a NONE directive; unknown slots ask for a resync.
fn heartbeat(b: &mut Baseline, claims: &mut HttpClaims, report: HeartbeatReport) -> Result<HeartbeatResponse, ServiceError> {
    let mut resp = HeartbeatResponse::default();
    for e in report.entries {
        if let Some(attrs) = e.attributes {
            if let Some(url) = claim_url(&attrs) {
                claims.set_url(e.vm_id.clone(), url);
            }
            b.register_slot(e.vm_id.clone(), attrs)?;
        } else if !claims.knows(&e.vm_id) {
            resp.resync = true;
        }
        if let Some(r) = e.running {
            b.note_status(r.job_id, r.phase);
        }
        for c in e.completed {
            b.handle_completion(c.job_id, c.exit_code)?;
        }
        resp.directives.push(Directive::none(e.vm_id));
    }
    Ok(resp)
}

fn stats(b: &Baseline) -> BaselineStats {
    let c = b.counters();
    BaselineStats {
        now_us: SystemClock.now().0,
        queue_len: b.queue_len(),
        running: b.running_count(),
        shadows: b.shadow_count(),
        slots: b.slots().count(),
        free_slots: b.free_slots(),
        ticks: c.ticks,
        starts: c.starts,
        completions: c.completions,
        refused_claims: c.refused_claims,
        compactions: c.compactions,
        scanned: c.scanned,
        txns: b.store().txn_count(),
    }
}

fn history(b: &Baseline, f: &QueryFilter) -> QueryPage {
    let offset = f.offset.unwrap_or(0);
    let limit = f.limit.unwrap_or(usize::MAX);
    b.store().read(|s| {
        let all = s.tables().history.len();
        let rows = s.tables().history.values().skip(offset).take(limit).cloned().collect();
        QueryPage { total: all, offset, rows: QueryRows::History(rows) }
    })
}

/// Runs the queue manager until shutdown or until every sender is gone.
pub fn run_baseline(mut b: Baseline, mut claims: HttpClaims, commands: Receiver<Command>) {
    let clock = SystemClock;
    for (vm, attrs) in b.slots() {
        if let Some(url) = claim_url(attrs) {
            claims.set_url(vm.clone(), url);
        }
    }
    let tick = Duration::from_secs_f64(b.config().tick_period());
    let mut next_tick = Instant::now();
    info!(event = "baseline_boot", queue = b.queue_len(), slots = b.slots().count(), "baseline up");
    loop {
        if Instant::now() >= next_tick {
            match b.schedd_tick(clock.now(), &mut claims) {
                Ok(started) if !started.is_empty() => {
                    debug!(event = "tick", starts = started.len(), queue = b.queue_len(), "jobs started")
                }
                Ok(_) => {}
                Err(e) => error!(error = %e, "scheduling tick failed"),
            }
            // A late tick is not made up with a burst; the schedule slips.
            next_tick = (next_tick + tick).max(Instant::now());
        }
        match commands.recv_timeout(next_tick.saturating_duration_since(Instant::now())) {
            Ok(Command::Submit(req, reply)) => {
                let _ = reply.send(b.submit(&req));
            }
            Ok(Command::Heartbeat(report, reply)) => {
                let _ = reply.send(heartbeat(&mut b, &mut claims, report));
            }
            Ok(Command::Stats(reply)) => {
                let _ = reply.send(stats(&b));
            }
            Ok(Command::History(filter, reply)) => {
                let _ = reply.send(Ok(history(&b, &filter)));
            }
            Ok(Command::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => {}
        }
    }
    if let Err(e) = b.store().sync() {
        error!(error = %e, "final journal sync failed");
    }
    let c = b.counters();
    info!(event = "baseline_stop", starts = c.starts, completions = c.completions, "baseline stopped");
}

async fn ask<T>(tx: &Sender<Command>, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Result<T, HttpError> {
    let (reply, rx) = oneshot::channel();
    tx.send(make(reply)).map_err(|_| HttpError::internal("baseline is shutting down"))?;
    rx.await.map_err(|_| HttpError::internal("baseline is shutting down"))
}

async fn submit(State(tx): State<Sender<Command>>, Json(req): Json<SubmitRequest>) -> Result<Json<SubmitResponse>, HttpError> {
    let job_ids = ask(&tx, |r| Command::Submit(req, r)).await??;
    Ok(Json(SubmitResponse { job_ids }))
}

async fn report(
    State(tx): State<Sender<Command>>,
    Json(report): Json<HeartbeatReport>,
) -> Result<Json<HeartbeatResponse>, HttpError> {
    Ok(Json(ask(&tx, |r| Command::Heartbeat(report, r)).await??))
}

async fn get_stats(State(tx): State<Sender<Command>>) -> Result<Json<BaselineStats>, HttpError> {
    Ok(Json(ask(&tx, Command::Stats).await?))
}

async fn get_history(
    State(tx): State<Sender<Command>>,
    Query(f): Query<QueryFilter>,
) -> Result<Json<QueryPage>, HttpError> {
    Ok(Json(ask(&tx, |r| Command::History(f, r)).await??))
}

pub fn router(commands: Sender<Command>) -> Router {
    Router::new()
        .route("/v1/jobs", post(submit))
        .route("/v1/heartbeat", post(report))
        .route("/v1/stats", get(get_stats))
        .route("/v1/history", get(get_history))
        .with_state(commands)
}
