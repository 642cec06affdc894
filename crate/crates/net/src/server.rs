//! HTTP front end for the scheduler service.
//!
//! Every request is turned into calls on the shared [`Scheduler`], which
//! serializes mutations through the store. Store calls block (journal
//! fsyncs), so handlers run them on the blocking pool. A timer task runs
//! match expiry and the periodic scheduling pass.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use pullsched_core::clock::{Clock, SystemClock};
use pullsched_core::harness::ServerSample;
use pullsched_core::model::{AcceptStatus, HeartbeatReport, HeartbeatResponse, JobId, VmId};
use pullsched_core::service::{
    Accounting, QueryFilter, QueryKind, QueryPage, Scheduler, ServiceConfig, ServiceError, SubmitRequest,
};
use pullsched_core::store::{Store, StoreOptions};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tracing::{error, info};

use crate::http::HttpError;

/// Bound on retained measurement samples; older ones are discarded.
const MAX_SAMPLES: usize = 2_000_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub job_ids: Vec<JobId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcceptRequest {
    pub job_id: JobId,
    pub vm_id: VmId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcceptResponse {
    pub status: AcceptStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoveResponse {
    pub job_id: JobId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerStats {
    pub now_us: i64,
    pub heartbeats: u64,
    pub matches_created: u64,
    pub passes: u64,
    pub drops: u64,
    pub expired_matches: u64,
    pub txns: u64,
    pub accounting: Accounting,
}

#[derive(Clone)]
pub struct AppState {
    pub sched: Arc<Scheduler>,
    samples: Arc<Mutex<VecDeque<ServerSample>>>,
}

fn record(samples: &Mutex<VecDeque<ServerSample>>, s: ServerSample) {
    let mut q = samples.lock().unwrap();
    if q.len() == MAX_SAMPLES {
        q.pop_front();
    }
    q.push_back(s);
}

impl AppState {
    /// Opens the store (journaled when a directory is configured) and builds
    /// the scheduler over the wall clock.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let options = StoreOptions { durability: config.durability, verify_full: false };
        let store = Arc::new(match &config.journal_dir {
            Some(dir) => Store::open(dir, options)?,
            None => Store::in_memory(options),
        });
        let samples = Arc::new(Mutex::new(VecDeque::new()));
        let s = Arc::clone(&samples);
        store.set_observer(Some(Box::new(move |_, _| record(&s, ServerSample::Txn { t_us: SystemClock.now().0 }))));
        let sched = Arc::new(Scheduler::new(store, Arc::new(SystemClock), config)?);
        Ok(AppState { sched, samples })
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, HttpError> {
    tokio::task::spawn_blocking(f).await.map_err(HttpError::internal)?.map_err(HttpError::from)
}

async fn submit(State(st): State<AppState>, Json(req): Json<SubmitRequest>) -> Result<Json<SubmitResponse>, HttpError> {
    let job_ids = blocking(move || st.sched.submit_job(&req)).await?;
    Ok(Json(SubmitResponse { job_ids }))
}

async fn remove(State(st): State<AppState>, Path(id): Path<u64>) -> Result<Json<RemoveResponse>, HttpError> {
    blocking(move || st.sched.remove_job(JobId(id))).await?;
    Ok(Json(RemoveResponse { job_id: JobId(id) }))
}

async fn query(st: AppState, kind: QueryKind, filter: QueryFilter) -> Result<Json<QueryPage>, HttpError> {
    Ok(Json(blocking(move || st.sched.query(kind, &filter)).await?))
}

async fn jobs(State(st): State<AppState>, Query(f): Query<QueryFilter>) -> Result<Json<QueryPage>, HttpError> {
    query(st, QueryKind::Jobs, f).await
}

async fn machines(State(st): State<AppState>, Query(f): Query<QueryFilter>) -> Result<Json<QueryPage>, HttpError> {
    query(st, QueryKind::Machines, f).await
}

async fn history(State(st): State<AppState>, Query(f): Query<QueryFilter>) -> Result<Json<QueryPage>, HttpError> {
    query(st, QueryKind::History, f).await
}

async fn heartbeat(
    State(st): State<AppState>,
    Json(report): Json<HeartbeatReport>,
) -> Result<Json<HeartbeatResponse>, HttpError> {
    let resp = blocking(move || {
        let started = Instant::now();
        let t_us = SystemClock.now().0;
        let resp = st.sched.handle_heartbeat(&report);
        let latency_us = started.elapsed().as_micros() as u64;
        record(&st.samples, ServerSample::Heartbeat { t_us, latency_us });
        resp
    })
    .await?;
    Ok(Json(resp))
}

async fn accept_match(
    State(st): State<AppState>,
    Json(req): Json<AcceptRequest>,
) -> Result<Json<AcceptResponse>, HttpError> {
    let status = blocking(move || st.sched.accept_match(req.job_id, &req.vm_id)).await?;
    Ok(Json(AcceptResponse { status }))
}

async fn stats(State(st): State<AppState>) -> Json<ServerStats> {
    use std::sync::atomic::Ordering::Relaxed;
    let s = st.sched.stats();
    Json(ServerStats {
        now_us: st.sched.now().0,
        heartbeats: s.heartbeats.load(Relaxed),
        matches_created: s.matches_created.load(Relaxed),
        passes: s.passes.load(Relaxed),
        drops: s.drops.load(Relaxed),
        expired_matches: s.expired_matches.load(Relaxed),
        txns: st.sched.store().txn_count(),
        accounting: st.sched.accounting(),
    })
}

/// Heartbeat latencies and commit times on the service clock.
async fn samples(State(st): State<AppState>) -> Json<Vec<ServerSample>> {
    Json(st.samples.lock().unwrap().iter().copied().collect())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/jobs", post(submit).get(jobs))
        .route("/v1/jobs/{id}", delete(remove))
        .route("/v1/machines", get(machines))
        .route("/v1/history", get(history))
        .route("/v1/heartbeat", post(heartbeat))
        .route("/v1/accept-match", post(accept_match))
        .route("/v1/stats", get(stats))
        .route("/v1/samples", get(samples))
        .with_state(state)
}

/// Runs expiry and a scheduling pass every schedule period.
pub fn spawn_ticker(sched: Arc<Scheduler>) -> tokio::task::JoinHandle<()> {
    let period = Duration::from_secs_f64(sched.config().schedule_period());
    tokio::spawn(async move {
        let mut timer = tokio::time::interval(period);
        timer.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            timer.tick().await;
            let s = Arc::clone(&sched);
            match tokio::task::spawn_blocking(move || s.tick()).await {
                Ok(Ok(_)) => {}
                Ok(Err(e)) => error!(error = %e, "scheduler tick failed"),
                Err(e) => error!(error = %e, "scheduler tick panicked"),
            }
        }
    })
}

/// Serves until `shutdown` resolves, then flushes the journal.
pub async fn serve(
    state: AppState,
    listener: TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let addr: SocketAddr = listener.local_addr()?;
    let sched = Arc::clone(&state.sched);
    let ticker = spawn_ticker(Arc::clone(&sched));
    info!(event = "listening", addr = %addr, "scheduler service up");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    ticker.abort();
    tokio::task::spawn_blocking(move || sched.store().sync()).await??;
    info!(event = "shutdown", "scheduler service stopped");
    Ok(())
}
