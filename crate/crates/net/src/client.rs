//! Client side of the scheduler's wire protocol.

use std::time::Duration;

use pullsched_core::agent::{ApiError, SchedulerApi};
use pullsched_core::harness::ServerSample;
use pullsched_core::model::{AcceptStatus, HeartbeatReport, HeartbeatResponse, JobId, VmId};
use pullsched_core::service::{QueryFilter, QueryKind, QueryPage, SubmitRequest};

use crate::http::JsonClient;
use crate::server::{AcceptRequest, AcceptResponse, RemoveResponse, ServerStats, SubmitResponse};

#[derive(Debug, Clone)]
pub struct SchedulerClient {
    http: JsonClient,
}

impl SchedulerClient {
    pub fn new(base: &str, timeout: Duration) -> Result<Self, ApiError> {
        Ok(SchedulerClient { http: JsonClient::new(base, timeout)? })
    }

    pub fn submit(&self, req: &SubmitRequest) -> Result<Vec<JobId>, ApiError> {
        self.http.post::<_, SubmitResponse>("/v1/jobs", req).map(|r| r.job_ids)
    }

    pub fn remove(&self, job_id: JobId) -> Result<(), ApiError> {
        self.http.delete::<RemoveResponse>(&format!("/v1/jobs/{}", job_id.0)).map(drop)
    }

    pub fn query(&self, kind: QueryKind, filter: &QueryFilter) -> Result<QueryPage, ApiError> {
        let path = match kind {
            QueryKind::Jobs => "/v1/jobs",
            QueryKind::Machines => "/v1/machines",
            QueryKind::History => "/v1/history",
        };
        self.http.get_query(path, filter)
    }

    pub fn stats(&self) -> Result<ServerStats, ApiError> {
        self.http.get("/v1/stats")
    }

    pub fn samples(&self) -> Result<Vec<ServerSample>, ApiError> {
        self.http.get("/v1/samples")
    }
}

impl SchedulerApi for SchedulerClient {
    fn heartbeat(&self, report: &HeartbeatReport) -> Result<HeartbeatResponse, ApiError> {
        self.http.post("/v1/heartbeat", report)
    }

    fn accept_match(&self, job_id: JobId, vm_id: &VmId) -> Result<AcceptStatus, ApiError> {
        let req = AcceptRequest { job_id, vm_id: vm_id.clone() };
        self.http.post::<_, AcceptResponse>("/v1/accept-match", &req).map(|r| r.status)
    }
}
