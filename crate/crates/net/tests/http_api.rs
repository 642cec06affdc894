mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use pullsched_core::agent::{exchange, AgentConfig, AgentEvent, ApiError, NodeAgent, SchedulerApi};
use pullsched_core::clock::{Clock, SystemClock};
use pullsched_core::model::{AcceptStatus, HeartbeatReport, HeartbeatResponse, HistoryKind, JobId, VmId};
use pullsched_core::service::{QueryFilter, QueryKind, QueryRows, ServiceConfig, SubmitRequest};
use pullsched_net::agentd::{run_agent, Command};
use pullsched_net::client::SchedulerClient;

use common::{fast_config, wait_until, TestServer};

fn client(url: &str) -> SchedulerClient {
    SchedulerClient::new(url, Duration::from_secs(5)).unwrap()
}

fn agent(host: &str, vms: u32) -> NodeAgent {
    let config = AgentConfig { host_id: host.into(), vm_count: vms, time_scale: 60.0, ..Default::default() };
    NodeAgent::new(config, 1).unwrap()
}

fn history_kinds(c: &SchedulerClient, job: u64) -> Vec<HistoryKind> {
    let page = c.query(QueryKind::History, &QueryFilter { job_id: Some(job), ..Default::default() }).unwrap();
    let QueryRows::History(rows) = page.rows else { panic!("history rows expected") };
    rows.iter().map(|h| h.kind).collect()
}

#[test]
fn submit_query_and_errors_over_http() {
    let server = TestServer::start(fast_config());
    let c = client(&server.url);
    let mut req = SubmitRequest::new("alice", 30.0, 2);
    req.token = Some("t1".into());
    let ids = c.submit(&req).unwrap();
    assert_eq!(ids, vec![JobId(1), JobId(2)]);
    assert_eq!(c.submit(&req).unwrap(), ids, "same token returns the original ids");

    let idle = QueryFilter { state: Some("IDLE".into()), owner: Some("alice".into()), ..Default::default() };
    assert_eq!(c.query(QueryKind::Jobs, &idle).unwrap().total, 2);
    let page = c.query(QueryKind::Jobs, &QueryFilter { limit: Some(1), offset: Some(1), ..Default::default() }).unwrap();
    assert_eq!((page.total, page.rows.len()), (2, 1));

    let bad = QueryFilter { state: Some("SLEEPING".into()), ..Default::default() };
    assert!(c.query(QueryKind::Jobs, &bad).unwrap_err().0.starts_with("400"));
    let mut invalid = SubmitRequest::new("alice", 30.0, 1);
    invalid.requirements = "machine.cpus >".into();
    assert!(c.submit(&invalid).unwrap_err().0.starts_with("400"));
    assert!(c.remove(JobId(99)).unwrap_err().0.starts_with("404"));

    c.remove(JobId(2)).unwrap();
    assert!(c.remove(JobId(2)).unwrap_err().0.starts_with("409"));
    assert_eq!(history_kinds(&c, 2), vec![HistoryKind::Submitted, HistoryKind::Removed]);
}

#[test]
fn heartbeat_protocol_runs_a_job_over_http() {
    let server = TestServer::start(fast_config());
    let c = client(&server.url);
    let mut a = agent("node1", 1);
    exchange(&mut a, &c, SystemClock.now()).unwrap();
    let machines = c.query(QueryKind::Machines, &QueryFilter::default()).unwrap();
    assert_eq!(machines.total, 1);
    c.submit(&SubmitRequest::new("bob", 6.0, 1)).unwrap();
    // the timer pass matches the job; the next report picks it up
    assert!(wait_until(Duration::from_secs(5), || {
        c.query(QueryKind::Jobs, &QueryFilter { state: Some("MATCHED".into()), ..Default::default() }).unwrap().total == 1
    }));
    let events = exchange(&mut a, &c, SystemClock.now()).unwrap();
    let Some(AgentEvent::Started { ends_at, .. }) = events.first() else { panic!("expected a start, got {events:?}") };
    std::thread::sleep(Duration::from_micros((ends_at.0 - SystemClock.now().0).max(0) as u64));
    a.finish_due(SystemClock.now());
    exchange(&mut a, &c, SystemClock.now()).unwrap();
    assert_eq!(
        history_kinds(&c, 1),
        vec![HistoryKind::Submitted, HistoryKind::Matched, HistoryKind::Started, HistoryKind::Completed]
    );
    assert_eq!(c.accept_match(JobId(1), &VmId::new("node1", 0)).unwrap(), AcceptStatus::Stale);
    let stats = c.stats().unwrap();
    assert!(stats.accounting.conserved());
    assert_eq!(stats.accounting.completed, 1);
    assert!(c.samples().unwrap().len() >= 3);
}

/// Fails heartbeats while `down` is set, as if the server were unreachable.
struct Outage<'a> {
    inner: &'a SchedulerClient,
    down: &'a AtomicBool,
}

impl SchedulerApi for Outage<'_> {
    fn heartbeat(&self, report: &HeartbeatReport) -> Result<HeartbeatResponse, ApiError> {
        if self.down.load(Ordering::SeqCst) {
            return Err(ApiError("connection refused".into()));
        }
        self.inner.heartbeat(report)
    }

    fn accept_match(&self, job_id: JobId, vm_id: &VmId) -> Result<AcceptStatus, ApiError> {
        self.inner.accept_match(job_id, vm_id)
    }
}

#[test]
fn daemon_delivers_completions_once_across_an_outage_and_stops_on_command() {
    // the outage must not look like a dead node
    let server = TestServer::start(ServiceConfig { dead_node_intervals: 6, ..fast_config() });
    let c = client(&server.url);
    let down = AtomicBool::new(false);
    let api = Outage { inner: &c, down: &down };
    let (tx, rx) = mpsc::channel();
    let stop = tx.clone();
    std::thread::scope(|s| {
        let daemon = s.spawn(|| run_agent(agent("node1", 2), &api, rx, tx));
        assert!(wait_until(Duration::from_secs(5), || {
            c.query(QueryKind::Machines, &QueryFilter::default()).unwrap().total == 2
        }));
        // two 30 s jobs: half a second of real time each
        c.submit(&SubmitRequest::new("carol", 30.0, 2)).unwrap();
        assert!(wait_until(Duration::from_secs(5), || c.stats().unwrap().accounting.running == 2));
        down.store(true, Ordering::SeqCst);
        // the jobs finish while the server is unreachable for two intervals
        std::thread::sleep(Duration::from_millis(2000));
        assert_eq!(c.stats().unwrap().accounting.completed, 0);
        down.store(false, Ordering::SeqCst);
        assert!(wait_until(Duration::from_secs(5), || c.stats().unwrap().accounting.completed == 2));
        stop.send(Command::Shutdown).unwrap();
        let counters = daemon.join().unwrap();
        assert_eq!((counters.accepted, counters.completed), (2, 2));
    });
    let heartbeats = c.stats().unwrap().heartbeats;
    std::thread::sleep(Duration::from_millis(1500));
    assert_eq!(c.stats().unwrap().heartbeats, heartbeats, "no requests after shutdown");
    let mut completions: BTreeMap<u64, usize> = BTreeMap::new();
    for job in [1, 2] {
        completions.insert(job, history_kinds(&c, job).iter().filter(|k| **k == HistoryKind::Completed).count());
    }
    assert_eq!(completions, BTreeMap::from([(1, 1), (2, 1)]));
    assert_eq!(c.stats().unwrap().drops, 0);
}
