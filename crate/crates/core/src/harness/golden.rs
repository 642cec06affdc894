//! The single-job, single-slot protocol walk, rendered as an ordered
//! transaction log for comparison against a checked-in golden file.

use std::sync::{Arc, Mutex};

use crate::agent::{AgentConfig, AgentEvent, NodeAgent, SchedulerApi};
use crate::clock::{Clock, VirtualClock};
use crate::model::{Action, HeartbeatResponse, Timestamp};
use crate::service::{Scheduler, ServiceConfig, ServiceError, SubmitRequest};
use crate::store::{Store, StoreOptions, Tuple, TupleOp};

fn render_ops(ops: &[TupleOp]) -> String {
    ops.iter()
        .map(|op| match &op.value {
            Some(Tuple::History(h)) => format!("{op} {}", serde_json::to_value(h.kind).expect("kind").as_str().unwrap_or("?")),
            _ => op.to_string(),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn render_response(resp: &HeartbeatResponse) -> String {
    let actions: Vec<&str> = resp
        .directives
        .iter()
        .map(|d| match d.action {
            Action::None => "NONE",
            Action::Matchinfo => "MATCHINFO",
            Action::Release => "RELEASE",
        })
        .collect();
    actions.join(",")
}

struct Trace {
    txns: Arc<Mutex<Vec<String>>>,
    lines: Vec<String>,
}

impl Trace {
    fn step(&mut self, label: &str, outcome: Option<String>) {
        let txns = std::mem::take(&mut *self.txns.lock().unwrap());
        let suffix = outcome.map(|o| format!(" -> {o}")).unwrap_or_default();
        if txns.is_empty() {
            self.lines.push(format!("{label}: (no transaction){suffix}"));
            return;
        }
        let n = txns.len();
        for (i, t) in txns.into_iter().enumerate() {
            let tail = if i + 1 == n { suffix.as_str() } else { "" };
            self.lines.push(format!("{label}: {t}{tail}"));
        }
    }
}

/// Submits one job to a one-slot cluster and walks it to completion through
/// the node agent, returning one line per committed transaction.
pub fn protocol_trace() -> Result<Vec<String>, ServiceError> {
    let clock = VirtualClock::new(Timestamp::from_secs_f64(1000.0));
    let store = Arc::new(Store::in_memory(StoreOptions { verify_full: true, ..Default::default() }));
    let txns = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&txns);
    store.set_observer(Some(Box::new(move |_, ops| sink.lock().unwrap().push(render_ops(ops)))));
    let sched = Scheduler::new(store, Arc::new(clock.clone()), ServiceConfig::default())?;
    let mut agent = NodeAgent::new(AgentConfig { host_id: "node1".into(), vm_count: 1, ..Default::default() }, 1)
        .map_err(ServiceError::Validation)?;
    let mut trace = Trace { txns, lines: Vec::new() };
    let api: &dyn SchedulerApi = &sched;

    let ids = sched.submit_job(&SubmitRequest::new("alice", 60.0, 1))?;
    trace.step("submit", Some(format!("job_ids {:?}", ids.iter().map(|j| j.0).collect::<Vec<_>>())));

    let mut heartbeat = |trace: &mut Trace, label: &str| -> Result<Vec<AgentEvent>, ServiceError> {
        let now = clock.now();
        agent.finish_due(now);
        let report = agent.build_report();
        let resp = api.heartbeat(&report).map_err(|e| ServiceError::Validation(e.0))?;
        trace.step(label, Some(render_response(&resp)));
        let events = agent.apply_response(&resp, api, now);
        Ok(events)
    };

    heartbeat(&mut trace, "heartbeat")?;
    clock.advance_secs(1.0);
    sched.scheduling_pass(clock.now())?;
    trace.step("schedule", None);
    clock.advance_secs(59.0);
    let events = heartbeat(&mut trace, "heartbeat")?;
    let accepted = events.iter().any(|e| matches!(e, AgentEvent::Started { .. }));
    trace.step("accept-match", Some(if accepted { "OK".into() } else { "STALE".into() }));
    clock.advance_secs(30.0);
    heartbeat(&mut trace, "heartbeat")?;
    clock.advance_secs(30.0);
    heartbeat(&mut trace, "heartbeat")?;
    Ok(trace.lines)
}
