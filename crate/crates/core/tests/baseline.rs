use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use pullsched_core::agent::ApiError;
use pullsched_core::baseline::*;
use pullsched_core::clock::{Clock, VirtualClock};
use pullsched_core::model::*;
use pullsched_core::service::SubmitRequest;
use pullsched_core::store::{Store, StoreOptions};

/// Agents that accept every claim unless the slot is listed as refusing.
#[derive(Default)]
struct Slots {
    refuse: Vec<VmId>,
    running: BTreeMap<VmId, JobId>,
}

impl ClaimApi for Slots {
    fn claim(&mut self, vm_id: &VmId, job: &JobDescriptor) -> Result<bool, ApiError> {
        if self.refuse.contains(vm_id) {
            return Ok(false);
        }
        self.running.insert(vm_id.clone(), job.job_id);
        Ok(true)
    }
}

fn baseline(config: BaselineConfig, slots: u32) -> (VirtualClock, Baseline) {
    let clock = VirtualClock::new(Timestamp::from_secs_f64(100.0));
    let store = Arc::new(Store::in_memory(StoreOptions { verify_full: true, ..Default::default() }));
    let mut b = Baseline::new(config, store, Arc::new(clock.clone())).unwrap();
    for i in 0..slots {
        b.register_slot(VmId::new("h", i), Attributes::new()).unwrap();
    }
    (clock, b)
}

fn run_ticks(clock: &VirtualClock, b: &mut Baseline, agents: &mut Slots, ticks: u32) -> Vec<StartEvent> {
    let mut all = Vec::new();
    for _ in 0..ticks {
        all.extend(b.schedd_tick(clock.now(), agents).unwrap());
        clock.advance_secs(1.0);
    }
    all
}

#[test]
fn half_a_start_per_tick() {
    let (clock, mut b) = baseline(BaselineConfig { throttle: 0.5, ..Default::default() }, 10);
    b.submit(&SubmitRequest::new("u", 600.0, 10)).unwrap();
    let mut agents = Slots::default();
    assert!(b.schedd_tick(clock.now(), &mut agents).unwrap().is_empty());
    clock.advance_secs(1.0);
    assert_eq!(b.schedd_tick(clock.now(), &mut agents).unwrap().len(), 1);
}

#[test]
fn steady_rate_matches_throttle() {
    let (clock, mut b) = baseline(BaselineConfig { throttle: 2.0, ..Default::default() }, 100);
    b.submit(&SubmitRequest::new("u", 6000.0, 10)).unwrap();
    let mut agents = Slots::default();
    let starts = run_ticks(&clock, &mut b, &mut agents, 5);
    assert_eq!(starts.len(), 10);
    assert_eq!(b.shadow_count(), 10);
}

#[test]
fn refused_claim_keeps_job_idle_and_budget() {
    let (clock, mut b) = baseline(BaselineConfig { throttle: 1.0, ..Default::default() }, 2);
    let id = b.submit(&SubmitRequest::new("u", 60.0, 1)).unwrap()[0];
    let mut agents = Slots { refuse: vec![VmId::new("h", 0)], ..Default::default() };
    let started = b.schedd_tick(clock.now(), &mut agents).unwrap();
    assert_eq!(started, vec![StartEvent { job_id: id, at: clock.now() }]);
    assert_eq!(agents.running.get(&VmId::new("h", 1)), Some(&id));
    assert_eq!(b.counters().refused_claims, 1);
}

#[test]
fn completion_frees_slot_and_is_idempotent() {
    let (clock, mut b) = baseline(BaselineConfig { throttle: 1.0, ..Default::default() }, 1);
    let ids = b.submit(&SubmitRequest::new("u", 60.0, 2)).unwrap();
    let mut agents = Slots::default();
    run_ticks(&clock, &mut b, &mut agents, 3);
    assert_eq!(b.counters().starts, 1);
    assert!(b.handle_completion(ids[0], 0).unwrap());
    assert!(!b.handle_completion(ids[0], 0).unwrap());
    run_ticks(&clock, &mut b, &mut agents, 1);
    assert_eq!(b.counters().starts, 2);
    assert_eq!(b.queue_len(), 1);
    let completed = b.store().read(|s| s.completed_count());
    assert_eq!(completed, 1);
}

#[test]
fn index_mode_starts_same_jobs_as_scan() {
    let order = |scan_queue| {
        let (clock, mut b) = baseline(BaselineConfig { throttle: 3.0, scan_queue, ..Default::default() }, 50);
        b.submit(&SubmitRequest::new("u", 600.0, 40)).unwrap();
        let mut agents = Slots::default();
        run_ticks(&clock, &mut b, &mut agents, 6).into_iter().map(|s| s.job_id).collect::<Vec<_>>()
    };
    assert_eq!(order(true), order(false));
}

#[test]
fn compaction_checkpoints_and_recovers() {
    let dir = tempfile::tempdir().unwrap();
    let clock = VirtualClock::new(Timestamp::from_secs_f64(100.0));
    let config = BaselineConfig { throttle: 5.0, compact_every: 3, ..Default::default() };
    {
        let store = Arc::new(Store::open(dir.path(), StoreOptions::default()).unwrap());
        let mut b = Baseline::new(config.clone(), store, Arc::new(clock.clone())).unwrap();
        for i in 0..5 {
            b.register_slot(VmId::new("h", i), Attributes::new()).unwrap();
        }
        let ids = b.submit(&SubmitRequest::new("u", 60.0, 12)).unwrap();
        let mut agents = Slots::default();
        run_ticks(&clock, &mut b, &mut agents, 1);
        for id in &ids[..4] {
            b.handle_completion(*id, 0).unwrap();
        }
        run_ticks(&clock, &mut b, &mut agents, 1);
        assert_eq!(b.counters().compactions, 1);
    }
    let store = Arc::new(Store::open(dir.path(), StoreOptions::default()).unwrap());
    let b = Baseline::new(config, store, Arc::new(clock.clone())).unwrap();
    // Every unfinished job is back in the queue; nothing was lost.
    assert_eq!(b.queue_len(), 8);
    assert_eq!(b.running_count(), 0);
    let (submitted, completed, jobs) =
        b.store().read(|s| (s.submitted_count(), s.completed_count(), s.tables().jobs.len() as u64));
    assert_eq!(submitted, completed + jobs);
}

/// Start times from ticks spaced at least one nominal tick apart, with slot
/// and queue limits that sometimes leave budget unused.
fn simulate(rate: f64, gaps: &[f64], caps: &[u8]) -> Vec<f64> {
    let mut t = ThrottleState::new(rate, 1.0, 10.0);
    let mut now = 0.0;
    let mut starts = Vec::new();
    for (gap, cap) in gaps.iter().zip(caps) {
        now += gap;
        t.accrue(Timestamp::from_secs_f64(now));
        let mut n = 0;
        while t.available() > 0 && n < *cap {
            t.consume();
            starts.push(now);
            n += 1;
        }
        t.end_tick();
    }
    starts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn starts_never_exceed_throttle_in_any_window(
        rate in 0.1f64..5.0,
        gaps in prop::collection::vec(1.0f64..3.0, 1..200),
        caps in prop::collection::vec(0u8..8, 200),
    ) {
        let starts = simulate(rate, &gaps, &caps);
        let limit = (rate * 10.0).floor() as usize;
        for (i, s) in starts.iter().enumerate() {
            let in_window = starts[i..].iter().take_while(|t| **t < s + 10.0).count();
            prop_assert!(in_window <= limit.max(1), "{} starts in 10 s at rate {}", in_window, rate);
        }
    }

    #[test]
    fn unlimited_demand_reaches_rate(tenths in 2u32..50, ticks in 50usize..200) {
        let rate = f64::from(tenths) / 10.0;
        let gaps = vec![1.0; ticks];
        let caps = vec![u8::MAX; ticks];
        let starts = simulate(rate, &gaps, &caps).len() as f64;
        prop_assert!((starts - rate * ticks as f64).abs() <= 1.0 + 1e-9);
    }
}
