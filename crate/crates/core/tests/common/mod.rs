//! Independent oracles and random generators shared by the property suites
//! and the acceptance runner.
#![allow(dead_code)]

use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pullsched_core::agent::{exchange, AgentConfig, ApiError, NodeAgent};
use pullsched_core::baseline::{Baseline, BaselineConfig, ClaimApi, THROTTLE_WINDOW_S};
use pullsched_core::harness::sweep::window_violations;
use pullsched_core::clock::{Clock, VirtualClock};
use pullsched_core::matchmaker::{
    evaluate, parse_expression, BinaryOp, EvalValue, Expression, Literal, Scope, UnaryOp, MACHINE_REQUIREMENTS_ATTR,
};
use pullsched_core::model::{AttrValue, Attributes, JobDescriptor, JobId, JobRecord, MachineRecord, Timestamp, VmId};
use pullsched_core::service::{Scheduler, ServiceConfig, SubmitRequest};
use pullsched_core::store::{recover, Durability, Store, StoreOptions, TupleOp};

// ---------------------------------------------------------------------------
// Expression oracle

#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    I(i64),
    R(f64),
    B(bool),
    S(String),
    U,
}

impl Truth {
    fn from_attr(v: Option<&AttrValue>) -> Truth {
        match v {
            None => Truth::U,
            Some(AttrValue::Int(i)) => Truth::I(*i),
            Some(AttrValue::Real(r)) if r.is_finite() => Truth::R(*r),
            Some(AttrValue::Real(_)) => Truth::U,
            Some(AttrValue::Bool(b)) => Truth::B(*b),
            Some(AttrValue::Str(s)) => Truth::S(s.clone()),
        }
    }

    fn num(&self) -> Option<f64> {
        match self {
            Truth::I(i) => Some(*i as f64),
            Truth::R(r) => Some(*r),
            _ => None,
        }
    }

    pub fn agrees(&self, v: &EvalValue) -> bool {
        match (self, v) {
            (Truth::I(a), EvalValue::Int(b)) => a == b,
            (Truth::R(a), EvalValue::Real(b)) => a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0),
            (Truth::B(a), EvalValue::Bool(b)) => a == b,
            (Truth::S(a), EvalValue::Str(b)) => a == b,
            (Truth::U, EvalValue::Undefined) => true,
            _ => false,
        }
    }
}

fn finite(r: f64) -> Truth {
    if r.is_finite() {
        Truth::R(r)
    } else {
        Truth::U
    }
}

fn int_or_undef(v: i128) -> Truth {
    i64::try_from(v).map_or(Truth::U, Truth::I)
}

/// Straightforward tree walk over the documented semantics, written without
/// reference to the production evaluator.
pub fn oracle(e: &Expression, job: &Attributes, machine: &Attributes) -> Truth {
    match e {
        Expression::Literal(Literal::Int(i)) => Truth::I(*i),
        Expression::Literal(Literal::Real(r)) => finite(*r),
        Expression::Literal(Literal::Bool(b)) => Truth::B(*b),
        Expression::Literal(Literal::Str(s)) => Truth::S(s.clone()),
        Expression::Attr(Scope::Job, n) => Truth::from_attr(job.get(n)),
        Expression::Attr(Scope::Machine, n) => Truth::from_attr(machine.get(n)),
        Expression::Unary(UnaryOp::Not, x) => match oracle(x, job, machine) {
            Truth::B(b) => Truth::B(!b),
            _ => Truth::U,
        },
        Expression::Unary(UnaryOp::Neg, x) => match oracle(x, job, machine) {
            Truth::I(i) => int_or_undef(-(i as i128)),
            Truth::R(r) => finite(-r),
            _ => Truth::U,
        },
        Expression::Binary(op, l, r) => {
            let (a, b) = (oracle(l, job, machine), oracle(r, job, machine));
            binary(*op, a, b)
        }
    }
}

fn binary(op: BinaryOp, a: Truth, b: Truth) -> Truth {
    use BinaryOp::*;
    match op {
        And => match (a, b) {
            (Truth::B(false), _) | (_, Truth::B(false)) => Truth::B(false),
            (Truth::B(true), Truth::B(true)) => Truth::B(true),
            _ => Truth::U,
        },
        Or => match (a, b) {
            (Truth::B(true), _) | (_, Truth::B(true)) => Truth::B(true),
            (Truth::B(false), Truth::B(false)) => Truth::B(false),
            _ => Truth::U,
        },
        Add | Sub | Mul | Div => match (a, b) {
            (Truth::I(x), Truth::I(y)) => {
                let (x, y) = (x as i128, y as i128);
                match op {
                    Add => int_or_undef(x + y),
                    Sub => int_or_undef(x - y),
                    Mul => int_or_undef(x * y),
                    _ if y == 0 => Truth::U,
                    _ => int_or_undef(x / y),
                }
            }
            (a, b) => match (a.num(), b.num()) {
                (Some(x), Some(y)) => match op {
                    Add => finite(x + y),
                    Sub => finite(x - y),
                    Mul => finite(x * y),
                    _ if y == 0.0 => Truth::U,
                    _ => finite(x / y),
                },
                _ => Truth::U,
            },
        },
        Eq | Ne => {
            let same = match (&a, &b) {
                (Truth::I(x), Truth::I(y)) => Some(x == y),
                (Truth::S(x), Truth::S(y)) => Some(x == y),
                (Truth::B(x), Truth::B(y)) => Some(x == y),
                _ => match (a.num(), b.num()) {
                    (Some(x), Some(y)) => Some(x == y),
                    _ => None,
                },
            };
            match same {
                Some(s) => Truth::B(if op == Eq { s } else { !s }),
                None => Truth::U,
            }
        }
        Lt | Le | Gt | Ge => {
            let ord = match (&a, &b) {
                (Truth::I(x), Truth::I(y)) => Some(x.cmp(y)),
                _ => match (a.num(), b.num()) {
                    (Some(x), Some(y)) => x.partial_cmp(&y),
                    _ => None,
                },
            };
            match ord {
                None => Truth::U,
                Some(o) => Truth::B(match op {
                    Lt => o.is_lt(),
                    Le => o.is_le(),
                    Gt => o.is_gt(),
                    _ => o.is_ge(),
                }),
            }
        }
    }
}

const NAMES: [&str; 5] = ["cpus", "memory_mb", "arch", "ok", "load"];
const OPS: [BinaryOp; 12] = [
    BinaryOp::Or,
    BinaryOp::And,
    BinaryOp::Eq,
    BinaryOp::Ne,
    BinaryOp::Lt,
    BinaryOp::Le,
    BinaryOp::Gt,
    BinaryOp::Ge,
    BinaryOp::Add,
    BinaryOp::Sub,
    BinaryOp::Mul,
    BinaryOp::Div,
];

fn random_int(rng: &mut impl Rng) -> i64 {
    match rng.gen_range(0..10) {
        0 => i64::MAX,
        1 => i64::MIN,
        2 => 0,
        3 => rng.gen_range(i64::MIN / 2..i64::MAX / 2),
        _ => rng.gen_range(-4..16),
    }
}

fn random_real(rng: &mut impl Rng) -> f64 {
    match rng.gen_range(0..6) {
        0 => 0.0,
        1 => 1e308,
        2 => -2.5,
        _ => rng.gen_range(-8.0..8.0),
    }
}

fn random_str(rng: &mut impl Rng) -> String {
    ["x86_64", "arm", "", "linux"].choose(rng).unwrap().to_string()
}

pub fn random_value(rng: &mut impl Rng) -> AttrValue {
    match rng.gen_range(0..4) {
        0 => AttrValue::Int(random_int(rng)),
        1 => AttrValue::Real(random_real(rng)),
        2 => AttrValue::Bool(rng.gen()),
        _ => AttrValue::Str(random_str(rng)),
    }
}

pub fn random_attrs(rng: &mut impl Rng) -> Attributes {
    let mut out = Attributes::new();
    for n in NAMES {
        if rng.gen_bool(0.7) {
            out.insert(n.to_string(), random_value(rng));
        }
    }
    out
}

/// A random expression of depth at most `depth`.
pub fn random_expression(rng: &mut impl Rng, depth: usize) -> Expression {
    if depth <= 1 || rng.gen_bool(0.25) {
        return match rng.gen_range(0..6) {
            0 => Expression::Literal(Literal::Int(random_int(rng))),
            1 => Expression::Literal(Literal::Real(random_real(rng))),
            2 => Expression::Literal(Literal::Bool(rng.gen())),
            3 => Expression::Literal(Literal::Str(random_str(rng))),
            4 => Expression::Attr(Scope::Job, NAMES.choose(rng).unwrap().to_string()),
            _ => Expression::Attr(Scope::Machine, NAMES.choose(rng).unwrap().to_string()),
        };
    }
    if rng.gen_bool(0.15) {
        let op = if rng.gen() { UnaryOp::Not } else { UnaryOp::Neg };
        return Expression::Unary(op, Box::new(random_expression(rng, depth - 1)));
    }
    let op = *OPS.choose(rng).unwrap();
    Expression::Binary(op, Box::new(random_expression(rng, depth - 1)), Box::new(random_expression(rng, depth - 1)))
}

#[derive(Debug, Default)]
pub struct ExpressionCheck {
    pub cases: u64,
    pub mismatches: u64,
    pub reparse_failures: u64,
    pub first_failure: Option<String>,
}

/// Evaluates `cases` random expressions (depth <= 6) against random attribute
/// maps with both the evaluator and the oracle. The printed form of each
/// expression must also parse back to the same tree.
pub fn check_expressions(cases: u64, seed: u64) -> ExpressionCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ExpressionCheck::default();
    for _ in 0..cases {
        let e = random_expression(&mut rng, 6);
        let (job, machine) = (random_attrs(&mut rng), random_attrs(&mut rng));
        out.cases += 1;
        let got = evaluate(&e, &job, &machine);
        let want = oracle(&e, &job, &machine);
        if !want.agrees(&got) {
            out.mismatches += 1;
            out.first_failure.get_or_insert_with(|| format!("{e}: evaluator {got:?}, oracle {want:?}"));
        }
        match parse_expression(&e.to_string()) {
            Ok(back) if oracle(&back, &job, &machine) == want => {}
            _ => {
                out.reparse_failures += 1;
                out.first_failure.get_or_insert_with(|| format!("{e}: printed form does not round-trip"));
            }
        }
    }
    out
}

/// Reference FIFO matcher: jobs by (submit_time, job_id), each takes the
/// eligible unused machine of highest rank, ties to the smallest vm_id.
pub fn oracle_matches(jobs: &[JobRecord], machines: &[MachineRecord]) -> Vec<(JobId, VmId)> {
    let mut jobs: Vec<&JobRecord> = jobs.iter().collect();
    jobs.sort_by_key(|j| (j.submit_time, j.job_id));
    let mut machines: Vec<&MachineRecord> = machines.iter().collect();
    machines.sort_by(|a, b| a.vm_id.cmp(&b.vm_id));
    let mut used = vec![false; machines.len()];
    let mut out = Vec::new();
    for j in jobs {
        let mut best: Option<(usize, f64)> = None;
        for (i, m) in machines.iter().enumerate() {
            if used[i] || oracle(&j.requirements, &j.attributes, &m.attributes) != Truth::B(true) {
                continue;
            }
            let owner_ok = match m.attributes.get(MACHINE_REQUIREMENTS_ATTR) {
                None | Some(AttrValue::Bool(true)) => true,
                Some(AttrValue::Str(text)) => parse_expression(text)
                    .map(|req| oracle(&req, &j.attributes, &m.attributes) == Truth::B(true))
                    .unwrap_or(false),
                Some(_) => false,
            };
            if !owner_ok {
                continue;
            }
            let rank = match &j.rank {
                None => 0.0,
                Some(r) => oracle(r, &j.attributes, &m.attributes).num().unwrap_or(0.0),
            };
            if best.is_none_or(|(_, b)| rank > b) {
                best = Some((i, rank));
            }
        }
        if let Some((i, _)) = best {
            used[i] = true;
            out.push((j.job_id, machines[i].vm_id.clone()));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Store histories

#[derive(Debug, Default)]
pub struct HistoryCheck {
    pub histories: u64,
    pub transactions: u64,
    pub checkpoints: u64,
    pub mismatches: u64,
    pub first_failure: Option<String>,
}

/// Drives a scheduler with random submits, removals, heartbeats from faulty
/// agents, passes and expiry on a journaled store that checkpoints at random
/// points, mirrors every committed transaction into a second journal that
/// never checkpoints, and checks that snapshot-plus-replay, pure replay and
/// the live state agree.
pub fn check_store_histories(histories: u64, seed: u64) -> HistoryCheck {
    let mut out = HistoryCheck::default();
    for h in 0..histories {
        out.histories += 1;
        match one_history(seed.wrapping_add(h), &mut out) {
            Ok(None) => {}
            Ok(Some(msg)) | Err(msg) => {
                out.mismatches += 1;
                out.first_failure.get_or_insert(format!("history {h}: {msg}"));
            }
        }
    }
    out
}

fn one_history(seed: u64, out: &mut HistoryCheck) -> Result<Option<String>, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snapped_dir = tempfile::tempdir().map_err(|e| err(&e))?;
    let replay_dir = tempfile::tempdir().map_err(|e| err(&e))?;
    let options = StoreOptions { durability: Durability::Batched(Duration::from_secs(3600)), verify_full: false };
    let snapped = Arc::new(Store::open(snapped_dir.path(), options.clone()).map_err(|e| err(&e))?);
    let replay = Store::open(replay_dir.path(), options.clone()).map_err(|e| err(&e))?;
    let pending: Arc<Mutex<Vec<Vec<TupleOp>>>> = Arc::default();
    let sink = Arc::clone(&pending);
    snapped.set_observer(Some(Box::new(move |_, ops| sink.lock().unwrap().push(ops.to_vec()))));

    let clock = VirtualClock::new(Timestamp::from_secs_f64(1000.0));
    let sched = Scheduler::new(Arc::clone(&snapped), Arc::new(clock.clone()), ServiceConfig::default())
        .map_err(|e| err(&e))?;
    let hosts = rng.gen_range(1..=3);
    let mut agents: Vec<NodeAgent> = (0..hosts)
        .map(|i| {
            let config = AgentConfig {
                host_id: format!("h{i}"),
                vm_count: rng.gen_range(1..=3),
                fault_rate: rng.gen_range(0.0..0.4),
                seed,
                ..Default::default()
            };
            NodeAgent::new(config, 1).expect("agent config")
        })
        .collect();
    let mut live_jobs: Vec<JobId> = Vec::new();
    let steps = rng.gen_range(10..60);
    for _ in 0..steps {
        match rng.gen_range(0..100) {
            0..=19 => {
                let req = SubmitRequest::new("u", rng.gen_range(1.0..200.0), rng.gen_range(1..=4));
                if let Ok(ids) = sched.submit_job(&req) {
                    live_jobs.extend(ids);
                }
            }
            20..=24 => {
                if let Some(id) = live_jobs.choose(&mut rng).copied() {
                    let _ = sched.remove_job(id);
                }
            }
            25..=54 => {
                let now = clock.now();
                let agent = agents.choose_mut(&mut rng).unwrap();
                agent.finish_due(now);
                let _ = exchange(agent, &sched, now);
            }
            55..=64 => {
                let _ = sched.scheduling_pass(clock.now());
            }
            65..=72 => {
                let _ = sched.expire_stale(clock.now());
            }
            73..=77 => {
                snapped.checkpoint().map_err(|e| err(&e))?;
                out.checkpoints += 1;
            }
            _ => clock.advance_secs(rng.gen_range(0.0..120.0)),
        }
        for ops in pending.lock().unwrap().drain(..) {
            out.transactions += 1;
            replay.execute_txn(ops).map_err(|e| err(&e))?;
        }
    }
    let live = snapped.read(|s| s.tables().clone());
    let mirrored = replay.read(|s| s.tables().clone());
    drop(sched);
    drop(snapped);
    drop(replay);
    let from_snapshot = recover(snapped_dir.path()).map_err(|e| err(&e))?;
    let from_replay = recover(replay_dir.path()).map_err(|e| err(&e))?;
    let reopened = Store::open(snapped_dir.path(), options).map_err(|e| err(&e))?.read(|s| s.tables().clone());
    Ok(if live != from_snapshot {
        Some("snapshot recovery differs from live state".into())
    } else if live != from_replay {
        Some("journal-only replay differs from live state".into())
    } else if live != mirrored {
        Some("mirrored store differs from live state".into())
    } else if live != reopened {
        Some("reopened store differs from live state".into())
    } else {
        None
    })
}

// ---------------------------------------------------------------------------
// Throttle

#[derive(Debug, Default)]
pub struct ThrottleCheck {
    pub runs: u64,
    pub starts: u64,
    pub violations: u64,
    pub first_failure: Option<String>,
}

/// Claims succeed unless the slot is in the refusing set for this tick.
struct Flaky {
    refuse: Vec<VmId>,
}

impl ClaimApi for Flaky {
    fn claim(&mut self, vm_id: &VmId, _job: &JobDescriptor) -> Result<bool, ApiError> {
        Ok(!self.refuse.contains(vm_id))
    }
}

/// Drives the push baseline with random throttles, late and early ticks,
/// bursty submissions, random completions and refused claims, and counts
/// 10-second windows holding more starts than the throttle allows.
pub fn check_throttle(runs: u64, seed: u64) -> ThrottleCheck {
    let mut out = ThrottleCheck::default();
    for r in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r));
        let rate = rng.gen_range(0.1..5.0);
        let scale = *[1.0, 10.0, 50.0].choose(&mut rng).unwrap();
        let config = BaselineConfig {
            throttle: rate,
            time_scale: scale,
            compact_every: 0,
            scan_queue: rng.gen(),
            ..Default::default()
        };
        let clock = VirtualClock::new(Timestamp::from_secs_f64(100.0));
        let store = Arc::new(Store::in_memory(StoreOptions::default()));
        let mut b = Baseline::new(config, store, Arc::new(clock.clone())).expect("baseline");
        let slots: Vec<VmId> = (0..rng.gen_range(1..40)).map(|i| VmId::new("h", i)).collect();
        for vm in &slots {
            b.register_slot(vm.clone(), Attributes::new()).expect("slot");
        }
        let mut running: Vec<JobId> = Vec::new();
        let mut starts_s: Vec<f64> = Vec::new();
        for _ in 0..rng.gen_range(20..200) {
            if rng.gen_bool(0.3) {
                let _ = b.submit(&SubmitRequest::new("u", 5.0, rng.gen_range(1..30)));
            }
            while !running.is_empty() && rng.gen_bool(0.4) {
                let job = running.swap_remove(rng.gen_range(0..running.len()));
                let _ = b.handle_completion(job, 0);
            }
            let refuse = slots.iter().filter(|_| rng.gen_bool(0.1)).cloned().collect();
            let now = clock.now();
            let started = b.schedd_tick(now, &mut Flaky { refuse }).expect("tick");
            for s in started {
                running.push(s.job_id);
                starts_s.push((s.at.0 - 100_000_000) as f64 / 1e6 * scale);
                out.starts += 1;
            }
            // ticks run late or early of their nominal period
            clock.advance_secs(rng.gen_range(0.2..3.0) / scale);
        }
        out.runs += 1;
        let limit = ((rate * THROTTLE_WINDOW_S + 1e-9).floor() as usize).max(1);
        let v = window_violations(&starts_s, THROTTLE_WINDOW_S, limit);
        if v > 0 {
            out.violations += v;
            out.first_failure.get_or_insert(format!("run {r}: rate {rate}, {v} windows over {limit}"));
        }
    }
    out
}
