//! In-memory relations plus the derived indexes and invariant checks.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::model::{
    derive_job_state, derive_machine_state, HistoryEvent, HistoryKind, JobId, JobRecord, JobState,
    MachineRecord, MatchRecord, RunRecord, Timestamp, VmId,
};

use super::{Key, OpKind, Relation, StoreError, Tuple, TupleOp};

/// The five relations. This is exactly what a snapshot persists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "TableRows", from = "TableRows")]
pub struct Tables {
    pub jobs: BTreeMap<JobId, JobRecord>,
    pub machines: BTreeMap<VmId, MachineRecord>,
    pub matches: BTreeMap<JobId, MatchRecord>,
    pub runs: BTreeMap<JobId, RunRecord>,
    pub history: BTreeMap<u64, HistoryEvent>,
}

/// Row-list form of [`Tables`]; JSON object keys must be strings.
#[derive(Serialize, Deserialize)]
struct TableRows {
    jobs: Vec<JobRecord>,
    machines: Vec<MachineRecord>,
    matches: Vec<MatchRecord>,
    runs: Vec<RunRecord>,
    history: Vec<(u64, HistoryEvent)>,
}

impl From<Tables> for TableRows {
    fn from(t: Tables) -> Self {
        TableRows {
            jobs: t.jobs.into_values().collect(),
            machines: t.machines.into_values().collect(),
            matches: t.matches.into_values().collect(),
            runs: t.runs.into_values().collect(),
            history: t.history.into_iter().collect(),
        }
    }
}

impl From<TableRows> for Tables {
    fn from(r: TableRows) -> Self {
        Tables {
            jobs: r.jobs.into_iter().map(|j| (j.job_id, j)).collect(),
            machines: r.machines.into_iter().map(|m| (m.vm_id.clone(), m)).collect(),
            matches: r.matches.into_iter().map(|m| (m.job_id, m)).collect(),
            runs: r.runs.into_iter().map(|x| (x.job_id, x)).collect(),
            history: r.history.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct JobTail {
    last_kind: HistoryKind,
    last_ts: Timestamp,
    drops: u32,
}

/// Relations plus indexes rebuilt from them. Readers get `&State`.
#[derive(Debug, Default)]
pub struct State {
    tables: Tables,
    match_by_vm: HashMap<VmId, JobId>,
    run_by_vm: HashMap<VmId, JobId>,
    idle_order: BTreeSet<(Timestamp, JobId)>,
    tails: HashMap<JobId, JobTail>,
    tokens: HashMap<String, Vec<JobId>>,
    submitted: u64,
    terminal: u64,
    completed: u64,
    removed: u64,
    dropped: u64,
    next_seq: u64,
    max_job_id: u64,
    index_conflict: Option<String>,
}

pub(crate) enum Undo {
    Job(JobId, Option<JobRecord>),
    Machine(VmId, Option<MachineRecord>),
    Match(JobId, Option<MatchRecord>),
    Run(JobId, Option<RunRecord>),
    History(u64),
}

impl State {
    pub fn from_tables(tables: Tables) -> Result<State, StoreError> {
        let mut state = State::default();
        let Tables { jobs, machines, matches, runs, history } = tables;
        for (seq, ev) in history {
            if seq != state.next_seq {
                return Err(StoreError::InvariantViolation(format!("history gap at seq {seq}")));
            }
            state.push_history(seq, ev)?;
        }
        for (_, m) in machines {
            state.put_machine(m);
        }
        for (_, j) in jobs {
            state.put_job(j);
        }
        for (_, m) in matches {
            state.put_match(m);
        }
        for (_, r) in runs {
            state.put_run(r);
        }
        if let Some(c) = state.index_conflict.take() {
            return Err(StoreError::InvariantViolation(c));
        }
        state.check_full()?;
        Ok(state)
    }

    pub fn tables(&self) -> &Tables {
        &self.tables
    }

    pub fn job(&self, id: JobId) -> Option<&JobRecord> {
        self.tables.jobs.get(&id)
    }

    pub fn machine(&self, vm: &VmId) -> Option<&MachineRecord> {
        self.tables.machines.get(vm)
    }

    pub fn match_for_job(&self, id: JobId) -> Option<&MatchRecord> {
        self.tables.matches.get(&id)
    }

    pub fn run_for_job(&self, id: JobId) -> Option<&RunRecord> {
        self.tables.runs.get(&id)
    }

    pub fn match_on_vm(&self, vm: &VmId) -> Option<&MatchRecord> {
        self.match_by_vm.get(vm).and_then(|j| self.tables.matches.get(j))
    }

    pub fn run_on_vm(&self, vm: &VmId) -> Option<&RunRecord> {
        self.run_by_vm.get(vm).and_then(|j| self.tables.runs.get(j))
    }

    /// IDLE jobs in scheduling order `(submit_time, job_id)`.
    pub fn idle_jobs(&self) -> impl Iterator<Item = &JobRecord> + '_ {
        self.idle_order.iter().filter_map(move |(_, id)| self.tables.jobs.get(id))
    }

    pub fn idle_count(&self) -> usize {
        self.idle_order.len()
    }

    pub fn submitted_count(&self) -> u64 {
        self.submitted
    }

    pub fn terminal_count(&self) -> u64 {
        self.terminal
    }

    pub fn completed_count(&self) -> u64 {
        self.completed
    }

    pub fn removed_count(&self) -> u64 {
        self.removed
    }

    pub fn dropped_count(&self) -> u64 {
        self.dropped
    }

    /// Kind of the most recent history event for `job`, if it was ever submitted.
    pub fn last_history_kind(&self, job: JobId) -> Option<HistoryKind> {
        self.tails.get(&job).map(|t| t.last_kind)
    }

    pub fn next_history_seq(&self) -> u64 {
        self.next_seq
    }

    /// Largest job id ever submitted (0 when none).
    pub fn max_job_id(&self) -> u64 {
        self.max_job_id
    }

    pub fn jobs_for_token(&self, token: &str) -> Option<&[JobId]> {
        self.tokens.get(token).map(Vec::as_slice)
    }

    pub fn history_since(&self, since: Timestamp) -> impl Iterator<Item = (u64, &HistoryEvent)> + '_ {
        self.tables.history.iter().filter(move |(_, e)| e.timestamp >= since).map(|(s, e)| (*s, e))
    }

    // --- index maintenance -------------------------------------------------

    fn put_job(&mut self, job: JobRecord) -> Option<JobRecord> {
        let old = self.tables.jobs.insert(job.job_id, job.clone());
        if let Some(o) = &old {
            if o.state == JobState::Idle {
                self.idle_order.remove(&(o.submit_time, o.job_id));
            }
        }
        if job.state == JobState::Idle {
            self.idle_order.insert((job.submit_time, job.job_id));
        }
        old
    }

    fn take_job(&mut self, id: JobId) -> Option<JobRecord> {
        let old = self.tables.jobs.remove(&id);
        if let Some(o) = &old {
            if o.state == JobState::Idle {
                self.idle_order.remove(&(o.submit_time, o.job_id));
            }
        }
        old
    }

    fn put_machine(&mut self, m: MachineRecord) -> Option<MachineRecord> {
        self.tables.machines.insert(m.vm_id.clone(), m)
    }

    fn take_machine(&mut self, vm: &VmId) -> Option<MachineRecord> {
        self.tables.machines.remove(vm)
    }

    fn put_match(&mut self, m: MatchRecord) -> Option<MatchRecord> {
        let old = self.take_match(m.job_id);
        if let Some(other) = self.match_by_vm.insert(m.vm_id.clone(), m.job_id) {
            if other != m.job_id {
                self.index_conflict.get_or_insert(format!("vm {} already has a match for job {other}", m.vm_id));
            }
        }
        self.tables.matches.insert(m.job_id, m);
        old
    }

    fn take_match(&mut self, id: JobId) -> Option<MatchRecord> {
        let old = self.tables.matches.remove(&id);
        if let Some(o) = &old {
            if self.match_by_vm.get(&o.vm_id) == Some(&id) {
                self.match_by_vm.remove(&o.vm_id);
            }
        }
        old
    }

    fn put_run(&mut self, r: RunRecord) -> Option<RunRecord> {
        let old = self.take_run(r.job_id);
        if let Some(other) = self.run_by_vm.insert(r.vm_id.clone(), r.job_id) {
            if other != r.job_id {
                self.index_conflict.get_or_insert(format!("vm {} already has a run for job {other}", r.vm_id));
            }
        }
        self.tables.runs.insert(r.job_id, r);
        old
    }

    fn take_run(&mut self, id: JobId) -> Option<RunRecord> {
        let old = self.tables.runs.remove(&id);
        if let Some(o) = &old {
            if self.run_by_vm.get(&o.vm_id) == Some(&id) {
                self.run_by_vm.remove(&o.vm_id);
            }
        }
        old
    }

    fn push_history(&mut self, seq: u64, ev: HistoryEvent) -> Result<(), StoreError> {
        let violation = |msg: String| Err(StoreError::InvariantViolation(msg));
        if seq != self.next_seq {
            return violation(format!("history seq {seq} out of order (next is {})", self.next_seq));
        }
        if ev.exit_code.is_some() != (ev.kind == HistoryKind::Completed) {
            return violation(format!("exit_code present iff COMPLETED (seq {seq})"));
        }
        match (ev.job_id, ev.kind) {
            (None, HistoryKind::MachineBoot) => {}
            (None, kind) => return violation(format!("{kind:?} event without job_id")),
            (Some(id), HistoryKind::MachineBoot) => {
                return violation(format!("MACHINE_BOOT event carries job {id}"));
            }
            (Some(id), kind) => {
                let tail = self.tails.get(&id).copied();
                let next = match tail {
                    None if kind == HistoryKind::Submitted => {
                        JobTail { last_kind: kind, last_ts: ev.timestamp, drops: 0 }
                    }
                    None => return violation(format!("job {id}: first event is {kind:?}, not SUBMITTED")),
                    Some(t) if t.last_kind.is_terminal() => {
                        return violation(format!("job {id}: {kind:?} after terminal {:?}", t.last_kind));
                    }
                    Some(_) if kind == HistoryKind::Submitted => {
                        return violation(format!("job {id} submitted twice"));
                    }
                    Some(t) if ev.timestamp < t.last_ts => {
                        return violation(format!("job {id}: history timestamp went backwards"));
                    }
                    Some(t) => JobTail {
                        last_kind: kind,
                        last_ts: ev.timestamp,
                        drops: t.drops + u32::from(kind == HistoryKind::Dropped),
                    },
                };
                self.tails.insert(id, next);
                if kind == HistoryKind::Submitted {
                    self.submitted += 1;
                    self.max_job_id = self.max_job_id.max(id.0);
                    if let Some(token) = &ev.token {
                        self.tokens.entry(token.clone()).or_default().push(id);
                    }
                }
                if kind.is_terminal() {
                    self.terminal += 1;
                }
                self.count_kind(kind, 1);
            }
        }
        self.tables.history.insert(seq, ev);
        self.next_seq += 1;
        Ok(())
    }

    fn count_kind(&mut self, kind: HistoryKind, delta: i64) {
        let slot = match kind {
            HistoryKind::Completed => &mut self.completed,
            HistoryKind::Removed => &mut self.removed,
            HistoryKind::Dropped => &mut self.dropped,
            _ => return,
        };
        *slot = slot.checked_add_signed(delta).expect("history counter underflow");
    }

    fn pop_history(&mut self, seq: u64) {
        // Only ever called for the most recent append.
        let Some(ev) = self.tables.history.remove(&seq) else { return };
        self.next_seq = seq;
        let Some(id) = ev.job_id else { return };
        self.count_kind(ev.kind, -1);
        if ev.kind == HistoryKind::Submitted {
            self.tails.remove(&id);
            self.submitted -= 1;
            if let Some(token) = &ev.token {
                if let Some(ids) = self.tokens.get_mut(token) {
                    ids.retain(|j| *j != id);
                    if ids.is_empty() {
                        self.tokens.remove(token);
                    }
                }
            }
            self.max_job_id = self.tails.keys().map(|j| j.0).max().unwrap_or(0);
            return;
        }
        if ev.kind.is_terminal() {
            self.terminal -= 1;
        }
        // Rebuild this job's tail from the remaining history.
        let mut tail: Option<JobTail> = None;
        for e in self.tables.history.values().filter(|e| e.job_id == Some(id)) {
            tail = Some(JobTail {
                last_kind: e.kind,
                last_ts: e.timestamp,
                drops: tail.map_or(0, |t| t.drops) + u32::from(e.kind == HistoryKind::Dropped),
            });
        }
        match tail {
            Some(t) => self.tails.insert(id, t),
            None => self.tails.remove(&id),
        };
    }

    // --- applying operations -----------------------------------------------

    pub(crate) fn apply(&mut self, op: &TupleOp, undo: &mut Vec<Undo>) -> Result<(), StoreError> {
        let conflict = |msg: String| Err(StoreError::KeyConflict(msg));
        let shape = |msg: &str| Err(StoreError::InvariantViolation(format!("malformed op: {msg}")));
        match (op.relation, &op.key, &op.value) {
            (Relation::Jobs, Key::Job(id), value) => {
                let exists = self.tables.jobs.contains_key(id);
                match (op.kind, value) {
                    (OpKind::Insert, Some(Tuple::Job(j))) | (OpKind::Update, Some(Tuple::Job(j))) => {
                        if j.job_id != *id {
                            return shape("job key does not match tuple");
                        }
                        if op.kind == OpKind::Insert && exists {
                            return conflict(format!("insert existing job {id}"));
                        }
                        if op.kind == OpKind::Update && !exists {
                            return conflict(format!("update missing job {id}"));
                        }
                        if !(j.duration_s > 0.0 && j.duration_s.is_finite()) {
                            return Err(StoreError::InvariantViolation(format!("job {id}: duration_s must be > 0")));
                        }
                        let old = self.put_job(j.clone());
                        undo.push(Undo::Job(*id, old));
                    }
                    (OpKind::Delete, None) => {
                        let Some(old) = self.take_job(*id) else {
                            return conflict(format!("delete missing job {id}"));
                        };
                        undo.push(Undo::Job(*id, Some(old)));
                    }
                    _ => return shape("jobs op/value mismatch"),
                }
            }
            (Relation::Machines, Key::Vm(vm), value) => {
                let exists = self.tables.machines.contains_key(vm);
                match (op.kind, value) {
                    (OpKind::Insert, Some(Tuple::Machine(m))) | (OpKind::Update, Some(Tuple::Machine(m))) => {
                        if &m.vm_id != vm {
                            return shape("machine key does not match tuple");
                        }
                        if op.kind == OpKind::Insert && exists {
                            return conflict(format!("insert existing machine {vm}"));
                        }
                        if op.kind == OpKind::Update && !exists {
                            return conflict(format!("update missing machine {vm}"));
                        }
                        let old = self.put_machine(m.clone());
                        undo.push(Undo::Machine(vm.clone(), old));
                    }
                    (OpKind::Delete, None) => {
                        let Some(old) = self.take_machine(vm) else {
                            return conflict(format!("delete missing machine {vm}"));
                        };
                        undo.push(Undo::Machine(vm.clone(), Some(old)));
                    }
                    _ => return shape("machines op/value mismatch"),
                }
            }
            (Relation::Matches, Key::Job(id), value) => {
                let exists = self.tables.matches.contains_key(id);
                match (op.kind, value) {
                    (OpKind::Insert, Some(Tuple::Match(m))) | (OpKind::Update, Some(Tuple::Match(m))) => {
                        if m.job_id != *id {
                            return shape("match key does not match tuple");
                        }
                        if op.kind == OpKind::Insert && exists {
                            return conflict(format!("insert existing match for job {id}"));
                        }
                        if op.kind == OpKind::Update && !exists {
                            return conflict(format!("update missing match for job {id}"));
                        }
                        let old = self.put_match(m.clone());
                        undo.push(Undo::Match(*id, old));
                    }
                    (OpKind::Delete, None) => {
                        let Some(old) = self.take_match(*id) else {
                            return conflict(format!("delete missing match for job {id}"));
                        };
                        undo.push(Undo::Match(*id, Some(old)));
                    }
                    _ => return shape("matches op/value mismatch"),
                }
            }
            (Relation::Runs, Key::Job(id), value) => {
                let exists = self.tables.runs.contains_key(id);
                match (op.kind, value) {
                    (OpKind::Insert, Some(Tuple::Run(r))) | (OpKind::Update, Some(Tuple::Run(r))) => {
                        if r.job_id != *id {
                            return shape("run key does not match tuple");
                        }
                        if op.kind == OpKind::Insert && exists {
                            return conflict(format!("insert existing run for job {id}"));
                        }
                        if op.kind == OpKind::Update && !exists {
                            return conflict(format!("update missing run for job {id}"));
                        }
                        let old = self.put_run(r.clone());
                        undo.push(Undo::Run(*id, old));
                    }
                    (OpKind::Delete, None) => {
                        let Some(old) = self.take_run(*id) else {
                            return conflict(format!("delete missing run for job {id}"));
                        };
                        undo.push(Undo::Run(*id, Some(old)));
                    }
                    _ => return shape("runs op/value mismatch"),
                }
            }
            (Relation::History, Key::Seq(seq), value) => match (op.kind, value) {
                (OpKind::Insert, Some(Tuple::History(ev))) => {
                    if self.tables.history.contains_key(seq) {
                        return conflict(format!("insert existing history seq {seq}"));
                    }
                    self.push_history(*seq, ev.clone())?;
                    undo.push(Undo::History(*seq));
                }
                (OpKind::Insert, _) => return shape("history op/value mismatch"),
                _ => {
                    return Err(StoreError::InvariantViolation(format!(
                        "history is append-only ({:?} on seq {seq})",
                        op.kind
                    )));
                }
            },
            _ => return shape("key does not match relation"),
        }
        if let Some(c) = self.index_conflict.take() {
            return Err(StoreError::InvariantViolation(c));
        }
        Ok(())
    }

    pub(crate) fn rollback(&mut self, undo: Vec<Undo>) {
        for u in undo.into_iter().rev() {
            match u {
                Undo::Job(_, Some(j)) => {
                    self.put_job(j);
                }
                Undo::Job(id, None) => {
                    self.take_job(id);
                }
                Undo::Machine(_, Some(m)) => {
                    self.put_machine(m);
                }
                Undo::Machine(vm, None) => {
                    self.take_machine(&vm);
                }
                Undo::Match(id, prev) => {
                    self.take_match(id);
                    if let Some(m) = prev {
                        self.put_match(m);
                    }
                }
                Undo::Run(id, prev) => {
                    self.take_run(id);
                    if let Some(r) = prev {
                        self.put_run(r);
                    }
                }
                Undo::History(seq) => self.pop_history(seq),
            }
        }
        self.index_conflict = None;
        // Index entries for vms may have been clobbered by a conflicting
        // insert; rebuild them from the restored tables.
        self.match_by_vm = self.tables.matches.values().map(|m| (m.vm_id.clone(), m.job_id)).collect();
        self.run_by_vm = self.tables.runs.values().map(|r| (r.vm_id.clone(), r.job_id)).collect();
    }

    // --- invariants --------------------------------------------------------

    fn check_job(&self, id: JobId) -> Result<(), String> {
        let m = self.tables.matches.get(&id);
        let r = self.tables.runs.get(&id);
        match self.tables.jobs.get(&id) {
            Some(job) => {
                let derived = derive_job_state(m.is_some(), r.is_some())
                    .map_err(|_| format!("job {id} has both a match and a run"))?;
                if derived != job.state {
                    return Err(format!("job {id} state {:?} but tuples say {derived:?}", job.state));
                }
                let drops = self.tails.get(&id).map_or(0, |t| t.drops);
                if job.retry_count != drops {
                    return Err(format!("job {id} retry_count {} but {drops} DROPPED events", job.retry_count));
                }
            }
            None => {
                if m.is_some() || r.is_some() {
                    return Err(format!("match/run references missing job {id}"));
                }
            }
        }
        if let Some(m) = m {
            if m.expires_at <= m.created_at {
                return Err(format!("match for job {id} expires before it is created"));
            }
            self.check_vm(&m.vm_id)?;
            if self.match_by_vm.get(&m.vm_id) != Some(&id) {
                return Err(format!("match index out of sync for job {id}"));
            }
        }
        if let Some(r) = r {
            self.check_vm(&r.vm_id)?;
            if self.run_by_vm.get(&r.vm_id) != Some(&id) {
                return Err(format!("run index out of sync for job {id}"));
            }
        }
        Ok(())
    }

    fn check_vm(&self, vm: &VmId) -> Result<(), String> {
        let m = self.match_by_vm.get(vm);
        let r = self.run_by_vm.get(vm);
        match self.tables.machines.get(vm) {
            Some(machine) => {
                let derived = derive_machine_state(m.is_some(), r.is_some())
                    .map_err(|_| format!("vm {vm} has both a match and a run"))?;
                if derived != machine.state {
                    return Err(format!("vm {vm} state {:?} but tuples say {derived:?}", machine.state));
                }
            }
            None => {
                if m.is_some() || r.is_some() {
                    return Err(format!("match/run references missing machine {vm}"));
                }
            }
        }
        Ok(())
    }

    fn check_conservation(&self) -> Result<(), String> {
        let live = self.tables.jobs.len() as u64;
        if self.submitted != live + self.terminal {
            return Err(format!(
                "conservation: submitted {} != live {live} + terminal {}",
                self.submitted, self.terminal
            ));
        }
        Ok(())
    }

    /// Checks every key touched by `ops` plus aggregate conservation.
    pub(crate) fn check_touched(&self, ops: &[TupleOp], undo: &[Undo]) -> Result<(), StoreError> {
        let mut jobs = HashSet::new();
        let mut vms = HashSet::new();
        for op in ops {
            match &op.key {
                Key::Job(id) => {
                    jobs.insert(*id);
                }
                Key::Vm(vm) => {
                    vms.insert(vm.clone());
                }
                Key::Seq(_) => {}
            }
            match &op.value {
                Some(Tuple::Match(m)) => {
                    vms.insert(m.vm_id.clone());
                }
                Some(Tuple::Run(r)) => {
                    vms.insert(r.vm_id.clone());
                }
                Some(Tuple::History(h)) => {
                    if let Some(id) = h.job_id {
                        jobs.insert(id);
                    }
                }
                _ => {}
            }
        }
        // A deleted or moved match/run frees the vm it used to point at.
        for u in undo {
            match u {
                Undo::Match(_, Some(m)) => {
                    vms.insert(m.vm_id.clone());
                }
                Undo::Run(_, Some(r)) => {
                    vms.insert(r.vm_id.clone());
                }
                _ => {}
            }
        }
        for id in &jobs {
            self.check_job(*id).map_err(StoreError::InvariantViolation)?;
        }
        for vm in &vms {
            self.check_vm(vm).map_err(StoreError::InvariantViolation)?;
        }
        self.check_conservation().map_err(StoreError::InvariantViolation)
    }

    /// Full scan of every invariant. Used by tests and after recovery.
    pub fn check_full(&self) -> Result<(), StoreError> {
        let v = StoreError::InvariantViolation;
        for id in self.tables.jobs.keys().chain(self.tables.matches.keys()).chain(self.tables.runs.keys()) {
            self.check_job(*id).map_err(v)?;
        }
        for vm in self.tables.machines.keys().chain(self.match_by_vm.keys()).chain(self.run_by_vm.keys()) {
            self.check_vm(vm).map_err(v)?;
        }
        if self.match_by_vm.len() != self.tables.matches.len() || self.run_by_vm.len() != self.tables.runs.len() {
            return Err(v("vm index size mismatch".into()));
        }
        let idle: BTreeSet<_> = self
            .tables
            .jobs
            .values()
            .filter(|j| j.state == JobState::Idle)
            .map(|j| (j.submit_time, j.job_id))
            .collect();
        if idle != self.idle_order {
            return Err(v("idle index out of sync".into()));
        }
        for (id, tail) in &self.tails {
            if tail.last_kind.is_terminal() == self.tables.jobs.contains_key(id) {
                return Err(v(format!("job {id}: tuple presence disagrees with history ({:?})", tail.last_kind)));
            }
        }
        for id in self.tables.jobs.keys() {
            if !self.tails.contains_key(id) {
                return Err(v(format!("job {id} has no SUBMITTED event")));
            }
        }
        self.check_conservation().map_err(v)
    }
}
