//! Journaled tuple store.
//!
//! Four relations carry operational state (jobs, machines, matches, runs) and
//! a fifth, append-only relation carries history. Every state change is a
//! transaction: a list of tuple operations applied atomically, checked
//! against the cross-relation invariants, then made durable in the journal
//! before the commit is acknowledged. Anything that fails rolls back.
//!
//! Durable layout under the store directory:
//!
//! ```text
//! journal/segment-<n>.log
//! snapshot/state-<lsn>.snap
//! ```

mod journal;
mod state;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock, RwLockReadGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::model::{HistoryEvent, JobId, JobRecord, MachineRecord, MatchRecord, RunRecord, VmId};

pub use journal::{decode, list_segments, list_snapshots, Decoded, Record, JOURNAL_DIR, SNAPSHOT_DIR};
pub use state::{State, Tables};

use journal::{SegmentWriter, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Jobs,
    Machines,
    Matches,
    Runs,
    History,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpKind {
    Insert,
    Update,
    Delete,
}

/// Primary key of a tuple. Matches and runs are keyed by job, history by
/// sequence number.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Key {
    Job(JobId),
    Vm(VmId),
    Seq(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tuple {
    Job(JobRecord),
    Machine(MachineRecord),
    Match(MatchRecord),
    Run(RunRecord),
    History(HistoryEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleOp {
    pub kind: OpKind,
    pub relation: Relation,
    pub key: Key,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Tuple>,
}

impl TupleOp {
    pub fn insert_job(j: JobRecord) -> Self {
        TupleOp { kind: OpKind::Insert, relation: Relation::Jobs, key: Key::Job(j.job_id), value: Some(Tuple::Job(j)) }
    }

    pub fn update_job(j: JobRecord) -> Self {
        TupleOp { kind: OpKind::Update, relation: Relation::Jobs, key: Key::Job(j.job_id), value: Some(Tuple::Job(j)) }
    }

    pub fn delete_job(id: JobId) -> Self {
        TupleOp { kind: OpKind::Delete, relation: Relation::Jobs, key: Key::Job(id), value: None }
    }

    pub fn insert_machine(m: MachineRecord) -> Self {
        TupleOp {
            kind: OpKind::Insert,
            relation: Relation::Machines,
            key: Key::Vm(m.vm_id.clone()),
            value: Some(Tuple::Machine(m)),
        }
    }

    pub fn update_machine(m: MachineRecord) -> Self {
        TupleOp {
            kind: OpKind::Update,
            relation: Relation::Machines,
            key: Key::Vm(m.vm_id.clone()),
            value: Some(Tuple::Machine(m)),
        }
    }

    pub fn delete_machine(vm: VmId) -> Self {
        TupleOp { kind: OpKind::Delete, relation: Relation::Machines, key: Key::Vm(vm), value: None }
    }

    pub fn insert_match(m: MatchRecord) -> Self {
        TupleOp {
            kind: OpKind::Insert,
            relation: Relation::Matches,
            key: Key::Job(m.job_id),
            value: Some(Tuple::Match(m)),
        }
    }

    pub fn delete_match(id: JobId) -> Self {
        TupleOp { kind: OpKind::Delete, relation: Relation::Matches, key: Key::Job(id), value: None }
    }

    pub fn insert_run(r: RunRecord) -> Self {
        TupleOp { kind: OpKind::Insert, relation: Relation::Runs, key: Key::Job(r.job_id), value: Some(Tuple::Run(r)) }
    }

    pub fn update_run(r: RunRecord) -> Self {
        TupleOp { kind: OpKind::Update, relation: Relation::Runs, key: Key::Job(r.job_id), value: Some(Tuple::Run(r)) }
    }

    pub fn delete_run(id: JobId) -> Self {
        TupleOp { kind: OpKind::Delete, relation: Relation::Runs, key: Key::Job(id), value: None }
    }

    pub fn append_history(seq: u64, e: HistoryEvent) -> Self {
        TupleOp { kind: OpKind::Insert, relation: Relation::History, key: Key::Seq(seq), value: Some(Tuple::History(e)) }
    }
}

impl fmt::Display for TupleOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rel = match self.relation {
            Relation::Jobs => "jobs",
            Relation::Machines => "machines",
            Relation::Matches => "matches",
            Relation::Runs => "runs",
            Relation::History => "history",
        };
        let kind = match self.kind {
            OpKind::Insert if self.relation == Relation::History => "APPEND",
            OpKind::Insert => "INSERT",
            OpKind::Update => "UPDATE",
            OpKind::Delete => "DELETE",
        };
        write!(f, "{kind} {rel}")
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("key conflict: {0}")]
    KeyConflict(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("journal I/O error: {0}")]
    JournalIo(#[from] std::io::Error),
    #[error("journal corrupt before committed lsn {lsn}")]
    CorruptInterior { lsn: u64 },
    #[error("snapshot {0} is unreadable")]
    CorruptSnapshot(String),
}

/// When commits reach stable storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// fsync before every acknowledgment.
    #[default]
    Full,
    /// fsync at most once per window; a crash may lose the last window.
    Batched(Duration),
}

#[derive(Debug, Clone, Default)]
pub struct StoreOptions {
    pub durability: Durability,
    /// Re-check every invariant over the whole store after each commit.
    pub verify_full: bool,
}

/// Acknowledgment of a committed transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitAck {
    pub txn_id: u64,
    pub first_lsn: u64,
    /// Lsn of the commit record.
    pub last_lsn: u64,
}

/// Called with every committed transaction, in commit order.
pub type CommitObserver = Box<dyn FnMut(&CommitAck, &[TupleOp]) + Send>;

struct Writer {
    dir: Option<PathBuf>,
    segment: Option<SegmentWriter>,
    next_lsn: u64,
    next_txn_id: u64,
    last_sync: Instant,
    unsynced: bool,
    observer: Option<CommitObserver>,
    scratch: Vec<u8>,
}

/// Outcome of opening a store directory.
#[derive(Debug, Clone, Default)]
pub struct RecoveryReport {
    pub snapshot_lsn: Option<u64>,
    pub replayed_txns: usize,
    pub last_lsn: u64,
    pub discarded_tail: bool,
}

pub struct Store {
    state: RwLock<State>,
    writer: Mutex<Writer>,
    options: StoreOptions,
    txns: AtomicU64,
    recovery: RecoveryReport,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store").field("options", &self.options).field("txns", &self.txn_count()).finish()
    }
}

/// A transaction being assembled. Reads see the committed state; writes are
/// buffered until the closure returns.
pub struct Txn<'a> {
    state: &'a State,
    ops: Vec<TupleOp>,
    next_seq: u64,
}

impl<'a> Txn<'a> {
    pub fn state(&self) -> &'a State {
        self.state
    }

    pub fn push(&mut self, op: TupleOp) {
        self.ops.push(op);
    }

    /// Appends a history event with the next free sequence number.
    pub fn append(&mut self, e: HistoryEvent) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.ops.push(TupleOp::append_history(seq, e));
    }

    pub fn ops(&self) -> &[TupleOp] {
        &self.ops
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

/// Typed access for [`Store::select`].
pub trait Row: Clone {
    fn rows(state: &State) -> Box<dyn Iterator<Item = &Self> + '_>;
}

impl Row for JobRecord {
    fn rows(state: &State) -> Box<dyn Iterator<Item = &Self> + '_> {
        Box::new(state.tables().jobs.values())
    }
}

impl Row for MachineRecord {
    fn rows(state: &State) -> Box<dyn Iterator<Item = &Self> + '_> {
        Box::new(state.tables().machines.values())
    }
}

impl Row for MatchRecord {
    fn rows(state: &State) -> Box<dyn Iterator<Item = &Self> + '_> {
        Box::new(state.tables().matches.values())
    }
}

impl Row for RunRecord {
    fn rows(state: &State) -> Box<dyn Iterator<Item = &Self> + '_> {
        Box::new(state.tables().runs.values())
    }
}

impl Row for HistoryEvent {
    fn rows(state: &State) -> Box<dyn Iterator<Item = &Self> + '_> {
        Box::new(state.tables().history.values())
    }
}

impl Store {
    /// A store with no journal. State is lost when it is dropped.
    pub fn in_memory(options: StoreOptions) -> Store {
        Store::assemble(State::default(), None, None, 1, 1, options, RecoveryReport::default())
    }

    /// Opens (or creates) a durable store, recovering whatever is on disk.
    pub fn open(dir: impl AsRef<Path>, options: StoreOptions) -> Result<Store, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(JOURNAL_DIR))?;
        fs::create_dir_all(dir.join(SNAPSHOT_DIR))?;
        let (state, scan, snapshot_lsn, snap_txn) = load(&dir)?;
        let replayed_txns = scan.committed.len();
        let last_lsn = scan.last_lsn;

        // Cut torn or uncommitted bytes so new commits follow the last good one.
        let (seg_no, seg_len) = match scan.tail {
            Some(t) => (t.segment, t.offset),
            None => (1, 0),
        };
        for p in &scan.orphan_segments {
            fs::remove_file(p)?;
        }
        let segment = SegmentWriter::open(&dir, seg_no, seg_len)?;
        segment.file.sync_all()?;
        if scan.discarded_tail {
            warn!(segment = seg_no, offset = seg_len, "discarded torn journal tail");
        }
        let report = RecoveryReport { snapshot_lsn, replayed_txns, last_lsn, discarded_tail: scan.discarded_tail };
        info!(
            snapshot_lsn = snapshot_lsn.unwrap_or(0),
            replayed = replayed_txns,
            last_lsn,
            "store recovered"
        );
        let next_txn = scan.last_txn_id.max(snap_txn) + 1;
        Ok(Store::assemble(state, Some(dir), Some(segment), last_lsn + 1, next_txn, options, report))
    }

    fn assemble(
        state: State,
        dir: Option<PathBuf>,
        segment: Option<SegmentWriter>,
        next_lsn: u64,
        next_txn_id: u64,
        options: StoreOptions,
        recovery: RecoveryReport,
    ) -> Store {
        Store {
            state: RwLock::new(state),
            writer: Mutex::new(Writer {
                dir,
                segment,
                next_lsn,
                next_txn_id,
                last_sync: Instant::now(),
                unsynced: false,
                observer: None,
                scratch: Vec::with_capacity(4096),
            }),
            options,
            txns: AtomicU64::new(0),
            recovery,
        }
    }

    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn is_durable(&self) -> bool {
        self.writer.lock().unwrap().segment.is_some()
    }

    pub fn set_observer(&self, observer: Option<CommitObserver>) {
        self.writer.lock().unwrap().observer = observer;
    }

    /// Number of transactions committed by this handle.
    pub fn txn_count(&self) -> u64 {
        self.txns.load(Ordering::Relaxed)
    }

    /// Runs `f` against a consistent view of committed state.
    pub fn read<T>(&self, f: impl FnOnce(&State) -> T) -> T {
        f(&self.state.read().unwrap())
    }

    pub fn view(&self) -> RwLockReadGuard<'_, State> {
        self.state.read().unwrap()
    }

    pub fn select<R: Row>(&self, pred: impl Fn(&R) -> bool) -> Vec<R> {
        self.read(|s| R::rows(s).filter(|r| pred(r)).cloned().collect())
    }

    /// Applies `ops` atomically.
    pub fn execute_txn(&self, ops: Vec<TupleOp>) -> Result<CommitAck, StoreError> {
        self.transact(|tx| {
            for op in ops {
                tx.push(op);
            }
            Ok::<_, StoreError>(())
        })
        .map(|(ack, ())| ack)
    }

    /// Builds a transaction with `f` and commits it. Transactions are
    /// serialized; `f` sees the state left by the previous commit.
    pub fn transact<T, E>(&self, f: impl FnOnce(&mut Txn<'_>) -> Result<T, E>) -> Result<(CommitAck, T), E>
    where
        E: From<StoreError>,
    {
        let mut writer = self.writer.lock().unwrap();
        let mut state = self.state.write().unwrap();
        let (ops, value) = {
            let mut tx = Txn { state: &state, ops: Vec::new(), next_seq: state.next_history_seq() };
            let value = f(&mut tx)?;
            (tx.ops, value)
        };
        let ack = self.commit_locked(&mut writer, &mut state, ops)?;
        Ok((ack, value))
    }

    fn commit_locked(&self, writer: &mut Writer, state: &mut State, ops: Vec<TupleOp>) -> Result<CommitAck, StoreError> {
        let mut undo = Vec::with_capacity(ops.len());
        let mut result = Ok(());
        for op in &ops {
            if let Err(e) = state.apply(op, &mut undo) {
                result = Err(e);
                break;
            }
        }
        if result.is_ok() {
            result = state.check_touched(&ops, &undo);
        }
        if result.is_ok() && self.options.verify_full {
            result = state.check_full();
        }
        let txn_id = writer.next_txn_id;
        let first_lsn = writer.next_lsn;
        let last_lsn = first_lsn + ops.len() as u64;
        if result.is_ok() && writer.segment.is_some() {
            result = journal_append(writer, txn_id, first_lsn, &ops, self.options.durability);
        }
        if let Err(e) = result {
            state.rollback(undo);
            return Err(e);
        }
        writer.next_txn_id += 1;
        writer.next_lsn = last_lsn + 1;
        self.txns.fetch_add(1, Ordering::Relaxed);
        let ack = CommitAck { txn_id, first_lsn, last_lsn };
        debug!(event = "txn", txn_id, first_lsn, ops = ops.len(), "transaction committed");
        if let Some(obs) = writer.observer.as_mut() {
            obs(&ack, &ops);
        }
        Ok(ack)
    }

    /// Forces any batched commits to stable storage.
    pub fn sync(&self) -> Result<(), StoreError> {
        let mut writer = self.writer.lock().unwrap();
        if let Some(seg) = &writer.segment {
            if writer.unsynced {
                seg.file.sync_data()?;
            }
        }
        writer.unsynced = false;
        writer.last_sync = Instant::now();
        Ok(())
    }

    /// Writes a snapshot of committed state, starts a fresh journal segment
    /// and removes segments and snapshots the new snapshot supersedes.
    /// Returns the snapshot watermark lsn.
    pub fn checkpoint(&self) -> Result<u64, StoreError> {
        let mut writer = self.writer.lock().unwrap();
        let state = self.state.read().unwrap();
        let lsn = writer.next_lsn - 1;
        let Some(dir) = writer.dir.clone() else { return Ok(lsn) };
        let snap = Snapshot { lsn, next_txn_id: writer.next_txn_id, tables: state.tables().clone() };
        drop(state);
        if let Some(seg) = &writer.segment {
            seg.file.sync_data()?;
        }
        journal::write_snapshot(&dir, &snap)?;
        let old_number = writer.segment.as_ref().map_or(0, |s| s.number);
        writer.segment = Some(SegmentWriter::open(&dir, old_number + 1, 0)?);
        writer.unsynced = false;
        for (n, p) in journal::list_segments(&dir)? {
            if n <= old_number {
                fs::remove_file(p)?;
            }
        }
        for (n, p) in journal::list_snapshots(&dir)? {
            if n < lsn {
                fs::remove_file(p)?;
            }
        }
        journal::sync_dir(&dir.join(JOURNAL_DIR))?;
        Ok(lsn)
    }
}

fn journal_append(
    writer: &mut Writer,
    txn_id: u64,
    first_lsn: u64,
    ops: &[TupleOp],
    durability: Durability,
) -> Result<(), StoreError> {
    let mut buf = std::mem::take(&mut writer.scratch);
    buf.clear();
    let mut lsn = first_lsn;
    for op in ops {
        Record::Op { lsn, txn_id, op: op.clone() }.encode_into(&mut buf);
        lsn += 1;
    }
    Record::Commit { lsn, txn_id, ops: ops.len() as u32 }.encode_into(&mut buf);
    let seg = writer.segment.as_mut().expect("durable store");
    let before = seg.len;
    let mut res = seg.append(&buf);
    if res.is_ok() {
        match durability {
            Durability::Full => res = seg.file.sync_data(),
            Durability::Batched(window) => {
                writer.unsynced = true;
                if writer.last_sync.elapsed() >= window {
                    res = seg.file.sync_data();
                    writer.unsynced = false;
                    writer.last_sync = Instant::now();
                }
            }
        }
    }
    if res.is_err() {
        let _ = seg.file.set_len(before);
        seg.len = before;
    }
    writer.scratch = buf;
    res.map_err(StoreError::from)
}

/// Loads snapshot plus journal replay without modifying any file.
fn load(dir: &Path) -> Result<(State, journal::JournalScan, Option<u64>, u64), StoreError> {
    let snapshots = journal::list_snapshots(dir)?;
    let mut base = None;
    for (_, path) in snapshots.iter().rev() {
        match journal::read_snapshot(path) {
            Ok(s) => {
                base = Some(s);
                break;
            }
            Err(e) => warn!(error = %e, "skipping unreadable snapshot"),
        }
    }
    let (mut state, watermark, snap_txn) = match base {
        Some(s) => (State::from_tables(s.tables)?, Some(s.lsn), s.next_txn_id.saturating_sub(1)),
        None => (State::default(), None, 0),
    };
    let scan = journal::scan(dir, watermark.unwrap_or(0))?;
    for (lsn, ops) in &scan.committed {
        let mut undo = Vec::new();
        for op in ops {
            state.apply(op, &mut undo).map_err(|_| StoreError::CorruptInterior { lsn: *lsn })?;
        }
    }
    state.check_full()?;
    Ok((state, scan, watermark, snap_txn))
}

/// Reconstructs committed state from `dir` read-only.
pub fn recover(dir: impl AsRef<Path>) -> Result<Tables, StoreError> {
    load(dir.as_ref()).map(|(s, ..)| s.tables().clone())
}

#[cfg(test)]
mod tests;
