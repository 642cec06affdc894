use std::fs::OpenOptions;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::matchmaker::parse_expression;
use crate::model::{Attributes, HistoryKind, JobState, MachineState, Timestamp};

fn job(id: u64) -> JobRecord {
    JobRecord {
        job_id: JobId(id),
        owner: "alice".into(),
        duration_s: 10.0,
        requirements: parse_expression("true").unwrap(),
        rank: None,
        attributes: Attributes::new(),
        state: JobState::Idle,
        submit_time: Timestamp(id as i64),
        retry_count: 0,
        phase: None,
        remove_requested: false,
    }
}

fn machine(slot: u32) -> MachineRecord {
    MachineRecord {
        vm_id: VmId::new("h", slot),
        attributes: Attributes::new(),
        state: MachineState::Unclaimed,
        last_heartbeat: Timestamp(0),
        boot_epoch: 1,
    }
}

fn submit(store: &Store, id: u64) -> Result<CommitAck, StoreError> {
    store
        .transact(|tx| {
            tx.push(TupleOp::insert_job(job(id)));
            tx.append(HistoryEvent::job(JobId(id), HistoryKind::Submitted, Timestamp(id as i64)));
            Ok::<_, StoreError>(())
        })
        .map(|(a, ())| a)
}

fn add_machine(store: &Store, slot: u32) {
    store.execute_txn(vec![TupleOp::insert_machine(machine(slot))]).unwrap();
}

fn do_match(store: &Store, id: u64, slot: u32, t: i64) -> Result<CommitAck, StoreError> {
    store
        .transact(|tx| {
            let mut j = tx.state().job(JobId(id)).unwrap().clone();
            j.state = JobState::Matched;
            let mut m = tx.state().machine(&VmId::new("h", slot)).unwrap().clone();
            m.state = MachineState::Matched;
            tx.push(TupleOp::insert_match(MatchRecord {
                job_id: JobId(id),
                vm_id: VmId::new("h", slot),
                created_at: Timestamp(t),
                expires_at: Timestamp(t + 100),
            }));
            tx.push(TupleOp::update_job(j));
            tx.push(TupleOp::update_machine(m));
            tx.append(HistoryEvent::job(JobId(id), HistoryKind::Matched, Timestamp(t)).on(&VmId::new("h", slot)));
            Ok::<_, StoreError>(())
        })
        .map(|(a, ())| a)
}

fn start(store: &Store, id: u64, slot: u32, t: i64) {
    store
        .transact(|tx| {
            let mut j = tx.state().job(JobId(id)).unwrap().clone();
            j.state = JobState::Running;
            let mut m = tx.state().machine(&VmId::new("h", slot)).unwrap().clone();
            m.state = MachineState::Claimed;
            tx.push(TupleOp::delete_match(JobId(id)));
            tx.push(TupleOp::insert_run(RunRecord {
                job_id: JobId(id),
                vm_id: VmId::new("h", slot),
                started_at: Timestamp(t),
                missed_reports: 0,
            }));
            tx.push(TupleOp::update_job(j));
            tx.push(TupleOp::update_machine(m));
            tx.append(HistoryEvent::job(JobId(id), HistoryKind::Started, Timestamp(t)));
            Ok::<_, StoreError>(())
        })
        .unwrap();
}

fn complete(store: &Store, id: u64, slot: u32, t: i64) {
    store
        .transact(|tx| {
            let mut m = tx.state().machine(&VmId::new("h", slot)).unwrap().clone();
            m.state = MachineState::Unclaimed;
            tx.push(TupleOp::delete_run(JobId(id)));
            tx.push(TupleOp::delete_job(JobId(id)));
            tx.push(TupleOp::update_machine(m));
            let mut e = HistoryEvent::job(JobId(id), HistoryKind::Completed, Timestamp(t));
            e.exit_code = Some(0);
            tx.append(e);
            Ok::<_, StoreError>(())
        })
        .unwrap();
}

fn snapshot_of(store: &Store) -> Tables {
    store.read(|s| s.tables().clone())
}

fn opts() -> StoreOptions {
    StoreOptions { durability: Durability::Full, verify_full: true }
}

#[test]
fn lifecycle_commits_and_counts() {
    let store = Store::in_memory(opts());
    add_machine(&store, 0);
    submit(&store, 1).unwrap();
    do_match(&store, 1, 0, 10).unwrap();
    start(&store, 1, 0, 20);
    complete(&store, 1, 0, 30);
    store.read(|s| {
        assert!(s.tables().jobs.is_empty());
        assert_eq!(s.submitted_count(), 1);
        assert_eq!(s.terminal_count(), 1);
        assert_eq!(s.tables().history.len(), 4);
        assert_eq!(s.machine(&VmId::new("h", 0)).unwrap().state, MachineState::Unclaimed);
    });
    assert_eq!(store.txn_count(), 5);
}

#[test]
fn empty_transaction_commits() {
    let store = Store::in_memory(opts());
    let before = snapshot_of(&store);
    let ack = store.execute_txn(vec![]).unwrap();
    assert_eq!(ack.first_lsn, ack.last_lsn);
    assert_eq!(snapshot_of(&store), before);
}

#[test]
fn key_conflict_rolls_back_everything() {
    let store = Store::in_memory(opts());
    submit(&store, 1).unwrap();
    let before = snapshot_of(&store);
    let err = submit(&store, 1).unwrap_err();
    assert!(matches!(err, StoreError::KeyConflict(_)), "{err}");
    assert_eq!(snapshot_of(&store), before);

    let err = store.execute_txn(vec![TupleOp::insert_machine(machine(0)), TupleOp::delete_job(JobId(99))]);
    assert!(matches!(err, Err(StoreError::KeyConflict(_))));
    assert!(store.read(|s| s.tables().machines.is_empty()));
}

#[test]
fn match_without_state_update_is_rejected() {
    let store = Store::in_memory(opts());
    add_machine(&store, 0);
    submit(&store, 1).unwrap();
    let before = snapshot_of(&store);
    let err = store
        .execute_txn(vec![TupleOp::insert_match(MatchRecord {
            job_id: JobId(1),
            vm_id: VmId::new("h", 0),
            created_at: Timestamp(1),
            expires_at: Timestamp(2),
        })])
        .unwrap_err();
    assert!(matches!(err, StoreError::InvariantViolation(_)), "{err}");
    assert_eq!(snapshot_of(&store), before);
    assert_eq!(store.read(|s| s.idle_count()), 1);
}

#[test]
fn one_match_per_machine() {
    let store = Store::in_memory(opts());
    add_machine(&store, 0);
    submit(&store, 1).unwrap();
    submit(&store, 2).unwrap();
    do_match(&store, 1, 0, 10).unwrap();
    let before = snapshot_of(&store);
    assert!(do_match(&store, 2, 0, 11).is_err());
    assert_eq!(snapshot_of(&store), before);
    store.read(|s| s.check_full()).unwrap();
}

#[test]
fn deleting_job_without_terminal_event_breaks_conservation() {
    let store = Store::in_memory(opts());
    submit(&store, 1).unwrap();
    let err = store.execute_txn(vec![TupleOp::delete_job(JobId(1))]).unwrap_err();
    assert!(matches!(err, StoreError::InvariantViolation(ref m) if m.contains("conservation")), "{err}");
}

#[test]
fn history_is_append_only_and_ordered() {
    let store = Store::in_memory(opts());
    submit(&store, 1).unwrap();
    let e = HistoryEvent::job(JobId(1), HistoryKind::Matched, Timestamp(5));
    let update = TupleOp { kind: OpKind::Update, ..TupleOp::append_history(0, e.clone()) };
    assert!(store.execute_txn(vec![update]).is_err());
    let delete = TupleOp { kind: OpKind::Delete, relation: Relation::History, key: Key::Seq(0), value: None };
    assert!(store.execute_txn(vec![delete]).is_err());
    // wrong sequence number
    assert!(store.execute_txn(vec![TupleOp::append_history(7, e)]).is_err());
    // first event of an unknown job must be SUBMITTED
    let stray = HistoryEvent::job(JobId(9), HistoryKind::Started, Timestamp(5));
    assert!(store.execute_txn(vec![TupleOp::append_history(1, stray)]).is_err());
    // timestamps never go backwards within a job
    let back = HistoryEvent::job(JobId(1), HistoryKind::Dropped, Timestamp(0));
    assert!(store.execute_txn(vec![TupleOp::append_history(1, back)]).is_err());
    assert_eq!(store.read(|s| s.next_history_seq()), 1);
}

#[test]
fn retry_count_must_track_drops() {
    let store = Store::in_memory(opts());
    submit(&store, 1).unwrap();
    let drop_ev = HistoryEvent::job(JobId(1), HistoryKind::Dropped, Timestamp(9));
    assert!(store.execute_txn(vec![TupleOp::append_history(1, drop_ev.clone())]).is_err());
    let mut j = job(1);
    j.retry_count = 1;
    store.execute_txn(vec![TupleOp::update_job(j), TupleOp::append_history(1, drop_ev)]).unwrap();
}

#[test]
fn token_index_and_rollback() {
    let store = Store::in_memory(opts());
    let mut e = HistoryEvent::job(JobId(1), HistoryKind::Submitted, Timestamp(1));
    e.token = Some("t".into());
    store.execute_txn(vec![TupleOp::insert_job(job(1)), TupleOp::append_history(0, e)]).unwrap();
    assert_eq!(store.read(|s| s.jobs_for_token("t").map(<[JobId]>::to_vec)), Some(vec![JobId(1)]));
    let mut e2 = HistoryEvent::job(JobId(2), HistoryKind::Submitted, Timestamp(2));
    e2.token = Some("u".into());
    // job 2 tuple missing: conservation fails, token index must roll back
    assert!(store.execute_txn(vec![TupleOp::append_history(1, e2)]).is_err());
    assert!(store.read(|s| s.jobs_for_token("u").is_none()));
    assert_eq!(store.read(|s| s.max_job_id()), 1);
}

#[test]
fn select_filters() {
    let store = Store::in_memory(opts());
    for i in 1..=4 {
        submit(&store, i).unwrap();
    }
    let even: Vec<JobRecord> = store.select(|j: &JobRecord| j.job_id.0.is_multiple_of(2));
    assert_eq!(even.iter().map(|j| j.job_id.0).collect::<Vec<_>>(), vec![2, 4]);
    let ids: Vec<u64> = store.read(|s| s.idle_jobs().map(|j| j.job_id.0).collect());
    assert_eq!(ids, vec![1, 2, 3, 4]);
}

#[test]
fn observer_sees_commits_in_order() {
    use std::sync::{Arc, Mutex as StdMutex};
    let store = Store::in_memory(opts());
    let seen = Arc::new(StdMutex::new(Vec::new()));
    let sink = seen.clone();
    store.set_observer(Some(Box::new(move |ack, ops| {
        sink.lock().unwrap().push((ack.txn_id, ops.iter().map(ToString::to_string).collect::<Vec<_>>()));
    })));
    submit(&store, 1).unwrap();
    let _ = submit(&store, 1);
    add_machine(&store, 0);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0].1, vec!["INSERT jobs", "APPEND history"]);
    assert_eq!(seen[1].1, vec!["INSERT machines"]);
    assert!(seen[0].0 < seen[1].0);
}

// --- durability -------------------------------------------------------------

fn workload(store: &Store, n: u64) {
    for slot in 0..3 {
        add_machine(store, slot);
    }
    for id in 1..=n {
        submit(store, id).unwrap();
        let slot = (id % 3) as u32;
        if store.read(|s| s.machine(&VmId::new("h", slot)).unwrap().state) == MachineState::Unclaimed {
            do_match(store, id, slot, 100 + id as i64).unwrap();
            start(store, id, slot, 200 + id as i64);
            if id % 2 == 0 {
                complete(store, id, slot, 300 + id as i64);
            }
        }
    }
}

#[test]
fn reopen_recovers_committed_state() {
    let dir = tempfile::tempdir().unwrap();
    let expected = {
        let store = Store::open(dir.path(), opts()).unwrap();
        workload(&store, 12);
        snapshot_of(&store)
    };
    let store = Store::open(dir.path(), opts()).unwrap();
    assert_eq!(snapshot_of(&store), expected);
    assert!(!store.recovery_report().discarded_tail);
    // lsns continue past the recovered ones
    let last = store.recovery_report().last_lsn;
    let ack = submit(&store, 100).unwrap();
    assert_eq!(ack.first_lsn, last + 1);
}

#[test]
fn torn_tail_is_discarded_and_appends_continue() {
    let dir = tempfile::tempdir().unwrap();
    let expected = {
        let store = Store::open(dir.path(), opts()).unwrap();
        workload(&store, 6);
        snapshot_of(&store)
    };
    let seg = journal::segment_path(dir.path(), 1);
    let mut f = OpenOptions::new().append(true).open(&seg).unwrap();
    // a whole op record for a transaction that never committed, then half a record
    let mut buf = Vec::new();
    Record::Op { lsn: 10_000, txn_id: 999, op: TupleOp::delete_job(JobId(1)) }.encode_into(&mut buf);
    f.write_all(&buf).unwrap();
    f.write_all(&buf[..buf.len() / 2]).unwrap();
    drop(f);

    let store = Store::open(dir.path(), opts()).unwrap();
    assert!(store.recovery_report().discarded_tail);
    assert_eq!(snapshot_of(&store), expected);
    submit(&store, 50).unwrap();
    let after = snapshot_of(&store);
    drop(store);
    let store = Store::open(dir.path(), opts()).unwrap();
    assert_eq!(snapshot_of(&store), after);
}

#[test]
fn interior_corruption_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = Store::open(dir.path(), opts()).unwrap();
        workload(&store, 6);
    }
    let seg = journal::segment_path(dir.path(), 1);
    let mut bytes = std::fs::read(&seg).unwrap();
    bytes[20] ^= 0xff;
    std::fs::write(&seg, &bytes).unwrap();
    match Store::open(dir.path(), opts()) {
        Err(StoreError::CorruptInterior { lsn }) => assert_eq!(lsn, 1),
        other => panic!("expected corrupt interior, got {other:?}"),
    }
    assert!(matches!(recover(dir.path()), Err(StoreError::CorruptInterior { .. })));
}

#[test]
fn checkpoint_then_replay_equals_pure_replay() {
    let plain = tempfile::tempdir().unwrap();
    let snapped = tempfile::tempdir().unwrap();
    let a = Store::open(plain.path(), opts()).unwrap();
    let b = Store::open(snapped.path(), opts()).unwrap();
    workload(&a, 10);
    workload(&b, 10);
    let w = b.checkpoint().unwrap();
    for id in 11..=15 {
        submit(&a, id).unwrap();
        submit(&b, id).unwrap();
    }
    drop((a, b));
    let ra = recover(plain.path()).unwrap();
    let rb = recover(snapped.path()).unwrap();
    assert_eq!(ra, rb);
    let reopened = Store::open(snapped.path(), opts()).unwrap();
    assert_eq!(reopened.recovery_report().snapshot_lsn, Some(w));
    assert_eq!(reopened.recovery_report().replayed_txns, 5);
    // the superseded segment is gone
    assert!(!journal::segment_path(snapped.path(), 1).exists());
}

#[test]
fn consecutive_checkpoints_differ_only_in_watermark() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), opts()).unwrap();
    workload(&store, 5);
    let w1 = store.checkpoint().unwrap();
    let s1 = journal::read_snapshot(&journal::snapshot_path(dir.path(), w1)).unwrap();
    let w2 = store.checkpoint().unwrap();
    let s2 = journal::read_snapshot(&journal::snapshot_path(dir.path(), w2)).unwrap();
    assert_eq!(w1, w2);
    assert_eq!(s1.tables, s2.tables);
    submit(&store, 77).unwrap();
    let w3 = store.checkpoint().unwrap();
    assert!(w3 > w2);
    assert_eq!(journal::list_snapshots(dir.path()).unwrap().len(), 1);
}

#[test]
fn random_kill_points_recover_exact_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let mut prefixes = Vec::new();
    let mut offsets = Vec::new();
    {
        let store = Store::open(dir.path(), opts()).unwrap();
        prefixes.push(snapshot_of(&store));
        offsets.push(0u64);
        for slot in 0..2 {
            add_machine(&store, slot);
            prefixes.push(snapshot_of(&store));
            offsets.push(std::fs::metadata(journal::segment_path(dir.path(), 1)).unwrap().len());
        }
        for id in 1..=15 {
            submit(&store, id).unwrap();
            prefixes.push(snapshot_of(&store));
            offsets.push(std::fs::metadata(journal::segment_path(dir.path(), 1)).unwrap().len());
        }
    }
    let full = std::fs::read(journal::segment_path(dir.path(), 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..60 {
        let cut = rng.gen_range(0..=full.len());
        let kill = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(kill.path().join(JOURNAL_DIR)).unwrap();
        std::fs::write(journal::segment_path(kill.path(), 1), &full[..cut]).unwrap();
        let expected_idx = offsets.iter().rposition(|o| *o <= cut as u64).unwrap();
        let store = Store::open(kill.path(), opts()).unwrap();
        assert_eq!(snapshot_of(&store), prefixes[expected_idx], "cut at {cut}");
        // the store keeps working after recovery
        submit(&store, 1000).unwrap();
    }
}

#[test]
fn batched_commits_survive_after_sync() {
    let dir = tempfile::tempdir().unwrap();
    let expected = {
        let store = Store::open(
            dir.path(),
            StoreOptions { durability: Durability::Batched(Duration::from_millis(50)), verify_full: false },
        )
        .unwrap();
        workload(&store, 8);
        store.sync().unwrap();
        snapshot_of(&store)
    };
    assert_eq!(recover(dir.path()).unwrap(), expected);
}

#[test]
fn reals_survive_snapshot_and_journal_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), opts()).unwrap();
    let mut j = job(1);
    // shortest decimal form that a non-exact parser rounds to the wrong neighbour
    j.duration_s = 136.40421596333059;
    store
        .transact(|tx| {
            tx.push(TupleOp::insert_job(j.clone()));
            tx.append(HistoryEvent::job(JobId(1), HistoryKind::Submitted, Timestamp(1)));
            Ok::<_, StoreError>(())
        })
        .unwrap();
    let from_journal = recover(dir.path()).unwrap();
    store.checkpoint().unwrap();
    let from_snapshot = recover(dir.path()).unwrap();
    for tables in [from_journal, from_snapshot] {
        assert_eq!(tables.jobs[&JobId(1)].duration_s.to_bits(), j.duration_s.to_bits());
    }
}
