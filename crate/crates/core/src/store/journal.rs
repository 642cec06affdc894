//! Segmented write-ahead journal and snapshot files.
//!
//! Record framing: `[len: u32 LE][body][crc32(len ++ body): u32 LE]`.
//! Body: `lsn u64 LE`, `txn_id u64 LE`, a tag byte, then either a JSON
//! encoded [`TupleOp`] (tag 0) or the op count as `u32 LE` (tag 1, commit).

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::state::Tables;
use super::{StoreError, TupleOp};

const TAG_OP: u8 = 0;
const TAG_COMMIT: u8 = 1;
const HEADER: usize = 8 + 8 + 1;
/// Upper bound on a single record body; anything larger is treated as garbage.
const MAX_BODY: u32 = 64 << 20;

pub const JOURNAL_DIR: &str = "journal";
pub const SNAPSHOT_DIR: &str = "snapshot";

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Op { lsn: u64, txn_id: u64, op: TupleOp },
    Commit { lsn: u64, txn_id: u64, ops: u32 },
}

impl Record {
    pub fn lsn(&self) -> u64 {
        match self {
            Record::Op { lsn, .. } | Record::Commit { lsn, .. } => *lsn,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let mut body = Vec::with_capacity(64);
        match self {
            Record::Op { lsn, txn_id, op } => {
                body.extend_from_slice(&lsn.to_le_bytes());
                body.extend_from_slice(&txn_id.to_le_bytes());
                body.push(TAG_OP);
                serde_json::to_writer(&mut body, op).expect("tuple ops always serialize");
            }
            Record::Commit { lsn, txn_id, ops } => {
                body.extend_from_slice(&lsn.to_le_bytes());
                body.extend_from_slice(&txn_id.to_le_bytes());
                body.push(TAG_COMMIT);
                body.extend_from_slice(&ops.to_le_bytes());
            }
        }
        let len = (body.len() as u32).to_le_bytes();
        let mut crc = crc32fast::Hasher::new();
        crc.update(&len);
        crc.update(&body);
        out.extend_from_slice(&len);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.finalize().to_le_bytes());
    }
}

#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Decoded {
    Record(Record, usize),
    /// Not enough bytes left for a whole record.
    Truncated,
    /// Length, checksum or body did not verify.
    Corrupt,
}

/// Decodes one record from the front of `buf`.
pub fn decode(buf: &[u8]) -> Decoded {
    if buf.len() < 4 {
        return Decoded::Truncated;
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap());
    if len > MAX_BODY || (len as usize) < HEADER {
        return Decoded::Corrupt;
    }
    let total = 4 + len as usize + 4;
    if buf.len() < total {
        return Decoded::Truncated;
    }
    let body = &buf[4..4 + len as usize];
    let stored = u32::from_le_bytes(buf[total - 4..total].try_into().unwrap());
    let mut crc = crc32fast::Hasher::new();
    crc.update(&buf[..4]);
    crc.update(body);
    if crc.finalize() != stored {
        return Decoded::Corrupt;
    }
    let lsn = u64::from_le_bytes(body[..8].try_into().unwrap());
    let txn_id = u64::from_le_bytes(body[8..16].try_into().unwrap());
    let rest = &body[HEADER..];
    let rec = match body[16] {
        TAG_OP => match serde_json::from_slice(rest) {
            Ok(op) => Record::Op { lsn, txn_id, op },
            Err(_) => return Decoded::Corrupt,
        },
        TAG_COMMIT if rest.len() == 4 => {
            Record::Commit { lsn, txn_id, ops: u32::from_le_bytes(rest.try_into().unwrap()) }
        }
        _ => return Decoded::Corrupt,
    };
    Decoded::Record(rec, total)
}

pub fn segment_path(dir: &Path, n: u64) -> PathBuf {
    dir.join(JOURNAL_DIR).join(format!("segment-{n}.log"))
}

pub fn snapshot_path(dir: &Path, lsn: u64) -> PathBuf {
    dir.join(SNAPSHOT_DIR).join(format!("state-{lsn}.snap"))
}

fn numbered(dir: &Path, prefix: &str, suffix: &str) -> io::Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e),
    };
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(n) = name.strip_prefix(prefix).and_then(|r| r.strip_suffix(suffix)) {
            if let Ok(n) = n.parse::<u64>() {
                out.push((n, entry.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn list_segments(dir: &Path) -> io::Result<Vec<(u64, PathBuf)>> {
    numbered(&dir.join(JOURNAL_DIR), "segment-", ".log")
}

pub fn list_snapshots(dir: &Path) -> io::Result<Vec<(u64, PathBuf)>> {
    numbered(&dir.join(SNAPSHOT_DIR), "state-", ".snap")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub lsn: u64,
    pub next_txn_id: u64,
    pub tables: Tables,
}

/// Writes a snapshot atomically: temp file, fsync, rename, fsync directory.
pub fn write_snapshot(dir: &Path, snap: &Snapshot) -> io::Result<PathBuf> {
    let snap_dir = dir.join(SNAPSHOT_DIR);
    fs::create_dir_all(&snap_dir)?;
    let body = serde_json::to_vec(snap).map_err(io::Error::other)?;
    let len = (body.len() as u64).to_le_bytes();
    let mut crc = crc32fast::Hasher::new();
    crc.update(&len);
    crc.update(&body);
    let final_path = snapshot_path(dir, snap.lsn);
    let tmp = final_path.with_extension("snap.tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&len)?;
        f.write_all(&body)?;
        f.write_all(&crc.finalize().to_le_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &final_path)?;
    sync_dir(&snap_dir)?;
    Ok(final_path)
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, StoreError> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let bad = || StoreError::CorruptSnapshot(path.display().to_string());
    if buf.len() < 12 {
        return Err(bad());
    }
    let len = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
    if buf.len() != 8 + len + 4 {
        return Err(bad());
    }
    let mut crc = crc32fast::Hasher::new();
    crc.update(&buf[..8]);
    crc.update(&buf[8..8 + len]);
    if crc.finalize() != u32::from_le_bytes(buf[8 + len..].try_into().unwrap()) {
        return Err(bad());
    }
    serde_json::from_slice(&buf[8..8 + len]).map_err(|_| bad())
}

pub fn sync_dir(dir: &Path) -> io::Result<()> {
    // Directory fsync is not supported everywhere; best effort.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

/// Append handle on the newest segment.
#[derive(Debug)]
pub struct SegmentWriter {
    pub number: u64,
    pub file: File,
    pub len: u64,
}

impl SegmentWriter {
    pub fn open(dir: &Path, number: u64, len: u64) -> io::Result<Self> {
        fs::create_dir_all(dir.join(JOURNAL_DIR))?;
        let path = segment_path(dir, number);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if file.metadata()?.len() != len {
            file.set_len(len)?;
        }
        Ok(SegmentWriter { number, file, len })
    }

    /// Appends `bytes`; on failure the segment is cut back to its old length
    /// so a failed write never leaves garbage ahead of later commits.
    pub fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        match self.file.write_all(bytes) {
            Ok(()) => {
                self.len += bytes.len() as u64;
                Ok(())
            }
            Err(e) => {
                let _ = self.file.set_len(self.len);
                Err(e)
            }
        }
    }
}

/// Location of the byte just past the last committed record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TailPosition {
    pub segment: u64,
    pub offset: u64,
}

/// A fully parsed journal: the committed transactions in lsn order.
#[derive(Debug)]
pub struct JournalScan {
    pub committed: Vec<(u64, Vec<TupleOp>)>,
    pub last_lsn: u64,
    pub last_txn_id: u64,
    /// Where the next append should go; `None` when there are no segments.
    pub tail: Option<TailPosition>,
    /// Segments that lie entirely beyond the tail and should be removed.
    pub orphan_segments: Vec<PathBuf>,
    /// True when bytes after the tail were discarded.
    pub discarded_tail: bool,
}

/// Reads every segment, keeping transactions that committed after `after_lsn`.
///
/// A bad record followed by no further valid commit is a torn tail and is
/// discarded. A bad record followed by a later valid commit is interior
/// corruption and fails recovery.
pub fn scan(dir: &Path, after_lsn: u64) -> Result<JournalScan, StoreError> {
    let segments = list_segments(dir)?;
    let mut out = JournalScan {
        committed: Vec::new(),
        last_lsn: after_lsn,
        last_txn_id: 0,
        tail: None,
        orphan_segments: Vec::new(),
        discarded_tail: false,
    };
    let mut pending: Vec<TupleOp> = Vec::new();
    let mut pending_txn: Option<u64> = None;
    let mut expected_lsn: Option<u64> = None;
    let mut broken_at: Option<u64> = None;

    for (number, path) in &segments {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        if let Some(lsn) = broken_at {
            if has_valid_commit(&buf) {
                return Err(StoreError::CorruptInterior { lsn });
            }
            out.orphan_segments.push(path.clone());
            continue;
        }
        let mut pos = 0usize;
        if pending_txn.is_none() {
            out.tail = Some(TailPosition { segment: *number, offset: 0 });
        }
        loop {
            if pos == buf.len() {
                break;
            }
            match decode(&buf[pos..]) {
                Decoded::Record(rec, used) => {
                    let lsn = rec.lsn();
                    if let Some(exp) = expected_lsn {
                        if lsn != exp {
                            // A gap means a record went missing; only a tail may be lost.
                            broken_at = Some(exp);
                            if has_valid_commit(&buf[pos..]) {
                                return Err(StoreError::CorruptInterior { lsn: exp });
                            }
                            break;
                        }
                    }
                    expected_lsn = Some(lsn + 1);
                    pos += used;
                    match rec {
                        Record::Op { txn_id, op, .. } => {
                            if pending_txn.is_some_and(|t| t != txn_id) {
                                // An earlier transaction never committed.
                                pending.clear();
                            }
                            pending_txn = Some(txn_id);
                            pending.push(op);
                        }
                        Record::Commit { txn_id, ops, lsn } => {
                            let belongs = pending_txn.is_none_or(|t| t == txn_id);
                            if !belongs || ops as usize != pending.len() {
                                broken_at = Some(lsn);
                                if has_valid_commit(&buf[pos..]) {
                                    return Err(StoreError::CorruptInterior { lsn });
                                }
                                break;
                            }
                            let ops_vec = std::mem::take(&mut pending);
                            pending_txn = None;
                            if lsn > after_lsn {
                                out.committed.push((lsn, ops_vec));
                            }
                            out.last_lsn = out.last_lsn.max(lsn);
                            out.last_txn_id = out.last_txn_id.max(txn_id);
                            out.tail = Some(TailPosition { segment: *number, offset: pos as u64 });
                        }
                    }
                }
                Decoded::Truncated | Decoded::Corrupt => {
                    let at = expected_lsn.unwrap_or(after_lsn + 1);
                    broken_at = Some(at);
                    if has_valid_commit_after_garbage(&buf[pos..]) {
                        return Err(StoreError::CorruptInterior { lsn: at });
                    }
                    break;
                }
            }
        }
    }
    if let Some(tail) = out.tail {
        // Anything after the last commit is either torn or uncommitted.
        let seg_len = segments
            .iter()
            .find(|(n, _)| *n == tail.segment)
            .and_then(|(_, p)| fs::metadata(p).ok())
            .map_or(0, |m| m.len());
        out.discarded_tail = seg_len > tail.offset || !out.orphan_segments.is_empty();
        for (n, p) in &segments {
            if *n > tail.segment && !out.orphan_segments.contains(p) {
                out.orphan_segments.push(p.clone());
                out.discarded_tail = true;
            }
        }
    }
    Ok(out)
}

fn has_valid_commit(buf: &[u8]) -> bool {
    let mut pos = 0;
    while pos < buf.len() {
        match decode(&buf[pos..]) {
            Decoded::Record(Record::Commit { .. }, _) => return true,
            Decoded::Record(_, used) => pos += used,
            _ => return has_valid_commit_after_garbage(&buf[pos..]),
        }
    }
    false
}

/// Looks for any decodable commit record at any byte offset past a bad spot.
fn has_valid_commit_after_garbage(buf: &[u8]) -> bool {
    (1..buf.len()).any(|start| matches!(decode(&buf[start..]), Decoded::Record(Record::Commit { .. }, _)))
}
