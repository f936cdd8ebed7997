//! Durable offline queue of undelivered telemetry.
//!
//! The log file is a sequence of frames:
//!
//! ```text
//! u32 BE uncompressed length | u32 BE compressed length | DEFLATE payload
//! ```
//!
//! where the inflated payload is newline-separated `seq,iso8601,topic,payload`
//! lines. A sidecar `<log>.meta` file holds the first unacknowledged seq and
//! the seq lease, so acknowledged records are skipped after a reopen.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Publisher, TelemetryRecord, Topic, TransportError};

pub const BACKLOG_FILE: &str = "telemetry.backlog";

const FRAME_HEADER: usize = 8;
const SEQ_LEASE: u64 = 1024;
// Upper bound on a single frame; anything larger is treated as garbage.
const MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum BacklogError {
    #[error("backlog storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error("record seq {seq} is not greater than last stored seq {last}")]
    NonMonotonicSeq { seq: u64, last: u64 },
    #[error("record {seq} cannot be framed: {reason}")]
    Unencodable { seq: u64, reason: &'static str },
}

/// How hard `append` pushes bytes toward the disk before returning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncPolicy {
    /// Write to the OS; survives process death.
    Flush,
    /// `fdatasync` after every append; survives power loss.
    #[default]
    Fsync,
}

/// What `open` found on disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Recovery {
    pub frames: usize,
    pub records: usize,
    pub already_acked: usize,
    /// Bytes cut from an incomplete final frame.
    pub torn_bytes: u64,
    /// Complete frames that failed to inflate or parse.
    pub corrupt_frames: usize,
}

#[derive(Debug, Default)]
pub struct DrainOutcome {
    pub delivered: usize,
    pub error: Option<TransportError>,
}

#[derive(Debug, Serialize, Deserialize, Default, Clone, Copy)]
struct Meta {
    first_unacked: u64,
    seq_lease: u64,
}

#[derive(Debug)]
struct Inner {
    path: PathBuf,
    meta_path: PathBuf,
    file: File,
    meta: Meta,
    pending: VecDeque<TelemetryRecord>,
    last_seq: Option<u64>,
    next_seq: u64,
    sync: SyncPolicy,
    write_fault: bool,
}

/// Append-only compressed backlog. Internally serialized, so one producer
/// and one consumer may share it.
#[derive(Debug)]
pub struct BacklogStore {
    inner: Mutex<Inner>,
}

pub(crate) fn encode_line(r: &TelemetryRecord, out: &mut Vec<u8>) -> Result<(), BacklogError> {
    if r.topic.as_str().contains([',', '\n']) {
        return Err(BacklogError::Unencodable {
            seq: r.seq,
            reason: "topic contains ',' or newline",
        });
    }
    if r.payload.contains(&b'\n') {
        return Err(BacklogError::Unencodable {
            seq: r.seq,
            reason: "payload contains newline",
        });
    }
    out.extend_from_slice(r.seq.to_string().as_bytes());
    out.push(b',');
    out.extend_from_slice(
        r.timestamp
            .to_rfc3339_opts(SecondsFormat::Secs, true)
            .as_bytes(),
    );
    out.push(b',');
    out.extend_from_slice(r.topic.as_str().as_bytes());
    out.push(b',');
    out.extend_from_slice(&r.payload);
    Ok(())
}

fn decode_line(line: &[u8]) -> Option<TelemetryRecord> {
    let mut parts = line.splitn(4, |&b| b == b',');
    let seq = std::str::from_utf8(parts.next()?).ok()?.parse().ok()?;
    let ts: DateTime<Utc> = std::str::from_utf8(parts.next()?).ok()?.parse().ok()?;
    let topic = std::str::from_utf8(parts.next()?).ok()?.to_string();
    let payload = parts.next()?.to_vec();
    Some(TelemetryRecord {
        seq,
        topic: Topic::from_raw(topic),
        payload,
        timestamp: ts,
    })
}

/// Encodes records as one framed, compressed batch.
pub fn encode_frame(records: &[TelemetryRecord]) -> Result<Vec<u8>, BacklogError> {
    let mut raw = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if i > 0 {
            raw.push(b'\n');
        }
        encode_line(r, &mut raw)?;
    }
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&raw)?;
    let compressed = enc.finish()?;
    let mut frame = Vec::with_capacity(FRAME_HEADER + compressed.len());
    frame.extend_from_slice(&(raw.len() as u32).to_be_bytes());
    frame.extend_from_slice(&(compressed.len() as u32).to_be_bytes());
    frame.extend_from_slice(&compressed);
    Ok(frame)
}

fn decode_payload(raw_len: u32, compressed: &[u8]) -> Option<Vec<TelemetryRecord>> {
    let mut raw = Vec::with_capacity(raw_len as usize);
    DeflateDecoder::new(compressed).read_to_end(&mut raw).ok()?;
    if raw.len() != raw_len as usize {
        return None;
    }
    if raw.is_empty() {
        return Some(Vec::new());
    }
    raw.split(|&b| b == b'\n').map(decode_line).collect()
}

/// Walks the frames in `bytes`. Returns the records, the byte offset where
/// valid data ends, and what was skipped.
pub fn decode_frames(bytes: &[u8]) -> (Vec<TelemetryRecord>, usize, Recovery) {
    let mut records = Vec::new();
    let mut rec = Recovery::default();
    let mut pos = 0;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if rest.len() < FRAME_HEADER {
            break;
        }
        let raw_len = u32::from_be_bytes(rest[0..4].try_into().unwrap());
        let comp_len = u32::from_be_bytes(rest[4..8].try_into().unwrap());
        if raw_len > MAX_FRAME || comp_len > MAX_FRAME {
            break;
        }
        let end = FRAME_HEADER + comp_len as usize;
        if rest.len() < end {
            break;
        }
        match decode_payload(raw_len, &rest[FRAME_HEADER..end]) {
            Some(batch) => {
                rec.frames += 1;
                records.extend(batch);
            }
            None => rec.corrupt_frames += 1,
        }
        pos += end;
    }
    rec.torn_bytes = (bytes.len() - pos) as u64;
    (records, pos, rec)
}

impl BacklogStore {
    /// Opens (creating if needed) the backlog at `path`, recovering every
    /// complete frame and discarding a torn tail.
    pub fn open(path: impl AsRef<Path>, sync: SyncPolicy) -> Result<(Self, Recovery), BacklogError> {
        let path = path.as_ref().to_path_buf();
        let mut meta_path = path.clone().into_os_string();
        meta_path.push(".meta");
        let meta_path = PathBuf::from(meta_path);

        let meta: Meta = match std::fs::read(&meta_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|e| {
                log::warn!("ignoring unreadable backlog meta {}: {e}", meta_path.display());
                Meta::default()
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Meta::default(),
            Err(e) => return Err(e.into()),
        };

        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (records, valid_end, mut recovery) = decode_frames(&bytes);
        if recovery.torn_bytes > 0 {
            log::warn!(
                "backlog {}: discarding {} byte torn tail",
                path.display(),
                recovery.torn_bytes
            );
            file.set_len(valid_end as u64)?;
            file.sync_all()?;
        }
        if recovery.corrupt_frames > 0 {
            log::warn!(
                "backlog {}: skipped {} corrupt frame(s)",
                path.display(),
                recovery.corrupt_frames
            );
        }

        let last_in_file = records.last().map(|r| r.seq);
        recovery.records = records.len();
        let pending: VecDeque<_> = records
            .into_iter()
            .filter(|r| r.seq >= meta.first_unacked)
            .collect();
        recovery.already_acked = recovery.records - pending.len();

        let last_seq = match (last_in_file, meta.first_unacked.checked_sub(1)) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        let next_seq = meta
            .seq_lease
            .max(last_seq.map_or(1, |s| s + 1))
            .max(1);

        let mut inner = Inner {
            path,
            meta_path,
            file,
            meta,
            pending,
            last_seq,
            next_seq,
            sync,
            write_fault: false,
        };
        inner.meta.seq_lease = next_seq + SEQ_LEASE;
        inner.write_meta()?;
        Ok((
            BacklogStore {
                inner: Mutex::new(inner),
            },
            recovery,
        ))
    }

    pub fn path(&self) -> PathBuf {
        self.inner.lock().unwrap().path.clone()
    }

    /// Hands out the next device-wide sequence number. Numbers are leased
    /// in blocks so they keep increasing across restarts.
    pub fn next_seq(&self) -> Result<u64, BacklogError> {
        let mut inner = self.inner.lock().unwrap();
        let seq = inner.next_seq;
        inner.next_seq += 1;
        if inner.next_seq >= inner.meta.seq_lease {
            inner.meta.seq_lease = inner.next_seq + SEQ_LEASE;
            inner.write_meta()?;
        }
        Ok(seq)
    }

    /// Appends one record as its own frame. Durable when this returns.
    pub fn append(&self, record: &TelemetryRecord) -> Result<(), BacklogError> {
        self.append_batch(std::slice::from_ref(record))
    }

    /// Appends several records as a single frame.
    pub fn append_batch(&self, records: &[TelemetryRecord]) -> Result<(), BacklogError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut inner = self.inner.lock().unwrap();
        let mut last = inner.last_seq;
        for r in records {
            if let Some(l) = last {
                if r.seq <= l {
                    return Err(BacklogError::NonMonotonicSeq { seq: r.seq, last: l });
                }
            }
            last = Some(r.seq);
        }
        let frame = encode_frame(records)?;
        if inner.write_fault {
            return Err(BacklogError::Storage(io::Error::other(
                "injected storage fault",
            )));
        }
        inner.file.write_all(&frame)?;
        match inner.sync {
            SyncPolicy::Flush => inner.file.flush()?,
            SyncPolicy::Fsync => inner.file.sync_data()?,
        }
        inner.last_seq = last;
        if let Some(l) = last {
            if l >= inner.next_seq {
                inner.next_seq = l + 1;
            }
        }
        inner.pending.extend(records.iter().cloned());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last_seq(&self) -> Option<u64> {
        self.inner.lock().unwrap().last_seq
    }

    /// Unacknowledged records, oldest first.
    pub fn pending(&self) -> Vec<TelemetryRecord> {
        self.inner.lock().unwrap().pending.iter().cloned().collect()
    }

    /// Marks every record with seq ≤ `seq` as delivered. Once the queue is
    /// empty the log is truncated.
    pub fn ack_through(&self, seq: u64) -> Result<(), BacklogError> {
        let mut inner = self.inner.lock().unwrap();
        if seq < inner.meta.first_unacked {
            return Ok(());
        }
        inner.meta.first_unacked = seq + 1;
        inner.write_meta()?;
        while inner.pending.front().is_some_and(|r| r.seq <= seq) {
            inner.pending.pop_front();
        }
        if inner.pending.is_empty() {
            inner.file.set_len(0)?;
            inner.file.sync_all()?;
        }
        Ok(())
    }

    /// Publishes queued records oldest-first, stopping at the first
    /// transport error. Delivered records are acknowledged before return.
    pub fn drain<P: Publisher + ?Sized>(&self, publisher: &mut P) -> Result<DrainOutcome, BacklogError> {
        let mut outcome = DrainOutcome::default();
        let mut acked: Option<u64> = None;
        loop {
            let next = self.inner.lock().unwrap().pending.get(outcome.delivered).cloned();
            let Some(record) = next else { break };
            match publisher.publish(&record) {
                Ok(()) => {
                    outcome.delivered += 1;
                    acked = Some(record.seq);
                }
                Err(e) => {
                    outcome.error = Some(e);
                    break;
                }
            }
        }
        if let Some(seq) = acked {
            self.ack_through(seq)?;
        }
        Ok(outcome)
    }

    /// Makes every later write fail, as if the medium had died.
    pub fn set_write_fault(&self, on: bool) {
        self.inner.lock().unwrap().write_fault = on;
    }
}

impl Inner {
    fn write_meta(&mut self) -> io::Result<()> {
        if self.write_fault {
            return Err(io::Error::other("injected storage fault"));
        }
        let mut tmp = self.meta_path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(&self.meta).expect("meta serializes"))?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &self.meta_path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(seq: u64) -> TelemetryRecord {
        TelemetryRecord {
            seq,
            topic: Topic::from_raw("/usp/temp"),
            payload: format!("{}.{}", seq % 90, seq % 10).into_bytes(),
            timestamp: DateTime::from_timestamp(1_614_556_800 + seq as i64, 0).unwrap(),
        }
    }

    struct Scripted {
        ok_left: usize,
        seen: Vec<u64>,
    }

    impl Publisher for Scripted {
        fn publish(&mut self, r: &TelemetryRecord) -> Result<(), TransportError> {
            if self.ok_left == 0 {
                return Err(TransportError::Closed);
            }
            self.ok_left -= 1;
            self.seen.push(r.seq);
            Ok(())
        }
    }

    #[test]
    fn first_append_and_monotonic_guard() {
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = BacklogStore::open(dir.path().join(BACKLOG_FILE), SyncPolicy::Flush).unwrap();
        store.append(&rec(1)).unwrap();
        assert_eq!(store.pending(), vec![rec(1)]);
        assert!(matches!(
            store.append(&rec(1)),
            Err(BacklogError::NonMonotonicSeq { seq: 1, last: 1 })
        ));
    }

    #[test]
    fn thousand_records_survive_reopen_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(BACKLOG_FILE);
        let expected: Vec<_> = (1..=1000).map(rec).collect();
        {
            let (store, _) = BacklogStore::open(&path, SyncPolicy::Flush).unwrap();
            for r in &expected {
                store.append(r).unwrap();
            }
        }
        let (store, recovery) = BacklogStore::open(&path, SyncPolicy::Flush).unwrap();
        assert_eq!(recovery.frames, 1000);
        assert_eq!(recovery.torn_bytes, 0);
        assert_eq!(store.pending(), expected);
    }

    #[test]
    fn drain_in_order_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = BacklogStore::open(dir.path().join(BACKLOG_FILE), SyncPolicy::Flush).unwrap();
        let mut p = Scripted { ok_left: 10, seen: vec![] };
        assert_eq!(store.drain(&mut p).unwrap().delivered, 0);
        for s in 1..=3 {
            store.append(&rec(s)).unwrap();
        }
        let out = store.drain(&mut p).unwrap();
        assert_eq!(out.delivered, 3);
        assert!(out.error.is_none());
        assert_eq!(p.seen, vec![1, 2, 3]);
        assert!(store.is_empty());
    }

    #[test]
    fn partial_drain_retains_tail_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(BACKLOG_FILE);
        {
            let (store, _) = BacklogStore::open(&path, SyncPolicy::Flush).unwrap();
            for s in 1..=5 {
                store.append(&rec(s)).unwrap();
            }
            let mut p = Scripted { ok_left: 2, seen: vec![] };
            let out = store.drain(&mut p).unwrap();
            assert_eq!(out.delivered, 2);
            assert!(out.error.is_some());
            assert_eq!(store.pending(), vec![rec(3), rec(4), rec(5)]);
        }
        let (store, rec_info) = BacklogStore::open(&path, SyncPolicy::Flush).unwrap();
        assert_eq!(rec_info.already_acked, 2);
        assert_eq!(store.pending(), vec![rec(3), rec(4), rec(5)]);
    }

    #[test]
    fn full_drain_truncates_and_seq_keeps_rising() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(BACKLOG_FILE);
        let first;
        {
            let (store, _) = BacklogStore::open(&path, SyncPolicy::Flush).unwrap();
            first = store.next_seq().unwrap();
            store.append(&rec(first)).unwrap();
            store.drain(&mut Scripted { ok_left: 9, seen: vec![] }).unwrap();
            assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
        }
        let (store, _) = BacklogStore::open(&path, SyncPolicy::Flush).unwrap();
        assert!(store.is_empty());
        assert!(store.next_seq().unwrap() > first);
        assert!(matches!(store.append(&rec(first)), Err(BacklogError::NonMonotonicSeq { .. })));
    }

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(BACKLOG_FILE);
        {
            let (store, _) = BacklogStore::open(&path, SyncPolicy::Flush).unwrap();
            for s in 1..=3 {
                store.append(&rec(s)).unwrap();
            }
        }
        let full = std::fs::metadata(&path).unwrap().len();
        let f = OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(full - 3).unwrap();
        drop(f);
        let (store, recovery) = BacklogStore::open(&path, SyncPolicy::Flush).unwrap();
        assert!(recovery.torn_bytes > 0);
        assert_eq!(store.pending(), vec![rec(1), rec(2)]);
        // the store stays appendable after the cut
        store.append(&rec(4)).unwrap();
        drop(store);
        let (store, recovery) = BacklogStore::open(&path, SyncPolicy::Flush).unwrap();
        assert_eq!(recovery.torn_bytes, 0);
        assert_eq!(store.pending(), vec![rec(1), rec(2), rec(4)]);
    }

    #[test]
    fn frame_layout_is_length_prefixed_deflate() {
        let frame = encode_frame(&[rec(7)]).unwrap();
        let raw_len = u32::from_be_bytes(frame[0..4].try_into().unwrap()) as usize;
        let comp_len = u32::from_be_bytes(frame[4..8].try_into().unwrap()) as usize;
        assert_eq!(frame.len(), 8 + comp_len);
        let mut raw = Vec::new();
        DeflateDecoder::new(&frame[8..]).read_to_end(&mut raw).unwrap();
        assert_eq!(raw.len(), raw_len);
        assert_eq!(raw, b"7,2021-03-01T00:00:07Z,/usp/temp,7.7");
    }

    #[test]
    fn injected_fault_fails_appends() {
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = BacklogStore::open(dir.path().join(BACKLOG_FILE), SyncPolicy::Flush).unwrap();
        store.set_write_fault(true);
        assert!(matches!(store.append(&rec(1)), Err(BacklogError::Storage(_))));
        assert!(store.is_empty());
    }

    fn arb_record() -> impl Strategy<Value = TelemetryRecord> {
        (
            0i64..4_000_000_000,
            "/[a-z]{1,6}(/[a-z]{1,5}){0,2}",
            proptest::collection::vec(any::<u8>().prop_filter("no newline", |b| *b != b'\n'), 0..24),
        )
            .prop_map(|(ts, topic, payload)| TelemetryRecord {
                seq: 0,
                topic: Topic::from_raw(topic),
                payload,
                timestamp: DateTime::from_timestamp(ts, 0).unwrap(),
            })
    }

    proptest! {
        #[test]
        fn frame_roundtrip(mut records in proptest::collection::vec(arb_record(), 0..40), batch in 1usize..8) {
            for (i, r) in records.iter_mut().enumerate() {
                r.seq = i as u64 + 1;
            }
            let mut bytes = Vec::new();
            for chunk in records.chunks(batch) {
                bytes.extend(encode_frame(chunk).unwrap());
            }
            let (decoded, end, rec) = decode_frames(&bytes);
            prop_assert_eq!(end, bytes.len());
            prop_assert_eq!(rec.corrupt_frames, 0);
            prop_assert_eq!(decoded, records);
        }
    }
}
