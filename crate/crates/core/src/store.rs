//! On-disk embedding cache.
//!
//! A store is a directory with one record file per (session, view) and a
//! top-level `index.srlf`. All integers are little-endian.
//!
//! ```text
//! index.srlf
//!   0   magic "SRLF"
//!   4   version         u16 (= 1)
//!   6   kind            u8  (= 0, index)
//!   7   reserved        u8
//!   8   embed_dim       u32
//!   12  session_count   u32
//!   16  per session:    name_len u16, name (UTF-8), record_count u64 x 3 (one per view)
//!   ..  crc32           u32 over every preceding byte
//!
//! seg_<session_ref:06>_<view>.srlf
//!   0   magic "SRLF"
//!   4   version         u16 (= 1)
//!   6   kind            u8  (= 1, records)
//!   7   view_id         u8
//!   8   embed_dim       u32
//!   12  session_ref     u32 (position in the index session table)
//!   16  reserved        u32
//!   20  header crc32    u32 over bytes 0..20
//!   24  records, each 24 + 4 * embed_dim bytes:
//!         key_hash      u64 (FNV-1a of session name, 0x00, view_id, frame_index LE)
//!         session_ref   u32
//!         view_id       u8
//!         reserved      [u8; 3]
//!         frame_index   u32
//!         values        f32 x embed_dim (IEEE-754)
//!         crc32         u32 over the preceding record bytes
//! ```
//!
//! Records are appended as they are written. The index is rewritten with
//! a temp-file rename on [`EmbeddingStore::flush`]; a segment whose length
//! disagrees with the indexed record count is reported as corrupt.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::encoder::Embedding;
use crate::error::{Error, IoContext, Result};
use crate::util::{fnv1a64, write_atomic};

pub const MAGIC: &[u8; 4] = b"SRLF";
pub const VERSION: u16 = 1;
pub const NUM_VIEWS: usize = 3;
pub const INDEX_FILE: &str = "index.srlf";
const KIND_INDEX: u8 = 0;
const KIND_RECORDS: u8 = 1;
pub const SEGMENT_HEADER_LEN: u64 = 24;
const RECORD_PREFIX_LEN: usize = 20;

pub fn record_len(embed_dim: usize) -> usize {
    RECORD_PREFIX_LEN + 4 * embed_dim + 4
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EmbeddingKey {
    pub session: String,
    pub view_id: u8,
    pub frame_index: u32,
}

impl EmbeddingKey {
    pub fn new(session: impl Into<String>, view_id: u8, frame_index: u32) -> Self {
        EmbeddingKey {
            session: session.into(),
            view_id,
            frame_index,
        }
    }

    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.session.len() + 6);
        bytes.extend_from_slice(self.session.as_bytes());
        bytes.push(0);
        bytes.push(self.view_id);
        bytes.extend_from_slice(&self.frame_index.to_le_bytes());
        fnv1a64(&bytes)
    }
}

impl fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#view{}#frame{}", self.session, self.view_id, self.frame_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u16,
    pub embed_dim: u32,
    pub record_count: u64,
}

/// Frames of one session that have all three views, plus those that do not.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionScan {
    /// Ascending by frame index; `views[v]` is the view-`v` embedding.
    pub frames: Vec<(u32, [Vec<f32>; NUM_VIEWS])>,
    pub incomplete: Vec<u32>,
}

#[derive(Debug)]
struct Segment {
    path: PathBuf,
    /// frame_index -> byte offset of the record
    offsets: BTreeMap<u32, u64>,
    writer: Option<File>,
}

#[derive(Debug)]
pub struct EmbeddingStore {
    dir: PathBuf,
    embed_dim: usize,
    sessions: Vec<String>,
    session_refs: HashMap<String, u32>,
    segments: HashMap<(u32, u8), Segment>,
    dirty: bool,
    read_only: bool,
}

impl EmbeddingStore {
    /// Creates an empty store, or opens an existing one after checking that
    /// its dimension matches.
    pub fn open_or_create(dir: &Path, embed_dim: usize) -> Result<Self> {
        if dir.join(INDEX_FILE).exists() {
            let mut store = Self::open(dir)?;
            if store.embed_dim != embed_dim {
                return Err(Error::DimMismatch {
                    expected: store.embed_dim,
                    actual: embed_dim,
                });
            }
            store.read_only = false;
            return Ok(store);
        }
        if embed_dim == 0 {
            return Err(Error::Validation("embed_dim must be positive".into()));
        }
        fs::create_dir_all(dir).io_context(|| format!("creating store {}", dir.display()))?;
        let mut store = EmbeddingStore {
            dir: dir.to_path_buf(),
            embed_dim,
            sessions: Vec::new(),
            session_refs: HashMap::new(),
            segments: HashMap::new(),
            dirty: true,
            read_only: false,
        };
        store.flush()?;
        Ok(store)
    }

    /// Opens an existing store read-only.
    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let bytes = fs::read(&index_path).io_context(|| format!("reading store index {}", index_path.display()))?;
        let (embed_dim, entries) = parse_index(&bytes).map_err(|reason| Error::Integrity {
            path: index_path.clone(),
            reason,
        })?;
        let mut store = EmbeddingStore {
            dir: dir.to_path_buf(),
            embed_dim,
            sessions: Vec::with_capacity(entries.len()),
            session_refs: HashMap::with_capacity(entries.len()),
            segments: HashMap::new(),
            dirty: false,
            read_only: true,
        };
        for (session_ref, (name, counts)) in entries.into_iter().enumerate() {
            let session_ref = session_ref as u32;
            store.session_refs.insert(name.clone(), session_ref);
            store.sessions.push(name);
            for (view, &count) in counts.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                let path = store.segment_path(session_ref, view as u8);
                let offsets = store.load_segment_offsets(&path, session_ref, view as u8, count)?;
                store.segments.insert(
                    (session_ref, view as u8),
                    Segment {
                        path,
                        offsets,
                        writer: None,
                    },
                );
            }
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn len(&self) -> usize {
        self.segments.values().map(|s| s.offsets.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn header(&self) -> StoreHeader {
        StoreHeader {
            version: VERSION,
            embed_dim: self.embed_dim as u32,
            record_count: self.len() as u64,
        }
    }

    pub fn sessions(&self) -> &[String] {
        &self.sessions
    }

    pub fn contains(&self, key: &EmbeddingKey) -> bool {
        self.locate(key).is_some()
    }

    fn segment_path(&self, session_ref: u32, view: u8) -> PathBuf {
        self.dir.join(format!("seg_{session_ref:06}_{view}.srlf"))
    }

    fn locate(&self, key: &EmbeddingKey) -> Option<(&Segment, u64, u32)> {
        let &session_ref = self.session_refs.get(&key.session)?;
        let seg = self.segments.get(&(session_ref, key.view_id))?;
        seg.offsets.get(&key.frame_index).map(|&off| (seg, off, session_ref))
    }

    fn load_segment_offsets(&self, path: &Path, session_ref: u32, view: u8, count: u64) -> Result<BTreeMap<u32, u64>> {
        let integrity = |reason: String| Error::Integrity {
            path: path.to_path_buf(),
            reason,
        };
        let file = File::open(path).io_context(|| format!("opening segment {}", path.display()))?;
        let len = file.metadata().io_context(|| format!("stat {}", path.display()))?.len();
        let rec = record_len(self.embed_dim) as u64;
        let expected = SEGMENT_HEADER_LEN + count * rec;
        if len != expected {
            return Err(integrity(format!(
                "segment is {len} bytes, index implies {expected} ({count} records)"
            )));
        }
        let mut r = BufReader::new(file);
        let mut header = [0u8; SEGMENT_HEADER_LEN as usize];
        r.read_exact(&mut header).map_err(|e| integrity(e.to_string()))?;
        check_segment_header(&header, view, self.embed_dim, session_ref).map_err(integrity)?;
        let mut offsets = BTreeMap::new();
        let mut prefix = [0u8; RECORD_PREFIX_LEN];
        for i in 0..count {
            let off = SEGMENT_HEADER_LEN + i * rec;
            r.seek(SeekFrom::Start(off)).map_err(|e| integrity(e.to_string()))?;
            r.read_exact(&mut prefix).map_err(|e| integrity(e.to_string()))?;
            let rec_session = u32::from_le_bytes(prefix[8..12].try_into().unwrap());
            let rec_view = prefix[12];
            let frame = u32::from_le_bytes(prefix[16..20].try_into().unwrap());
            if rec_session != session_ref || rec_view != view {
                return Err(integrity(format!("record {i} belongs to another session or view")));
            }
            if offsets.insert(frame, off).is_some() {
                return Err(integrity(format!("frame {frame} stored twice")));
            }
        }
        Ok(offsets)
    }

    fn session_ref_or_insert(&mut self, session: &str) -> u32 {
        if let Some(&r) = self.session_refs.get(session) {
            return r;
        }
        let r = self.sessions.len() as u32;
        self.sessions.push(session.to_string());
        self.session_refs.insert(session.to_string(), r);
        self.dirty = true;
        r
    }

    pub fn put(&mut self, key: &EmbeddingKey, vec: &Embedding) -> Result<()> {
        self.put_values(key, vec.as_slice())
    }

    pub fn put_values(&mut self, key: &EmbeddingKey, values: &[f32]) -> Result<()> {
        if self.read_only {
            return Err(Error::Validation(format!("store {} is open read-only", self.dir.display())));
        }
        if values.len() != self.embed_dim {
            return Err(Error::DimMismatch {
                expected: self.embed_dim,
                actual: values.len(),
            });
        }
        if key.view_id as usize >= NUM_VIEWS {
            return Err(Error::Validation(format!("view id {} out of range", key.view_id)));
        }
        if self.contains(key) {
            return Err(Error::DuplicateKey(key.to_string()));
        }
        let session_ref = self.session_ref_or_insert(&key.session);
        let path = self.segment_path(session_ref, key.view_id);
        let embed_dim = self.embed_dim;
        let seg = self.segments.entry((session_ref, key.view_id)).or_insert_with(|| Segment {
            path,
            offsets: BTreeMap::new(),
            writer: None,
        });
        if seg.writer.is_none() {
            let fresh = !seg.path.exists();
            if !fresh {
                let expected = SEGMENT_HEADER_LEN + seg.offsets.len() as u64 * record_len(embed_dim) as u64;
                let len = fs::metadata(&seg.path).io_context(|| format!("stat {}", seg.path.display()))?.len();
                if len != expected {
                    return Err(Error::Integrity {
                        path: seg.path.clone(),
                        reason: format!("segment is {len} bytes, index implies {expected}"),
                    });
                }
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&seg.path)
                .io_context(|| format!("opening segment {}", seg.path.display()))?;
            if fresh {
                f.write_all(&segment_header(key.view_id, embed_dim, session_ref))
                    .io_context(|| format!("writing {}", seg.path.display()))?;
            }
            seg.writer = Some(f);
        }
        let offset = SEGMENT_HEADER_LEN + seg.offsets.len() as u64 * record_len(embed_dim) as u64;
        let mut rec = Vec::with_capacity(record_len(embed_dim));
        rec.extend_from_slice(&key.hash().to_le_bytes());
        rec.extend_from_slice(&session_ref.to_le_bytes());
        rec.push(key.view_id);
        rec.extend_from_slice(&[0, 0, 0]);
        rec.extend_from_slice(&key.frame_index.to_le_bytes());
        for v in values {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&rec);
        rec.extend_from_slice(&crc.to_le_bytes());
        seg.writer
            .as_mut()
            .unwrap()
            .write_all(&rec)
            .io_context(|| format!("appending to {}", seg.path.display()))?;
        seg.offsets.insert(key.frame_index, offset);
        self.dirty = true;
        Ok(())
    }

    /// Syncs segment files and atomically rewrites the index.
    pub fn flush(&mut self) -> Result<()> {
        if !self.dirty {
            return Ok(());
        }
        for seg in self.segments.values_mut() {
            if let Some(f) = seg.writer.as_mut() {
                f.sync_data().io_context(|| format!("syncing {}", seg.path.display()))?;
            }
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(KIND_INDEX);
        buf.push(0);
        buf.extend_from_slice(&(self.embed_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.sessions.len() as u32).to_le_bytes());
        for (r, name) in self.sessions.iter().enumerate() {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::Validation(format!("session name too long: {name}")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(bytes);
            for v in 0..NUM_VIEWS as u8 {
                let count = self.segments.get(&(r as u32, v)).map_or(0, |s| s.offsets.len() as u64);
                buf.extend_from_slice(&count.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        write_atomic(&self.dir.join(INDEX_FILE), &buf)?;
        self.dirty = false;
        Ok(())
    }

    /// Reads one vector; `Ok(None)` when the key is absent.
    pub fn get(&self, key: &EmbeddingKey) -> Result<Option<Embedding>> {
        let Some((seg, offset, session_ref)) = self.locate(key) else {
            return Ok(None);
        };
        let mut f = File::open(&seg.path).io_context(|| format!("opening {}", seg.path.display()))?;
        let mut rec = vec![0u8; record_len(self.embed_dim)];
        f.seek(SeekFrom::Start(offset))
            .and_then(|_| f.read_exact(&mut rec))
            .map_err(|e| Error::Integrity {
                path: seg.path.clone(),
                reason: format!("reading record for {key}: {e}"),
            })?;
        let values = self.decode_record(&rec, session_ref, key).map_err(|reason| Error::Integrity {
            path: seg.path.clone(),
            reason,
        })?;
        Ok(Some(Embedding::new(values).map_err(|e| Error::Integrity {
            path: seg.path.clone(),
            reason: e.to_string(),
        })?))
    }

    fn decode_record(&self, rec: &[u8], session_ref: u32, key: &EmbeddingKey) -> std::result::Result<Vec<f32>, String> {
        let body = rec.len() - 4;
        let stored = u32::from_le_bytes(rec[body..].try_into().unwrap());
        if crc32fast::hash(&rec[..body]) != stored {
            return Err(format!("checksum mismatch for {key}"));
        }
        let hash = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let rec_session = u32::from_le_bytes(rec[8..12].try_into().unwrap());
        let frame = u32::from_le_bytes(rec[16..20].try_into().unwrap());
        if hash != key.hash() || rec_session != session_ref || rec[12] != key.view_id || frame != key.frame_index {
            return Err(format!("record at the indexed offset does not match {key}"));
        }
        Ok(rec[RECORD_PREFIX_LEN..body]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    /// All frames of a session in ascending order. Frames missing any view
    /// land in `incomplete` instead.
    pub fn scan_session(&self, session: &str) -> Result<SessionScan> {
        let Some(&session_ref) = self.session_refs.get(session) else {
            return Ok(SessionScan::default());
        };
        let mut per_view: Vec<BTreeMap<u32, Vec<f32>>> = vec![BTreeMap::new(); NUM_VIEWS];
        for view in 0..NUM_VIEWS as u8 {
            let Some(seg) = self.segments.get(&(session_ref, view)) else {
                continue;
            };
            let bytes = fs::read(&seg.path).io_context(|| format!("reading {}", seg.path.display()))?;
            let rec_len = record_len(self.embed_dim);
            for (&frame, &off) in &seg.offsets {
                let start = off as usize;
                let rec = bytes.get(start..start + rec_len).ok_or_else(|| Error::Integrity {
                    path: seg.path.clone(),
                    reason: format!("record for frame {frame} is truncated"),
                })?;
                let key = EmbeddingKey::new(session, view, frame);
                let values = self.decode_record(rec, session_ref, &key).map_err(|reason| Error::Integrity {
                    path: seg.path.clone(),
                    reason,
                })?;
                per_view[view as usize].insert(frame, values);
            }
        }
        let mut all_frames: Vec<u32> = per_view.iter().flat_map(|m| m.keys().copied()).collect();
        all_frames.sort_unstable();
        all_frames.dedup();
        let mut scan = SessionScan::default();
        for frame in all_frames {
            if per_view.iter().all(|m| m.contains_key(&frame)) {
                let views = [0, 1, 2].map(|v| per_view[v].remove(&frame).unwrap());
                scan.frames.push((frame, views));
            } else {
                scan.incomplete.push(frame);
            }
        }
        Ok(scan)
    }
}

impl Drop for EmbeddingStore {
    fn drop(&mut self) {
        if !self.read_only && self.dirty {
            if let Err(e) = self.flush() {
                log::error!("flushing embedding store {} failed: {e}", self.dir.display());
            }
        }
    }
}

fn segment_header(view: u8, embed_dim: usize, session_ref: u32) -> [u8; SEGMENT_HEADER_LEN as usize] {
    let mut h = [0u8; SEGMENT_HEADER_LEN as usize];
    h[0..4].copy_from_slice(MAGIC);
    h[4..6].copy_from_slice(&VERSION.to_le_bytes());
    h[6] = KIND_RECORDS;
    h[7] = view;
    h[8..12].copy_from_slice(&(embed_dim as u32).to_le_bytes());
    h[12..16].copy_from_slice(&session_ref.to_le_bytes());
    let crc = crc32fast::hash(&h[0..20]);
    h[20..24].copy_from_slice(&crc.to_le_bytes());
    h
}

fn check_segment_header(h: &[u8], view: u8, embed_dim: usize, session_ref: u32) -> std::result::Result<(), String> {
    if crc32fast::hash(&h[0..20]) != u32::from_le_bytes(h[20..24].try_into().unwrap()) {
        return Err("segment header checksum mismatch".into());
    }
    if &h[0..4] != MAGIC || h[6] != KIND_RECORDS {
        return Err("not an SRLF record file".into());
    }
    let version = u16::from_le_bytes(h[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dim = u32::from_le_bytes(h[8..12].try_into().unwrap()) as usize;
    let sref = u32::from_le_bytes(h[12..16].try_into().unwrap());
    if h[7] != view || dim != embed_dim || sref != session_ref {
        return Err("segment header disagrees with the index".into());
    }
    Ok(())
}

type IndexEntries = Vec<(String, [u64; NUM_VIEWS])>;

fn parse_index(bytes: &[u8]) -> std::result::Result<(usize, IndexEntries), String> {
    if bytes.len() < 20 {
        return Err("index is truncated".into());
    }
    let body = bytes.len() - 4;
    if crc32fast::hash(&bytes[..body]) != u32::from_le_bytes(bytes[body..].try_into().unwrap()) {
        return Err("index checksum mismatch".into());
    }
    if &bytes[0..4] != MAGIC || bytes[6] != KIND_INDEX {
        return Err("not an SRLF index".into());
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let embed_dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let mut pos = 16;
    let mut take = |k: usize| -> std::result::Result<&[u8], String> {
        let s = bytes.get(pos..pos + k).filter(|_| pos + k <= body).ok_or("index is truncated")?;
        pos += k;
        Ok(s)
    };
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len)?).map_err(|_| "session name is not UTF-8")?.to_string();
        let mut counts = [0u64; NUM_VIEWS];
        for c in &mut counts {
            *c = u64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        entries.push((name, counts));
    }
    if pos != body {
        return Err("trailing bytes in index".into());
    }
    Ok((embed_dim, entries))
}
