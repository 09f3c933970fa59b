//! The action store and its on-disk format.
//!
//! Layout (big-endian): magic `SSAS`, version u16 = 1, seg_max u16, then
//! zero or more actions until EOF. Per action: name length u16 + UTF-8
//! name, kind u8 (0 startup / 1 exit / 2 workload), id u32, segment count
//! u32, and per segment a length u16 followed by that many u32 block
//! indices.
//!
//! Serialization is canonical: actions are written sorted by executable
//! name then id, so `save(load(save(x))) == save(x)` byte for byte.

use super::{Action, ActionKind, BlockIndex, ModelError, Segment};
use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const STORE_MAGIC: [u8; 4] = *b"SSAS";
pub const STORE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic at offset 0: expected SSAS")]
    BadMagic,
    #[error("unsupported store version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated stream at offset {offset}: needed {needed} more byte(s)")]
    Truncated { offset: u64, needed: usize },
    #[error("invalid action name at offset {offset}: {reason}")]
    BadName { offset: u64, reason: String },
    #[error("unknown action kind {value} at offset {offset}")]
    BadKind { offset: u64, value: u8 },
    #[error("invalid segment at offset {offset}: {source}")]
    BadSegment {
        offset: u64,
        #[source]
        source: ModelError,
    },
    #[error("invalid action at offset {offset}: {source}")]
    BadAction {
        offset: u64,
        #[source]
        source: ModelError,
    },
    #[error("action id {id} for {executable:?} already present")]
    DuplicateId { executable: String, id: u32 },
    #[error("seg_max {action} of action does not fit store seg_max {store}")]
    SegMaxMismatch { action: usize, store: u16 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// All known actions, grouped per executable and kept sorted by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionStore {
    seg_max: u16,
    actions: BTreeMap<String, Vec<Action>>,
}

impl ActionStore {
    pub fn new(seg_max: u16) -> Self {
        ActionStore {
            seg_max,
            actions: BTreeMap::new(),
        }
    }

    pub fn seg_max(&self) -> u16 {
        self.seg_max
    }

    pub fn is_empty(&self) -> bool {
        self.actions.values().all(|v| v.is_empty())
    }

    pub fn action_count(&self) -> usize {
        self.actions.values().map(|v| v.len()).sum()
    }

    pub fn executables(&self) -> impl Iterator<Item = &str> {
        self.actions.keys().map(|s| s.as_str())
    }

    /// Actions for one executable, ordered by id. Empty slice when unknown.
    pub fn actions_for(&self, executable: &str) -> &[Action] {
        self.actions
            .get(executable)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Action> {
        self.actions.values().flatten()
    }

    /// Insert a fully-formed action. The id must be unused for that
    /// executable and every segment must fit this store's seg_max.
    pub fn insert(&mut self, action: Action) -> Result<(), StoreError> {
        if let Some(too_long) = action.segments().iter().map(Segment::len).max() {
            if too_long > self.seg_max as usize {
                return Err(StoreError::SegMaxMismatch {
                    action: too_long,
                    store: self.seg_max,
                });
            }
        }
        let list = self
            .actions
            .entry(action.executable().to_string())
            .or_default();
        if list.iter().any(|a| a.id() == action.id()) {
            return Err(StoreError::DuplicateId {
                executable: action.executable().to_string(),
                id: action.id(),
            });
        }
        list.push(action);
        list.sort_by_key(Action::id);
        Ok(())
    }

    /// Append a freshly constructed block stream as a new action, assigning
    /// the next free id. If an action with the identical stream already
    /// exists for the executable, it is discarded and the existing id is
    /// returned instead (`(id, false)`).
    pub fn append_stream(
        &mut self,
        executable: &str,
        kind: ActionKind,
        stream: &[BlockIndex],
    ) -> Result<(u32, bool), ModelError> {
        let list = self.actions.entry(executable.to_string()).or_default();
        let candidate = Action::from_stream(executable, kind, 0, stream, self.seg_max)?;
        for existing in list.iter() {
            if existing.stream() == candidate.stream() {
                return Ok((existing.id(), false));
            }
        }
        let id = list.iter().map(Action::id).max().map_or(0, |m| m + 1);
        list.push(candidate.with_id(id));
        Ok((id, true))
    }

    pub fn find(&self, executable: &str, id: u32) -> Option<&Action> {
        self.actions_for(executable).iter().find(|a| a.id() == id)
    }
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    /// Read exactly `buf.len()` bytes; `allow_eof` turns a clean EOF at a
    /// record boundary into `Ok(false)`.
    fn fill(&mut self, buf: &mut [u8], allow_eof: bool) -> Result<bool, StoreError> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    if read == 0 && allow_eof {
                        return Ok(false);
                    }
                    return Err(StoreError::Truncated {
                        offset: self.offset + read as u64,
                        needed: buf.len() - read,
                    });
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }

    fn u8(&mut self) -> Result<u8, StoreError> {
        let mut b = [0u8; 1];
        self.fill(&mut b, false)?;
        Ok(b[0])
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        let mut b = [0u8; 2];
        self.fill(&mut b, false)?;
        Ok(u16::from_be_bytes(b))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        let mut b = [0u8; 4];
        self.fill(&mut b, false)?;
        Ok(u32::from_be_bytes(b))
    }
}

/// Serialize the store. Returns the number of bytes written.
pub fn save_actions<W: Write>(store: &ActionStore, sink: &mut W) -> Result<u64, StoreError> {
    let mut written: u64 = 0;
    let mut put = |sink: &mut W, bytes: &[u8]| -> Result<(), StoreError> {
        sink.write_all(bytes)?;
        written += bytes.len() as u64;
        Ok(())
    };

    put(sink, &STORE_MAGIC)?;
    put(sink, &STORE_VERSION.to_be_bytes())?;
    put(sink, &store.seg_max.to_be_bytes())?;

    // BTreeMap iteration is name-sorted; per-name lists are id-sorted.
    for actions in store.actions.values() {
        for action in actions {
            let name = action.executable().as_bytes();
            put(sink, &(name.len() as u16).to_be_bytes())?;
            put(sink, name)?;
            put(sink, &[action.kind().as_u8()])?;
            put(sink, &action.id().to_be_bytes())?;
            put(sink, &(action.segments().len() as u32).to_be_bytes())?;
            for seg in action.segments() {
                put(sink, &(seg.len() as u16).to_be_bytes())?;
                for block in seg.blocks() {
                    put(sink, &block.0.to_be_bytes())?;
                }
            }
        }
    }
    sink.flush()?;
    Ok(written)
}

pub fn load_actions<R: Read>(source: R) -> Result<ActionStore, StoreError> {
    let mut r = CountingReader::new(source);

    let mut magic = [0u8; 4];
    match r.fill(&mut magic, false) {
        Ok(_) => {}
        Err(StoreError::Truncated { .. }) => return Err(StoreError::BadMagic),
        Err(e) => return Err(e),
    }
    if magic != STORE_MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = r.u16()?;
    if version != STORE_VERSION {
        return Err(StoreError::VersionMismatch {
            found: version,
            expected: STORE_VERSION,
        });
    }
    let seg_max = r.u16()?;
    let mut store = ActionStore::new(seg_max);

    loop {
        let mut len_buf = [0u8; 2];
        if !r.fill(&mut len_buf, true)? {
            break; // clean EOF at action boundary
        }
        let name_offset = r.offset;
        let name_len = u16::from_be_bytes(len_buf) as usize;
        if name_len == 0 {
            return Err(StoreError::BadName {
                offset: name_offset,
                reason: "empty name".into(),
            });
        }
        let mut name_bytes = vec![0u8; name_len];
        r.fill(&mut name_bytes, false)?;
        let name = String::from_utf8(name_bytes).map_err(|e| StoreError::BadName {
            offset: name_offset,
            reason: e.to_string(),
        })?;

        let kind_offset = r.offset;
        let kind_byte = r.u8()?;
        let kind = ActionKind::from_u8(kind_byte).ok_or(StoreError::BadKind {
            offset: kind_offset,
            value: kind_byte,
        })?;
        let id = r.u32()?;
        let segment_count = r.u32()?;

        let mut segments = Vec::with_capacity(segment_count.min(4096) as usize);
        for _ in 0..segment_count {
            let seg_offset = r.offset;
            let len = r.u16()? as usize;
            let mut seg_blocks = Vec::with_capacity(len);
            for _ in 0..len {
                seg_blocks.push(BlockIndex(r.u32()?));
            }
            segments.push(Segment::new(seg_blocks, seg_max).map_err(|source| {
                StoreError::BadSegment {
                    offset: seg_offset,
                    source,
                }
            })?);
        }
        let action_offset = r.offset;
        let action = Action::new(&name, kind, id, segments, seg_max).map_err(|source| {
            StoreError::BadAction {
                offset: action_offset,
                source,
            }
        })?;
        store.insert(action)?;
    }
    Ok(store)
}

/// Persist to `path` crash-safely: write `<path>.tmp`, sync, then rename
/// over the old file. A failure at any point leaves the previous store
/// intact.
pub fn save_actions_atomic(store: &ActionStore, path: &Path) -> Result<u64, StoreError> {
    let tmp = path.with_extension("tmp");
    let mut file = std::fs::File::create(&tmp)?;
    let n = match save_actions(store, &mut file) {
        Ok(n) => n,
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            return Err(e);
        }
    };
    file.sync_all()?;
    drop(file);
    std::fs::rename(&tmp, path)?;
    Ok(n)
}
