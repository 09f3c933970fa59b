//! Shared domain types: blocks, segments, actions, traces, and the action
//! store every other module consumes.
//!
//! An *action* is the recorded block-index stream of one application task,
//! chopped into *segments* of at most `seg_max` indices. Segments are the
//! unit of prediction: the server pushes one segment (or a slice of one)
//! per round trip once a run has been matched.

mod store;
mod trace;

pub use store::{load_actions, save_actions, save_actions_atomic, ActionStore, StoreError};
pub use trace::{format_trace, parse_trace, TraceError};

use std::fmt;
use thiserror::Error;

/// Default block (page) size in bytes.
pub const DEFAULT_BLOCK_SIZE: usize = 4096;
/// Default maximum number of block indices per segment.
pub const DEFAULT_SEG_MAX: u16 = 32;

/// Index of one fixed-size block within an executable image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockIndex(pub u32);

impl BlockIndex {
    pub fn value(self) -> u32 {
        self.0
    }
}

impl From<u32> for BlockIndex {
    fn from(v: u32) -> Self {
        BlockIndex(v)
    }
}

impl fmt::Display for BlockIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("no blocks")]
    NoBlocks,
    #[error("seg_max must be at least 2, got {0}")]
    SegMaxTooSmall(u16),
    #[error("segment length {len} exceeds seg_max {seg_max}")]
    SegmentTooLong { len: usize, seg_max: u16 },
    #[error(
        "only the final segment may be shorter than seg_max (segment {index} has length {len})"
    )]
    ShortInnerSegment { index: usize, len: usize },
    #[error("action has no segments")]
    EmptyAction,
}

/// A contiguous chunk of an action's block stream, at most `seg_max` long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    blocks: Vec<BlockIndex>,
}

impl Segment {
    /// `blocks` must be non-empty and no longer than `seg_max`.
    pub fn new(blocks: Vec<BlockIndex>, seg_max: u16) -> Result<Self, ModelError> {
        if blocks.is_empty() {
            return Err(ModelError::NoBlocks);
        }
        if blocks.len() > seg_max as usize {
            return Err(ModelError::SegmentTooLong {
                len: blocks.len(),
                seg_max,
            });
        }
        Ok(Segment { blocks })
    }

    pub fn blocks(&self) -> &[BlockIndex] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn first(&self) -> BlockIndex {
        self.blocks[0]
    }

    pub fn contains(&self, block: BlockIndex) -> bool {
        self.blocks.contains(&block)
    }

    /// Position (0-based) of the first occurrence of `block`.
    pub fn position_of(&self, block: BlockIndex) -> Option<usize> {
        self.blocks.iter().position(|&b| b == block)
    }
}

/// What phase of an application a recorded action belongs to. Workload
/// actions are told apart by their id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ActionKind {
    Startup,
    Exit,
    Workload,
}

impl ActionKind {
    pub fn as_u8(self) -> u8 {
        match self {
            ActionKind::Startup => 0,
            ActionKind::Exit => 1,
            ActionKind::Workload => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ActionKind::Startup),
            1 => Some(ActionKind::Exit),
            2 => Some(ActionKind::Workload),
            _ => None,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ActionKind::Startup => "startup",
            ActionKind::Exit => "exit",
            ActionKind::Workload => "workload",
        };
        f.write_str(s)
    }
}

/// One recorded task: the exact construction-time block stream, split into
/// segments. The concatenation of the segments reproduces the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Action {
    executable: String,
    kind: ActionKind,
    id: u32,
    segments: Vec<Segment>,
}

impl Action {
    /// Build from explicit segments. All segments except the last must be
    /// exactly `seg_max` long.
    pub fn new(
        executable: impl Into<String>,
        kind: ActionKind,
        id: u32,
        segments: Vec<Segment>,
        seg_max: u16,
    ) -> Result<Self, ModelError> {
        if segments.is_empty() {
            return Err(ModelError::EmptyAction);
        }
        for (i, seg) in segments.iter().enumerate() {
            if seg.len() > seg_max as usize {
                return Err(ModelError::SegmentTooLong {
                    len: seg.len(),
                    seg_max,
                });
            }
            if i + 1 < segments.len() && seg.len() != seg_max as usize {
                return Err(ModelError::ShortInnerSegment {
                    index: i,
                    len: seg.len(),
                });
            }
        }
        Ok(Action {
            executable: executable.into(),
            kind,
            id,
            segments,
        })
    }

    /// Build from a raw block stream by greedy chunking.
    pub fn from_stream(
        executable: impl Into<String>,
        kind: ActionKind,
        id: u32,
        blocks: &[BlockIndex],
        seg_max: u16,
    ) -> Result<Self, ModelError> {
        let segments = segment_split(blocks, seg_max)?;
        Action::new(executable, kind, id, segments, seg_max)
    }

    pub fn executable(&self) -> &str {
        &self.executable
    }

    pub fn kind(&self) -> ActionKind {
        self.kind
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, index: usize) -> Option<&Segment> {
        self.segments.get(index)
    }

    /// The full construction-time block stream.
    pub fn stream(&self) -> Vec<BlockIndex> {
        self.segments
            .iter()
            .flat_map(|s| s.blocks().iter().copied())
            .collect()
    }

    pub(crate) fn with_id(mut self, id: u32) -> Self {
        self.id = id;
        self
    }
}

/// One recorded fault event: the block that faulted and how long the
/// application "executed" before the next fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub block: BlockIndex,
    pub think_time_us: u64,
}

/// An execution-order fault stream for one executable. This is the input
/// the client replays; it stands in for live page-fault interception.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub executable: String,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(executable: impl Into<String>, events: Vec<TraceEvent>) -> Self {
        Trace {
            executable: executable.into(),
            events,
        }
    }

    /// Convenience constructor: zero think time everywhere.
    pub fn from_blocks(executable: impl Into<String>, blocks: &[u32]) -> Self {
        Trace {
            executable: executable.into(),
            events: blocks
                .iter()
                .map(|&b| TraceEvent {
                    block: BlockIndex(b),
                    think_time_us: 0,
                })
                .collect(),
        }
    }

    /// Number of distinct blocks faulted.
    pub fn distinct_blocks(&self) -> usize {
        let mut seen: Vec<u32> = self.events.iter().map(|e| e.block.0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// Greedy left-to-right chunking of a block stream into segments. Every
/// chunk is exactly `seg_max` long except possibly the last.
pub fn segment_split(blocks: &[BlockIndex], seg_max: u16) -> Result<Vec<Segment>, ModelError> {
    if seg_max < 2 {
        return Err(ModelError::SegMaxTooSmall(seg_max));
    }
    if blocks.is_empty() {
        return Err(ModelError::NoBlocks);
    }
    Ok(blocks
        .chunks(seg_max as usize)
        .map(|c| Segment { blocks: c.to_vec() })
        .collect())
}

/// Shorthand used all over the tests.
pub fn blocks(indices: &[u32]) -> Vec<BlockIndex> {
    indices.iter().copied().map(BlockIndex).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_split_example_pairs() {
        let segs = segment_split(&blocks(&[1, 3, 8, 9, 11, 12, 14, 15]), 4).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].blocks(), &blocks(&[1, 3, 8, 9])[..]);
        assert_eq!(segs[1].blocks(), &blocks(&[11, 12, 14, 15])[..]);
    }

    #[test]
    fn segment_split_single_block() {
        let segs = segment_split(&blocks(&[7]), 32).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].blocks(), &blocks(&[7])[..]);
    }

    #[test]
    fn segment_split_71_blocks() {
        let input: Vec<BlockIndex> = (0..71).map(BlockIndex).collect();
        let segs = segment_split(&input, 32).unwrap();
        let lens: Vec<usize> = segs.iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![32, 32, 7]);
    }

    #[test]
    fn segment_split_rejects_empty_and_tiny_seg_max() {
        assert_eq!(segment_split(&[], 4), Err(ModelError::NoBlocks));
        assert_eq!(
            segment_split(&blocks(&[1]), 1),
            Err(ModelError::SegMaxTooSmall(1))
        );
    }

    #[test]
    fn segment_split_is_partition() {
        // Order-preserving partition on a few deterministic shapes.
        for n in [1usize, 31, 32, 33, 64, 100, 129] {
            let input: Vec<BlockIndex> = (0..n as u32).map(|i| BlockIndex(i * 7 % 50)).collect();
            let segs = segment_split(&input, 32).unwrap();
            let total: usize = segs.iter().map(|s| s.len()).sum();
            assert_eq!(total, n);
            let flat: Vec<BlockIndex> = segs
                .iter()
                .flat_map(|s| s.blocks().iter().copied())
                .collect();
            assert_eq!(flat, input);
            for seg in &segs[..segs.len() - 1] {
                assert_eq!(seg.len(), 32);
            }
        }
    }

    #[test]
    fn action_rejects_short_inner_segment() {
        let segs = vec![
            Segment::new(blocks(&[1, 2]), 4).unwrap(),
            Segment::new(blocks(&[3]), 4).unwrap(),
        ];
        let err = Action::new("app", ActionKind::Workload, 0, segs, 4).unwrap_err();
        assert_eq!(err, ModelError::ShortInnerSegment { index: 0, len: 2 });
    }

    #[test]
    fn action_stream_roundtrip() {
        let stream = blocks(&[1, 3, 8, 9, 11, 12, 14, 15]);
        let action = Action::from_stream("app", ActionKind::Workload, 0, &stream, 4).unwrap();
        assert_eq!(action.stream(), stream);
        assert_eq!(action.segments().len(), 2);
    }

    #[test]
    fn duplicates_kept_verbatim() {
        let stream = blocks(&[5, 5, 5, 5, 5]);
        let action = Action::from_stream("app", ActionKind::Workload, 0, &stream, 4).unwrap();
        assert_eq!(action.stream(), stream);
    }
}
