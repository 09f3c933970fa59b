//! The action lifecycle: construction, match, generation.
//!
//! Server-side state is keyed by (token, executable). A fresh token walks
//! one of three paths:
//!
//! - no stored action starts with the requested block → *construction*:
//!   every request is answered with just that block while the stream is
//!   recorded; a timer (or end-of-run) finalizes the buffer into a new
//!   action.
//! - the block heads a stored action's first segment → *match*: the first
//!   reply carries the opening slice of that segment and a checkpoint is
//!   armed; each checkpoint hit releases the next slice. Once the first
//!   segment is fully verified the session enters generation.
//! - otherwise a scan over all segments of all actions looks for the block
//!   anywhere; a hit serves the rest of that segment and jumps straight to
//!   generation, a miss starts construction.
//!
//! In *generation* only the first block of the next segment is matched, and
//! a hit pushes the whole segment in one reply. A divergent request falls
//! back to the scan. Serving the last segment completes the action and
//! expires the token.

use crate::model::{Action, ActionKind, ActionStore, BlockIndex};
use crate::time::VirtualTime;
use crate::wire::Token;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("unknown executable {0:?}")]
    UnknownExecutable(String),
    #[error("action store seg_max {store} does not match predictor seg_max {config}")]
    SegMaxMismatch { store: u16, config: u16 },
}

/// Where the first-segment checkpoints sit. `Figure` follows the worked
/// flow (first reply = positions 1-2, checkpoint at position 3); `Prose`
/// follows the alternative reading with checkpoints at positions 2 and
/// seg_max-2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointMode {
    Figure,
    Prose,
}

impl CheckpointMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "figure" => Some(CheckpointMode::Figure),
            "prose" => Some(CheckpointMode::Prose),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictorConfig {
    pub seg_max: u16,
    pub checkpoint_mode: CheckpointMode,
    /// Total first-segment matches including the head match (2 or 3).
    pub first_segment_matches: u8,
    /// Construction finalizes when this much virtual time has elapsed.
    pub construction_window_us: u64,
    /// Sessions idle longer than this are dropped (constructing ones are
    /// finalized first).
    pub session_idle_timeout_us: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            seg_max: crate::model::DEFAULT_SEG_MAX,
            checkpoint_mode: CheckpointMode::Figure,
            first_segment_matches: 2,
            construction_window_us: 3_000_000,
            session_idle_timeout_us: 10_000_000,
        }
    }
}

/// 1-based checkpoint positions within a first segment of `seg_len` blocks.
fn checkpoint_schedule(cfg: &PredictorConfig, seg_len: usize) -> Vec<usize> {
    let seg_max = cfg.seg_max as usize;
    let mut raw = match cfg.checkpoint_mode {
        CheckpointMode::Figure => {
            let mut v = vec![3usize];
            if cfg.first_segment_matches >= 3 {
                v.push(seg_max.div_ceil(2));
            }
            v
        }
        CheckpointMode::Prose => vec![2, seg_max.saturating_sub(2)],
    };
    raw.retain(|&p| p >= 2 && p <= seg_len);
    raw.sort_unstable();
    raw.dedup();
    raw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Constructing,
    Matching,
    Generating,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Constructing => "constructing",
            Stage::Matching => "matching",
            Stage::Generating => "generating",
        };
        f.write_str(s)
    }
}

/// Per-(token, executable) state.
#[derive(Debug, Clone)]
pub struct ActionSession {
    pub stage: Stage,
    pub action_id: Option<u32>,
    /// Remaining first-segment checkpoint positions (1-based).
    pub pending_checkpoints: VecDeque<usize>,
    /// Next segment expected while generating.
    pub next_segment: usize,
    pub construction: Vec<BlockIndex>,
    pub construction_start: VirtualTime,
    pub last_activity: VirtualTime,
}

/// What a request did to the session, for logs and inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StateChange {
    ConstructionStarted,
    ConstructionAppended {
        buffered: usize,
    },
    ConstructionFinalized {
        action_id: u32,
        fresh: bool,
        segments: usize,
    },
    FirstSegmentMatched {
        action_id: u32,
    },
    CheckpointHit {
        action_id: u32,
        position: usize,
    },
    GenerationEntered {
        action_id: u32,
    },
    SegmentServed {
        action_id: u32,
        segment: usize,
    },
    RematchedViaScan {
        action_id: u32,
        segment: usize,
    },
    ActionCompleted {
        action_id: u32,
    },
}

impl std::fmt::Display for StateChange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateChange::ConstructionStarted => write!(f, "construction_started"),
            StateChange::ConstructionAppended { buffered } => {
                write!(f, "construction_appended buffered={buffered}")
            }
            StateChange::ConstructionFinalized {
                action_id,
                fresh,
                segments,
            } => {
                write!(
                    f,
                    "construction_finalized action={action_id} fresh={fresh} segments={segments}"
                )
            }
            StateChange::FirstSegmentMatched { action_id } => {
                write!(f, "first_segment_matched action={action_id}")
            }
            StateChange::CheckpointHit {
                action_id,
                position,
            } => {
                write!(f, "checkpoint_hit action={action_id} position={position}")
            }
            StateChange::GenerationEntered { action_id } => {
                write!(f, "generation_entered action={action_id}")
            }
            StateChange::SegmentServed { action_id, segment } => {
                write!(f, "segment_served action={action_id} segment={segment}")
            }
            StateChange::RematchedViaScan { action_id, segment } => {
                write!(f, "rematched_via_scan action={action_id} segment={segment}")
            }
            StateChange::ActionCompleted { action_id } => {
                write!(f, "action_completed action={action_id}")
            }
        }
    }
}

/// The reply for one request: which blocks to return now (requested block
/// first), plus a prefetch hint for the provider.
#[derive(Debug, Clone)]
pub struct PredictorDecision {
    pub respond: Vec<BlockIndex>,
    /// `(action_id, just_served_segment)` when a stored segment slice was
    /// served; the provider may prefetch the segments after it.
    pub prefetch_from: Option<(u32, usize)>,
    pub change: StateChange,
}

/// Scan all segments of all actions for a block. Ties break toward the
/// lowest action id, then the lowest segment index.
pub fn fallback_scan(actions: &[Action], block: BlockIndex) -> Option<(u32, usize)> {
    for action in actions {
        for (seg_idx, segment) in action.segments().iter().enumerate() {
            if segment.contains(block) {
                return Some((action.id(), seg_idx));
            }
        }
    }
    None
}

pub struct Predictor {
    cfg: PredictorConfig,
    store: ActionStore,
    sessions: BTreeMap<(Token, String), ActionSession>,
    registered: BTreeSet<String>,
}

impl Predictor {
    pub fn new(cfg: PredictorConfig, store: ActionStore) -> Result<Self, PredictorError> {
        if store.seg_max() != cfg.seg_max {
            return Err(PredictorError::SegMaxMismatch {
                store: store.seg_max(),
                config: cfg.seg_max,
            });
        }
        Ok(Predictor {
            cfg,
            store,
            sessions: BTreeMap::new(),
            registered: BTreeSet::new(),
        })
    }

    /// Mark an executable as servable (it has an image). Requests for
    /// unregistered executables are rejected.
    pub fn register_executable(&mut self, name: &str) {
        self.registered.insert(name.to_string());
    }

    pub fn store(&self) -> &ActionStore {
        &self.store
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn session(&self, token: Token, executable: &str) -> Option<&ActionSession> {
        self.sessions.get(&(token, executable.to_string()))
    }

    /// One line per live session, for the inspection CLI.
    pub fn dump_sessions(&self) -> Vec<String> {
        self.sessions
            .iter()
            .map(|((token, exe), s)| {
                format!(
                    "token={} exe={} stage={} action={} next_seg={} buffered={} last_activity={}",
                    &token.hex()[..8],
                    exe,
                    s.stage,
                    s.action_id.map_or("-".to_string(), |id| id.to_string()),
                    s.next_segment,
                    s.construction.len(),
                    s.last_activity,
                )
            })
            .collect()
    }

    pub fn handle_request(
        &mut self,
        token: Token,
        executable: &str,
        block: BlockIndex,
        now: VirtualTime,
    ) -> Result<PredictorDecision, PredictorError> {
        let key = (token, executable.to_string());

        // Lazily expire an idle session; a stale construction still gets
        // persisted, the request is then treated as brand new.
        if let Some(session) = self.sessions.get(&key) {
            if now.since(session.last_activity) > self.cfg.session_idle_timeout_us {
                let stale = self.sessions.remove(&key).unwrap();
                if stale.stage == Stage::Constructing {
                    self.finalize_construction(executable, &stale);
                }
            }
        }

        match self.sessions.get(&key).map(|s| s.stage) {
            None => self.start_session(key, block, now),
            Some(Stage::Constructing) => Ok(self.construct_step(key, block, now)),
            Some(Stage::Matching) => Ok(self.match_step(key, block, now)),
            Some(Stage::Generating) => Ok(self.generate_step(key, block, now)),
        }
    }

    fn start_session(
        &mut self,
        key: (Token, String),
        block: BlockIndex,
        now: VirtualTime,
    ) -> Result<PredictorDecision, PredictorError> {
        let executable = key.1.clone();
        if !self.registered.contains(&executable) {
            return Err(PredictorError::UnknownExecutable(executable));
        }

        // Head match against first segments, lowest id first.
        let head_hit = self
            .store
            .actions_for(&executable)
            .iter()
            .find(|a| a.segments()[0].first() == block)
            .map(|a| a.id());
        if let Some(action_id) = head_hit {
            return Ok(self.serve_head_match(key, action_id, now));
        }

        // Scan everything; otherwise start recording.
        if let Some((action_id, seg_idx)) =
            fallback_scan(self.store.actions_for(&executable), block)
        {
            return Ok(self.serve_scan_hit(key, action_id, seg_idx, block, now, false));
        }
        self.sessions.insert(
            key,
            ActionSession {
                stage: Stage::Constructing,
                action_id: None,
                pending_checkpoints: VecDeque::new(),
                next_segment: 0,
                construction: vec![block],
                construction_start: now,
                last_activity: now,
            },
        );
        Ok(PredictorDecision {
            respond: vec![block],
            prefetch_from: None,
            change: StateChange::ConstructionStarted,
        })
    }

    fn serve_head_match(
        &mut self,
        key: (Token, String),
        action_id: u32,
        now: VirtualTime,
    ) -> PredictorDecision {
        let action = self
            .store
            .find(&key.1, action_id)
            .expect("head-matched action");
        let first = &action.segments()[0];
        let schedule = checkpoint_schedule(&self.cfg, first.len());
        let slice_end = schedule.first().map_or(first.len(), |&p| p - 1);
        let respond = first.blocks()[..slice_end].to_vec();
        let single_segment = action.segments().len() == 1;

        if schedule.is_empty() {
            // The whole first segment fits in the opening reply.
            if single_segment {
                return PredictorDecision {
                    respond,
                    prefetch_from: Some((action_id, 0)),
                    change: StateChange::ActionCompleted { action_id },
                };
            }
            self.sessions.insert(
                key,
                ActionSession {
                    stage: Stage::Generating,
                    action_id: Some(action_id),
                    pending_checkpoints: VecDeque::new(),
                    next_segment: 1,
                    construction: Vec::new(),
                    construction_start: now,
                    last_activity: now,
                },
            );
            return PredictorDecision {
                respond,
                prefetch_from: Some((action_id, 0)),
                change: StateChange::GenerationEntered { action_id },
            };
        }

        self.sessions.insert(
            key,
            ActionSession {
                stage: Stage::Matching,
                action_id: Some(action_id),
                pending_checkpoints: schedule.into(),
                next_segment: 0,
                construction: Vec::new(),
                construction_start: now,
                last_activity: now,
            },
        );
        PredictorDecision {
            respond,
            prefetch_from: None,
            change: StateChange::FirstSegmentMatched { action_id },
        }
    }

    fn serve_scan_hit(
        &mut self,
        key: (Token, String),
        action_id: u32,
        seg_idx: usize,
        block: BlockIndex,
        now: VirtualTime,
        _was_generating: bool,
    ) -> PredictorDecision {
        let action = self.store.find(&key.1, action_id).expect("scanned action");
        let segment = &action.segments()[seg_idx];
        let pos = segment.position_of(block).expect("scan hit contains block");
        let respond = segment.blocks()[pos..].to_vec();
        let next_segment = seg_idx + 1;

        if next_segment >= action.segments().len() {
            return PredictorDecision {
                respond,
                prefetch_from: Some((action_id, seg_idx)),
                change: StateChange::ActionCompleted { action_id },
            };
        }
        self.sessions.insert(
            key,
            ActionSession {
                stage: Stage::Generating,
                action_id: Some(action_id),
                pending_checkpoints: VecDeque::new(),
                next_segment,
                construction: Vec::new(),
                construction_start: now,
                last_activity: now,
            },
        );
        PredictorDecision {
            respond,
            prefetch_from: Some((action_id, seg_idx)),
            change: StateChange::RematchedViaScan {
                action_id,
                segment: seg_idx,
            },
        }
    }

    fn construct_step(
        &mut self,
        key: (Token, String),
        block: BlockIndex,
        now: VirtualTime,
    ) -> PredictorDecision {
        let session = self.sessions.get_mut(&key).expect("constructing session");
        session.construction.push(block);
        session.last_activity = now;
        let buffered = session.construction.len();
        let overdue = now.since(session.construction_start) >= self.cfg.construction_window_us;

        let change = if overdue {
            let finished = self.sessions.remove(&key).unwrap();
            let (action_id, fresh, segments) = self.finalize_construction(&key.1, &finished);
            StateChange::ConstructionFinalized {
                action_id,
                fresh,
                segments,
            }
        } else {
            StateChange::ConstructionAppended { buffered }
        };
        PredictorDecision {
            respond: vec![block],
            prefetch_from: None,
            change,
        }
    }

    fn match_step(
        &mut self,
        key: (Token, String),
        block: BlockIndex,
        now: VirtualTime,
    ) -> PredictorDecision {
        let session = self.sessions.get(&key).expect("matching session");
        let action_id = session.action_id.expect("matching session has action");
        let position = *session
            .pending_checkpoints
            .front()
            .expect("matching has checkpoint");
        let action = self.store.find(&key.1, action_id).expect("matched action");
        let first = &action.segments()[0];

        if first.blocks()[position - 1] == block {
            let session = self.sessions.get_mut(&key).unwrap();
            session.pending_checkpoints.pop_front();
            session.last_activity = now;
            let slice_end = session
                .pending_checkpoints
                .front()
                .map_or(first.len(), |&q| q - 1);
            let respond = first.blocks()[position - 1..slice_end].to_vec();

            if session.pending_checkpoints.is_empty() {
                // First segment fully verified.
                if action.segments().len() == 1 {
                    self.sessions.remove(&key);
                    return PredictorDecision {
                        respond,
                        prefetch_from: Some((action_id, 0)),
                        change: StateChange::ActionCompleted { action_id },
                    };
                }
                session.stage = Stage::Generating;
                session.next_segment = 1;
                return PredictorDecision {
                    respond,
                    prefetch_from: Some((action_id, 0)),
                    change: StateChange::GenerationEntered { action_id },
                };
            }
            return PredictorDecision {
                respond,
                prefetch_from: None,
                change: StateChange::CheckpointHit {
                    action_id,
                    position,
                },
            };
        }

        // Checkpoint miss: abandon the match and scan.
        self.sessions.remove(&key);
        self.rescan_or_construct(key, block, now)
    }

    fn generate_step(
        &mut self,
        key: (Token, String),
        block: BlockIndex,
        now: VirtualTime,
    ) -> PredictorDecision {
        let session = self.sessions.get(&key).expect("generating session");
        let action_id = session.action_id.expect("generating session has action");
        let next_segment = session.next_segment;
        let action = self
            .store
            .find(&key.1, action_id)
            .expect("generating action");

        if next_segment < action.segments().len()
            && action.segments()[next_segment].first() == block
        {
            let respond = action.segments()[next_segment].blocks().to_vec();
            let done = next_segment + 1 >= action.segments().len();
            if done {
                self.sessions.remove(&key);
                return PredictorDecision {
                    respond,
                    prefetch_from: Some((action_id, next_segment)),
                    change: StateChange::ActionCompleted { action_id },
                };
            }
            let session = self.sessions.get_mut(&key).unwrap();
            session.next_segment += 1;
            session.last_activity = now;
            return PredictorDecision {
                respond,
                prefetch_from: Some((action_id, next_segment)),
                change: StateChange::SegmentServed {
                    action_id,
                    segment: next_segment,
                },
            };
        }

        // Divergence (a jump to a different code path): re-match from scratch.
        self.sessions.remove(&key);
        self.rescan_or_construct(key, block, now)
    }

    fn rescan_or_construct(
        &mut self,
        key: (Token, String),
        block: BlockIndex,
        now: VirtualTime,
    ) -> PredictorDecision {
        if let Some((action_id, seg_idx)) = fallback_scan(self.store.actions_for(&key.1), block) {
            return self.serve_scan_hit(key, action_id, seg_idx, block, now, true);
        }
        self.sessions.insert(
            key,
            ActionSession {
                stage: Stage::Constructing,
                action_id: None,
                pending_checkpoints: VecDeque::new(),
                next_segment: 0,
                construction: vec![block],
                construction_start: now,
                last_activity: now,
            },
        );
        PredictorDecision {
            respond: vec![block],
            prefetch_from: None,
            change: StateChange::ConstructionStarted,
        }
    }

    fn finalize_construction(
        &mut self,
        executable: &str,
        session: &ActionSession,
    ) -> (u32, bool, usize) {
        let (action_id, fresh) = self
            .store
            .append_stream(executable, ActionKind::Workload, &session.construction)
            .expect("construction buffer is non-empty");
        let segments = self
            .store
            .find(executable, action_id)
            .map_or(0, |a| a.segments().len());
        (action_id, fresh, segments)
    }

    /// Sweep sessions: finalize constructions whose window elapsed, drop
    /// idle matching/generating sessions. Returns one change per event.
    pub fn tick(&mut self, now: VirtualTime) -> Vec<StateChange> {
        let mut changes = Vec::new();
        let keys: Vec<(Token, String)> = self.sessions.keys().cloned().collect();
        for key in keys {
            let session = &self.sessions[&key];
            match session.stage {
                Stage::Constructing => {
                    if now.since(session.construction_start) >= self.cfg.construction_window_us {
                        let finished = self.sessions.remove(&key).unwrap();
                        let (action_id, fresh, segments) =
                            self.finalize_construction(&key.1, &finished);
                        changes.push(StateChange::ConstructionFinalized {
                            action_id,
                            fresh,
                            segments,
                        });
                    }
                }
                Stage::Matching | Stage::Generating => {
                    if now.since(session.last_activity) > self.cfg.session_idle_timeout_us {
                        self.sessions.remove(&key);
                    }
                }
            }
        }
        changes
    }

    /// Shutdown path: finalize every in-flight construction regardless of
    /// its timer and drop all sessions.
    pub fn finish_all(&mut self) -> Vec<StateChange> {
        let mut changes = Vec::new();
        let keys: Vec<(Token, String)> = self.sessions.keys().cloned().collect();
        for key in keys {
            let session = self.sessions.remove(&key).unwrap();
            if session.stage == Stage::Constructing {
                let (action_id, fresh, segments) = self.finalize_construction(&key.1, &session);
                changes.push(StateChange::ConstructionFinalized {
                    action_id,
                    fresh,
                    segments,
                });
            }
        }
        changes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::blocks;

    const T0: VirtualTime = VirtualTime(0);

    fn token(n: u8) -> Token {
        Token([n; 16])
    }

    fn cfg4() -> PredictorConfig {
        PredictorConfig {
            seg_max: 4,
            ..Default::default()
        }
    }

    fn predictor_with_actions(seg_max: u16, streams: &[&[u32]]) -> Predictor {
        let mut store = ActionStore::new(seg_max);
        for stream in streams {
            store
                .append_stream("app", ActionKind::Workload, &blocks(stream))
                .unwrap();
        }
        let mut p = Predictor::new(
            PredictorConfig {
                seg_max,
                ..Default::default()
            },
            store,
        )
        .unwrap();
        p.register_executable("app");
        p
    }

    fn ids(respond: &[BlockIndex]) -> Vec<u32> {
        respond.iter().map(|b| b.0).collect()
    }

    #[test]
    fn unknown_executable_rejected() {
        let mut p = Predictor::new(cfg4(), ActionStore::new(4)).unwrap();
        let err = p
            .handle_request(token(1), "ghost", BlockIndex(0), T0)
            .unwrap_err();
        assert!(matches!(err, PredictorError::UnknownExecutable(ref n) if n == "ghost"));
    }

    #[test]
    fn first_request_starts_construction() {
        let mut p = predictor_with_actions(4, &[]);
        let d = p
            .handle_request(token(1), "app", BlockIndex(1), T0)
            .unwrap();
        assert_eq!(ids(&d.respond), vec![1]);
        assert_eq!(d.change, StateChange::ConstructionStarted);
        assert_eq!(
            p.session(token(1), "app").unwrap().stage,
            Stage::Constructing
        );
    }

    #[test]
    fn construction_appends_one_block_per_round_trip() {
        let mut p = predictor_with_actions(4, &[]);
        for (i, b) in [1u32, 3, 8, 9, 11].iter().enumerate() {
            let d = p
                .handle_request(token(1), "app", BlockIndex(*b), VirtualTime(i as u64 * 100))
                .unwrap();
            assert_eq!(ids(&d.respond), vec![*b]);
        }
        assert_eq!(
            p.session(token(1), "app").unwrap().construction,
            blocks(&[1, 3, 8, 9, 11])
        );
    }

    #[test]
    fn construction_finalizes_on_window_elapsed() {
        let mut p = predictor_with_actions(4, &[]);
        p.handle_request(token(1), "app", BlockIndex(1), T0)
            .unwrap();
        p.handle_request(token(1), "app", BlockIndex(3), VirtualTime(100))
            .unwrap();
        let d = p
            .handle_request(token(1), "app", BlockIndex(8), VirtualTime(3_000_000))
            .unwrap();
        assert_eq!(ids(&d.respond), vec![8]);
        assert_eq!(
            d.change,
            StateChange::ConstructionFinalized {
                action_id: 0,
                fresh: true,
                segments: 1
            }
        );
        assert_eq!(p.session_count(), 0);
        let action = p.store().find("app", 0).unwrap();
        assert_eq!(action.stream(), blocks(&[1, 3, 8]));
        assert_eq!(action.kind(), ActionKind::Workload);
    }

    #[test]
    fn tick_finalizes_minimal_action() {
        let mut p = predictor_with_actions(4, &[]);
        p.handle_request(token(1), "app", BlockIndex(1), T0)
            .unwrap();
        let changes = p.tick(VirtualTime(3_000_000));
        assert_eq!(changes.len(), 1);
        let action = p.store().find("app", 0).unwrap();
        assert_eq!(action.segments().len(), 1);
        assert_eq!(action.segments()[0].len(), 1);
    }

    #[test]
    fn long_construction_splits_into_segments() {
        let mut p = predictor_with_actions(32, &[]);
        for i in 0..130u32 {
            p.handle_request(token(1), "app", BlockIndex(i), VirtualTime(i as u64))
                .unwrap();
        }
        p.tick(VirtualTime(3_000_000));
        let action = p.store().find("app", 0).unwrap();
        let lens: Vec<usize> = action.segments().iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![32, 32, 32, 32, 2]);
    }

    #[test]
    fn duplicate_construction_reuses_id() {
        // Two concurrent runs record the same unseen stream; the second
        // finalized copy is discarded and the first id reused.
        let mut p = predictor_with_actions(4, &[&[1, 3, 8]]);
        for t in [2u8, 3] {
            let d = p
                .handle_request(token(t), "app", BlockIndex(99), T0)
                .unwrap();
            assert_eq!(d.change, StateChange::ConstructionStarted);
        }
        for t in [2u8, 3] {
            p.handle_request(token(t), "app", BlockIndex(98), VirtualTime(1))
                .unwrap();
        }
        let changes = p.tick(VirtualTime(3_000_001));
        assert_eq!(
            changes,
            vec![
                StateChange::ConstructionFinalized {
                    action_id: 1,
                    fresh: true,
                    segments: 1
                },
                StateChange::ConstructionFinalized {
                    action_id: 1,
                    fresh: false,
                    segments: 1
                },
            ]
        );
        assert_eq!(
            p.store().action_count(),
            2,
            "duplicate stream must not add an action"
        );
    }

    #[test]
    fn match_and_checkpoint_flow() {
        let mut p = predictor_with_actions(4, &[&[1, 3, 8, 9, 11, 12, 14, 15]]);

        let d = p
            .handle_request(token(1), "app", BlockIndex(1), T0)
            .unwrap();
        assert_eq!(ids(&d.respond), vec![1, 3]);
        assert_eq!(d.change, StateChange::FirstSegmentMatched { action_id: 0 });
        assert_eq!(
            p.session(token(1), "app").unwrap().pending_checkpoints,
            VecDeque::from(vec![3])
        );

        // B3 is already client-side; the next request is the checkpoint B8.
        let d = p
            .handle_request(token(1), "app", BlockIndex(8), VirtualTime(10))
            .unwrap();
        assert_eq!(ids(&d.respond), vec![8, 9]);
        assert_eq!(d.change, StateChange::GenerationEntered { action_id: 0 });
        assert_eq!(d.prefetch_from, Some((0, 0)));
        assert_eq!(p.session(token(1), "app").unwrap().stage, Stage::Generating);

        // Generation: single match on the next segment head.
        let d = p
            .handle_request(token(1), "app", BlockIndex(11), VirtualTime(20))
            .unwrap();
        assert_eq!(ids(&d.respond), vec![11, 12, 14, 15]);
        assert_eq!(d.change, StateChange::ActionCompleted { action_id: 0 });
        assert_eq!(d.prefetch_from, Some((0, 1)));
        assert_eq!(
            p.session_count(),
            0,
            "token expires once the action completes"
        );

        // The same token afterwards is a brand-new matching session.
        let d = p
            .handle_request(token(1), "app", BlockIndex(1), VirtualTime(30))
            .unwrap();
        assert_eq!(ids(&d.respond), vec![1, 3]);
        assert_eq!(d.change, StateChange::FirstSegmentMatched { action_id: 0 });
    }

    #[test]
    fn unmatched_block_starts_construction() {
        let mut p = predictor_with_actions(4, &[&[1, 3, 8, 9, 11, 12, 14, 15]]);
        let d = p
            .handle_request(token(1), "app", BlockIndex(7), T0)
            .unwrap();
        assert_eq!(d.change, StateChange::ConstructionStarted);
        assert_eq!(ids(&d.respond), vec![7]);
    }

    #[test]
    fn generation_divergence_rescans_other_action() {
        // Action 0 continues with (4,5,6,7); action 1 holds B11's segment.
        let mut p = predictor_with_actions(
            4,
            &[&[1, 3, 8, 9, 4, 5, 6, 7], &[16, 17, 18, 13, 11, 12, 14, 15]],
        );
        p.handle_request(token(1), "app", BlockIndex(1), T0)
            .unwrap();
        let d = p
            .handle_request(token(1), "app", BlockIndex(8), VirtualTime(1))
            .unwrap();
        assert_eq!(d.change, StateChange::GenerationEntered { action_id: 0 });

        // B4 is expected; B11 arrives instead and is found in action 1.
        let d = p
            .handle_request(token(1), "app", BlockIndex(11), VirtualTime(2))
            .unwrap();
        assert_eq!(ids(&d.respond), vec![11, 12, 14, 15]);
        assert_eq!(d.change, StateChange::ActionCompleted { action_id: 1 });
    }

    #[test]
    fn checkpoint_miss_scans_and_serves_suffix() {
        let mut p = predictor_with_actions(4, &[&[1, 3, 8, 9, 11, 12, 14, 15]]);
        p.handle_request(token(1), "app", BlockIndex(1), T0)
            .unwrap();
        // Expected checkpoint is B8; B9 arrives. The scan finds it at
        // position 4 of segment 0 and serves the suffix.
        let d = p
            .handle_request(token(1), "app", BlockIndex(9), VirtualTime(1))
            .unwrap();
        assert_eq!(ids(&d.respond), vec![9]);
        assert_eq!(
            d.change,
            StateChange::RematchedViaScan {
                action_id: 0,
                segment: 0
            }
        );
        let s = p.session(token(1), "app").unwrap();
        assert_eq!(s.stage, Stage::Generating);
        assert_eq!(s.next_segment, 1);
    }

    #[test]
    fn scan_prefers_lowest_action_id() {
        let mut p = predictor_with_actions(4, &[&[20, 21, 9], &[9, 30, 31]]);
        // 9 appears in both actions; id 0 wins even though it heads id 1.
        assert_eq!(
            fallback_scan(p.store().actions_for("app"), BlockIndex(9)),
            Some((0, 0))
        );
        let d = p
            .handle_request(token(1), "app", BlockIndex(9), T0)
            .unwrap();
        // Fresh-session head match only applies to first blocks; 9 heads
        // action 1, so the head match picks action 1 directly.
        assert_eq!(d.change, StateChange::FirstSegmentMatched { action_id: 1 });
    }

    #[test]
    fn scan_finds_mid_segment_position() {
        let p = predictor_with_actions(4, &[&[1, 3, 8, 9, 11, 12, 14, 15]]);
        assert_eq!(
            fallback_scan(p.store().actions_for("app"), BlockIndex(12)),
            Some((0, 1))
        );
        assert_eq!(
            fallback_scan(p.store().actions_for("app"), BlockIndex(99)),
            None
        );
    }

    #[test]
    fn short_first_segment_completes_in_one_reply() {
        let mut p = predictor_with_actions(4, &[&[5, 6]]);
        let d = p
            .handle_request(token(1), "app", BlockIndex(5), T0)
            .unwrap();
        assert_eq!(ids(&d.respond), vec![5, 6]);
        assert_eq!(d.change, StateChange::ActionCompleted { action_id: 0 });
        assert_eq!(p.session_count(), 0);
    }

    #[test]
    fn prose_checkpoints() {
        let mut store = ActionStore::new(8);
        store
            .append_stream(
                "app",
                ActionKind::Workload,
                &blocks(&[10, 11, 12, 13, 14, 15, 16, 17]),
            )
            .unwrap();
        let mut p = Predictor::new(
            PredictorConfig {
                seg_max: 8,
                checkpoint_mode: CheckpointMode::Prose,
                ..Default::default()
            },
            store,
        )
        .unwrap();
        p.register_executable("app");

        // Checkpoints at positions 2 and 6.
        let d = p
            .handle_request(token(1), "app", BlockIndex(10), T0)
            .unwrap();
        assert_eq!(ids(&d.respond), vec![10]);
        let d = p
            .handle_request(token(1), "app", BlockIndex(11), VirtualTime(1))
            .unwrap();
        assert_eq!(ids(&d.respond), vec![11, 12, 13, 14]);
        let d = p
            .handle_request(token(1), "app", BlockIndex(15), VirtualTime(2))
            .unwrap();
        assert_eq!(ids(&d.respond), vec![15, 16, 17]);
        assert_eq!(d.change, StateChange::ActionCompleted { action_id: 0 });
    }

    #[test]
    fn three_match_figure_mode() {
        let mut store = ActionStore::new(8);
        store
            .append_stream(
                "app",
                ActionKind::Workload,
                &blocks(&[10, 11, 12, 13, 14, 15, 16, 17]),
            )
            .unwrap();
        let mut p = Predictor::new(
            PredictorConfig {
                seg_max: 8,
                first_segment_matches: 3,
                ..Default::default()
            },
            store,
        )
        .unwrap();
        p.register_executable("app");

        // Checkpoints at positions 3 and 4 (ceil(8/2)).
        let d = p
            .handle_request(token(1), "app", BlockIndex(10), T0)
            .unwrap();
        assert_eq!(ids(&d.respond), vec![10, 11]);
        let d = p
            .handle_request(token(1), "app", BlockIndex(12), VirtualTime(1))
            .unwrap();
        assert_eq!(ids(&d.respond), vec![12]);
        assert_eq!(
            d.change,
            StateChange::CheckpointHit {
                action_id: 0,
                position: 3
            }
        );
        let d = p
            .handle_request(token(1), "app", BlockIndex(13), VirtualTime(2))
            .unwrap();
        assert_eq!(ids(&d.respond), vec![13, 14, 15, 16, 17]);
        assert_eq!(d.change, StateChange::ActionCompleted { action_id: 0 });
    }

    #[test]
    fn sessions_are_independent_per_token() {
        let mut p = predictor_with_actions(4, &[&[1, 3, 8, 9, 11, 12, 14, 15]]);
        p.handle_request(token(1), "app", BlockIndex(1), T0)
            .unwrap();
        // A concurrent run with a different token starts its own session.
        let d = p
            .handle_request(token(2), "app", BlockIndex(42), T0)
            .unwrap();
        assert_eq!(d.change, StateChange::ConstructionStarted);
        assert_eq!(p.session_count(), 2);
        assert_eq!(p.session(token(1), "app").unwrap().stage, Stage::Matching);
        assert_eq!(
            p.session(token(2), "app").unwrap().stage,
            Stage::Constructing
        );
    }

    #[test]
    fn idle_session_expires_and_restarts() {
        let mut p = predictor_with_actions(4, &[&[1, 3, 8, 9, 11, 12, 14, 15]]);
        p.handle_request(token(1), "app", BlockIndex(1), T0)
            .unwrap();
        // 11 s later the session is stale; B8 is treated as a fresh request
        // and found by the scan at segment 0 position 3.
        let d = p
            .handle_request(token(1), "app", BlockIndex(8), VirtualTime(11_000_000))
            .unwrap();
        assert_eq!(
            d.change,
            StateChange::RematchedViaScan {
                action_id: 0,
                segment: 0
            }
        );
        assert_eq!(ids(&d.respond), vec![8, 9]);
    }

    #[test]
    fn replay_after_construction_uses_formula_round_trips() {
        // Construct a 12-block stream (3 segments at seg_max 4), then
        // replay it with a client-side cache analog and count round trips.
        let stream: Vec<u32> = (0..12).map(|i| i * 3 + 1).collect();
        let mut p = predictor_with_actions(4, &[]);
        for (i, &b) in stream.iter().enumerate() {
            p.handle_request(token(1), "app", BlockIndex(b), VirtualTime(i as u64))
                .unwrap();
        }
        p.tick(VirtualTime(3_000_000));

        let mut delivered = std::collections::BTreeSet::new();
        let mut round_trips = 0;
        for &b in &stream {
            if delivered.contains(&b) {
                continue;
            }
            let d = p
                .handle_request(token(2), "app", BlockIndex(b), VirtualTime(4_000_000))
                .unwrap();
            round_trips += 1;
            assert_eq!(d.respond[0], BlockIndex(b));
            delivered.extend(d.respond.iter().map(|x| x.0));
        }
        assert_eq!(round_trips, 2 + (3 - 1));
    }

    #[test]
    fn decisions_are_deterministic() {
        let streams: [&[u32]; 2] = [&[1, 3, 8, 9, 11, 12, 14, 15], &[16, 17, 18, 13]];
        let requests = [1u32, 8, 11, 16, 7, 7, 3, 12];
        let run = || {
            let mut p = predictor_with_actions(4, &streams);
            requests
                .iter()
                .enumerate()
                .map(|(i, &b)| {
                    let d = p
                        .handle_request(token(1), "app", BlockIndex(b), VirtualTime(i as u64))
                        .unwrap();
                    (ids(&d.respond), format!("{}", d.change))
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn respond_always_starts_with_requested_block() {
        let mut p = predictor_with_actions(4, &[&[1, 3, 8, 9, 11, 12, 14, 15]]);
        for (i, b) in [1u32, 8, 12, 3, 42, 11].into_iter().enumerate() {
            let d = p
                .handle_request(token(1), "app", BlockIndex(b), VirtualTime(i as u64 * 10))
                .unwrap();
            assert_eq!(d.respond[0], BlockIndex(b), "request {b}");
            assert!(!d.respond.is_empty());
        }
    }
}
