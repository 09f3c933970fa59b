//! On-demand executable delivery over a block protocol.
//!
//! An executable image lives on a server as fixed-size blocks. A client
//! replays the execution-order fault stream of an application through a
//! redirector / networker / page-cache pipeline, fetching missing blocks
//! over a persistent connection. The server learns the block stream of
//! each application task as an *action* (a list of fixed-size *segments*),
//! matches future runs against stored actions, and pushes whole predicted
//! segments per round trip. A variance-driven preloader decides which
//! segments are worth pulling into server memory at startup, and a
//! background prefetcher keeps the next segments warm at runtime.
//!
//! The crate is organized around the moving parts:
//!
//! - [`model`] — block indices, segments, actions, traces, and the action
//!   store file format.
//! - [`wire`] — bit-exact request/response framing.
//! - [`predictor`] — the construction / match / generation state machine.
//! - [`provider`] — image store, normalized-variance preload, async prefetch.
//! - [`client`] — redirect set, metadata ring, page pool, LRU page cache,
//!   and trace replay.
//! - [`server`] — glues predictor and provider behind the wire protocol,
//!   in-process or over TCP.
//! - [`sim`] — deterministic latency model, readahead baseline, metrics,
//!   and synthetic trace generation.
//!
//! Start with the runnable examples (`cargo run --example replay_trace`,
//! `bench_strategies`, ...) or the `streamfetch` binary.

pub mod cli;
pub mod client;
pub mod config;
pub mod latency;
pub mod logfmt;
pub mod model;
pub mod predictor;
pub mod provider;
pub mod rng;
pub mod server;
pub mod sim;
pub mod time;
pub mod wire;

pub use model::{Action, ActionKind, ActionStore, BlockIndex, Segment, Trace, TraceEvent};
pub use time::VirtualTime;
