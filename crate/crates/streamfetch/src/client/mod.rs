//! The client-side pipeline: redirector (name-set match), metadata ring,
//! networker workers with persistent connections, allocator-fed page pool,
//! and the LRU page cache. [`run_trace`] drives an execution-order fault
//! stream through all of it.
//!
//! A fault first consults the page cache. On a miss the redirector routes
//! by executable name: names outside the redirect set are served by the
//! local storage stub, names inside it become request frames handed to a
//! networker worker through the ring. Every block in the response is
//! backed by a pool page and inserted into the cache before the fault
//! completes, so a pushed segment turns the following faults into hits.

mod cache;
mod ring;
mod transport;

pub use cache::{PageCache, PageHandle, PagePool, PoolError};
pub use ring::{MetadataRing, RingError, RingPolicy};
pub use transport::{InProcessTransport, Reply, TcpTransport, Transport, TransportError};

use crate::latency::{LatencyClock, LatencyModel};
use crate::model::{BlockIndex, Trace, DEFAULT_BLOCK_SIZE};
use crate::provider::BlockSource;
use crate::rng::{block_bytes, fnv1a};
use crate::server::Server;
use crate::time::VirtualTime;
use crate::wire::{RequestFrame, ResponseStatus, Token};
use std::collections::{BTreeSet, HashSet};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error("server returned {status} for block {block}")]
    ServerStatus { status: ResponseStatus, block: u32 },
    #[error("networker worker terminated unexpectedly")]
    WorkerGone,
    #[error("configuration: {0}")]
    Config(String),
}

/// The set of executable names whose IO is redirected to the server.
#[derive(Debug, Clone, Default)]
pub struct RedirectSet {
    names: HashSet<String>,
}

impl RedirectSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        RedirectSet {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>) {
        self.names.insert(name.into());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Local,
    Remote,
}

/// Route one intercepted IO: remote iff the executable is in the set.
/// Matching is exact string equality; the block index plays no part.
pub fn redirect(executable: &str, _block: BlockIndex, set: &RedirectSet) -> Route {
    if set.contains(executable) {
        Route::Remote
    } else {
        Route::Local
    }
}

/// The local storage stub behind `Route::Local`: deterministic bytes keyed
/// by name, standing in for an on-device filesystem read.
pub fn local_read(executable: &str, block: BlockIndex, block_size: usize) -> Vec<u8> {
    block_bytes(fnv1a(executable.as_bytes()), block.0, block_size)
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub block_size: usize,
    pub pool_capacity: usize,
    pub cache_pages: usize,
    pub workers: usize,
    pub ring_capacity: usize,
    pub ring_policy: RingPolicy,
    pub redirect: RedirectSet,
    /// Fixed token per run; `None` generates a fresh one.
    pub token: Option<Token>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            block_size: DEFAULT_BLOCK_SIZE,
            pool_capacity: 256,
            cache_pages: 1024,
            workers: 1,
            ring_capacity: 64,
            ring_policy: RingPolicy::Block,
            redirect: RedirectSet::new(),
            token: None,
        }
    }
}

/// How per-fault latency samples are produced.
#[derive(Debug, Clone)]
pub enum LatencyMode {
    /// Wall-clock microseconds around each fault (live replay).
    Measured,
    /// Deterministic model over a virtual clock.
    Model(LatencyModel),
}

#[derive(Debug, Clone, Copy)]
pub struct EventRecord {
    pub seq: usize,
    pub block: u32,
    pub hit: bool,
    pub local: bool,
    pub round_trip: bool,
    pub delivered: usize,
    pub latency_us: u64,
}

/// Everything one replay produced.
#[derive(Debug)]
pub struct RunReport {
    pub executable: String,
    pub events: Vec<EventRecord>,
    pub io_count: u64,
    pub delivered_blocks: u64,
    pub hits: u64,
    pub misses: u64,
    pub distinct_needed: BTreeSet<u32>,
    pub distinct_delivered: BTreeSet<u32>,
    /// (memcache, backing) response-path reads observed via source tags.
    pub response_sources: (u64, u64),
    pub ring_pushes: u64,
    pub worker_connections: Vec<u64>,
    pub loss_penalties: u64,
    pub virtual_end: VirtualTime,
    pub incomplete: bool,
    pub abort: Option<String>,
}

impl RunReport {
    pub(crate) fn new(executable: &str) -> Self {
        RunReport {
            executable: executable.to_string(),
            events: Vec::new(),
            io_count: 0,
            delivered_blocks: 0,
            hits: 0,
            misses: 0,
            distinct_needed: BTreeSet::new(),
            distinct_delivered: BTreeSet::new(),
            response_sources: (0, 0),
            ring_pushes: 0,
            worker_connections: Vec::new(),
            loss_penalties: 0,
            virtual_end: VirtualTime::ZERO,
            incomplete: false,
            abort: None,
        }
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }

    pub fn mean_latency_us(&self) -> f64 {
        if self.events.is_empty() {
            return 0.0;
        }
        self.events.iter().map(|e| e.latency_us as f64).sum::<f64>() / self.events.len() as f64
    }

    /// Nearest-rank percentile over the per-fault samples.
    pub fn latency_percentile_us(&self, q: f64) -> u64 {
        if self.events.is_empty() {
            return 0;
        }
        let mut samples: Vec<u64> = self.events.iter().map(|e| e.latency_us).collect();
        samples.sort_unstable();
        let rank = ((q * samples.len() as f64).ceil() as usize).clamp(1, samples.len());
        samples[rank - 1]
    }

    /// One row per event: `seq,block,hit,round_trip,latency_us`.
    pub fn csv(&self) -> String {
        let mut out = String::from("seq,block,hit,round_trip,latency_us\n");
        for e in &self.events {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.seq,
                e.block,
                u8::from(e.hit),
                u8::from(e.round_trip),
                e.latency_us
            ));
        }
        out
    }

    pub fn summary_line(&self) -> String {
        format!(
            "# needed={} io={} delivered={} hits={} hit_rate={:.4} mean_us={:.3} p50_us={} p99_us={} incomplete={}",
            self.distinct_needed.len(),
            self.io_count,
            self.delivered_blocks,
            self.hits,
            self.hit_rate(),
            self.mean_latency_us(),
            self.latency_percentile_us(0.50),
            self.latency_percentile_us(0.99),
            self.incomplete,
        )
    }
}

struct WorkItem {
    frame: RequestFrame,
    now: VirtualTime,
}

/// The networker: one ring, one reply channel, and one persistent
/// transport per worker. Requests are dispatched round-robin; each fault
/// waits for its own reply, so order is preserved per worker.
struct Networker {
    rings: Vec<Arc<MetadataRing<WorkItem>>>,
    replies: Vec<mpsc::Receiver<Result<Reply, TransportError>>>,
    handles: Vec<JoinHandle<u64>>,
    next: usize,
}

impl Networker {
    fn start(cfg: &ClientConfig, transports: Vec<Box<dyn Transport>>) -> Result<Self, ClientError> {
        if cfg.workers == 0 {
            return Err(ClientError::Config("workers must be at least 1".into()));
        }
        if transports.len() != cfg.workers {
            return Err(ClientError::Config(format!(
                "expected {} transport(s), got {}",
                cfg.workers,
                transports.len()
            )));
        }
        let mut rings = Vec::with_capacity(cfg.workers);
        let mut replies = Vec::with_capacity(cfg.workers);
        let mut handles = Vec::with_capacity(cfg.workers);
        for mut transport in transports {
            let ring = Arc::new(MetadataRing::<WorkItem>::new(
                cfg.ring_capacity,
                cfg.ring_policy,
            ));
            let (reply_tx, reply_rx) = mpsc::channel();
            let worker_ring = Arc::clone(&ring);
            handles.push(std::thread::spawn(move || {
                while let Some(item) = worker_ring.pop() {
                    let result = transport.round_trip(&item.frame, item.now);
                    if reply_tx.send(result).is_err() {
                        break;
                    }
                }
                transport.connection_count()
            }));
            rings.push(ring);
            replies.push(reply_rx);
        }
        Ok(Networker {
            rings,
            replies,
            handles,
            next: 0,
        })
    }

    fn dispatch(&mut self, frame: RequestFrame, now: VirtualTime) -> Result<Reply, ClientError> {
        let worker = self.next;
        self.next = (self.next + 1) % self.rings.len();
        self.rings[worker].push(WorkItem { frame, now })?;
        match self.replies[worker].recv() {
            Ok(result) => Ok(result?),
            Err(_) => Err(ClientError::WorkerGone),
        }
    }

    fn ring_pushes(&self) -> u64 {
        self.rings.iter().map(|r| r.push_count()).sum()
    }

    fn shutdown(self) -> Vec<u64> {
        for ring in &self.rings {
            ring.close();
        }
        drop(self.replies);
        self.handles
            .into_iter()
            .map(|h| h.join().unwrap_or(0))
            .collect()
    }
}

/// Replay a trace through the full client pipeline.
pub fn run_trace(
    trace: &Trace,
    cfg: &ClientConfig,
    mode: &LatencyMode,
    transports: Vec<Box<dyn Transport>>,
) -> Result<RunReport, ClientError> {
    let token = cfg.token.unwrap_or_else(Token::fresh);
    let mut cache = PageCache::new(cfg.cache_pages);
    let pool = PagePool::new(cfg.pool_capacity);
    let mut networker = Networker::start(cfg, transports)?;
    let mut latency_clock = match mode {
        LatencyMode::Model(model) => Some(LatencyClock::new(model)),
        LatencyMode::Measured => None,
    };

    let mut report = RunReport::new(&trace.executable);
    let mut clock = VirtualTime::ZERO;

    'replay: for (seq, event) in trace.events.iter().enumerate() {
        let started = std::time::Instant::now();
        let block = event.block;
        report.distinct_needed.insert(block.0);
        let mut record = EventRecord {
            seq,
            block: block.0,
            hit: false,
            local: false,
            round_trip: false,
            delivered: 0,
            latency_us: 0,
        };

        if cache.get(&trace.executable, block.0).is_some() {
            report.hits += 1;
            record.hit = true;
            record.latency_us = match latency_clock.as_mut() {
                Some(clock) => clock.cache_hit(),
                None => started.elapsed().as_micros() as u64,
            };
        } else {
            report.misses += 1;
            match redirect(&trace.executable, block, &cfg.redirect) {
                Route::Local => {
                    record.local = true;
                    let payload = local_read(&trace.executable, block, cfg.block_size);
                    match pool.acquire(1) {
                        Ok(mut pages) => {
                            cache.insert(
                                &trace.executable,
                                block.0,
                                payload,
                                pages.pop().unwrap(),
                                &pool,
                            );
                        }
                        Err(e) => {
                            report.incomplete = true;
                            report.abort = Some(e.to_string());
                            report.events.push(record);
                            break 'replay;
                        }
                    }
                    record.latency_us = match latency_clock.as_mut() {
                        Some(clock) => clock.local_read(1),
                        None => started.elapsed().as_micros() as u64,
                    };
                }
                Route::Remote => {
                    let frame = RequestFrame {
                        token,
                        executable: trace.executable.clone(),
                        block,
                    };
                    let reply = match networker.dispatch(frame, clock) {
                        Ok(reply) => reply,
                        Err(e) => {
                            report.incomplete = true;
                            report.abort = Some(e.to_string());
                            report.events.push(record);
                            break 'replay;
                        }
                    };
                    report.io_count += 1;
                    record.round_trip = true;
                    if reply.response.status != ResponseStatus::Ok {
                        report.incomplete = true;
                        report.abort = Some(
                            ClientError::ServerStatus {
                                status: reply.response.status,
                                block: block.0,
                            }
                            .to_string(),
                        );
                        report.events.push(record);
                        break 'replay;
                    }

                    let count = reply.response.blocks.len();
                    record.delivered = count;
                    report.delivered_blocks += count as u64;
                    if count > 0 {
                        let handles = match pool.acquire(count) {
                            Ok(handles) => handles,
                            Err(e) => {
                                report.incomplete = true;
                                report.abort = Some(e.to_string());
                                report.events.push(record);
                                break 'replay;
                            }
                        };
                        for ((index, payload), handle) in
                            reply.response.blocks.into_iter().zip(handles)
                        {
                            report.distinct_delivered.insert(index.0);
                            cache.insert(&trace.executable, index.0, payload, handle, &pool);
                        }
                    }

                    let sources: Vec<BlockSource> = match &reply.sources {
                        Some(sources) => sources.clone(),
                        // Live TCP replays cannot see server-side sources;
                        // price them as memory reads.
                        None => vec![BlockSource::Memcache; count],
                    };
                    for s in &sources {
                        match s {
                            BlockSource::Memcache => report.response_sources.0 += 1,
                            BlockSource::Backing => report.response_sources.1 += 1,
                        }
                    }
                    record.latency_us = match latency_clock.as_mut() {
                        Some(clock) => clock.round_trip(&sources),
                        None => started.elapsed().as_micros() as u64,
                    };
                }
            }
        }

        // The virtual clock advances by the fault's cost plus the think
        // time the application spends before the next fault.
        if latency_clock.is_some() {
            clock += record.latency_us;
        }
        clock += event.think_time_us;
        report.events.push(record);
    }

    report.virtual_end = clock;
    report.ring_pushes = networker.ring_pushes();
    report.loss_penalties = latency_clock.map(|c| c.penalties_drawn).unwrap_or(0);
    report.worker_connections = networker.shutdown();
    Ok(report)
}

/// Replay against an in-process server with a deterministic latency model.
pub fn run_trace_inproc(
    trace: &Trace,
    cfg: &ClientConfig,
    model: &LatencyModel,
    server: Arc<Mutex<Server>>,
) -> Result<RunReport, ClientError> {
    let transports: Vec<Box<dyn Transport>> = (0..cfg.workers)
        .map(|_| Box::new(InProcessTransport::new(Arc::clone(&server))) as Box<dyn Transport>)
        .collect();
    run_trace(trace, cfg, &LatencyMode::Model(model.clone()), transports)
}

/// Replay against a live server over TCP; one persistent connection per
/// worker.
pub fn run_trace_tcp(
    trace: &Trace,
    cfg: &ClientConfig,
    mode: &LatencyMode,
    addr: &str,
) -> Result<RunReport, ClientError> {
    let mut transports: Vec<Box<dyn Transport>> = Vec::with_capacity(cfg.workers);
    for _ in 0..cfg.workers {
        transports.push(Box::new(TcpTransport::connect(addr, cfg.block_size)?));
    }
    run_trace(trace, cfg, mode, transports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{blocks, ActionKind, ActionStore};
    use crate::predictor::PredictorConfig;
    use crate::provider::{ExecutableImage, Provider, ProviderConfig, Strategy};

    fn inproc_server(streams: &[&[u32]], strategy: Strategy, seg_max: u16) -> Arc<Mutex<Server>> {
        let mut store = ActionStore::new(seg_max);
        for s in streams {
            store
                .append_stream("app", ActionKind::Workload, &blocks(s))
                .unwrap();
        }
        let mut provider = Provider::new(
            64,
            ProviderConfig {
                strategy,
                ..Default::default()
            },
        );
        provider
            .add_image(ExecutableImage::synthetic("app", 2048, 64))
            .unwrap();
        Arc::new(Mutex::new(
            Server::new(
                provider,
                store,
                PredictorConfig {
                    seg_max,
                    ..Default::default()
                },
            )
            .unwrap(),
        ))
    }

    fn client_cfg() -> ClientConfig {
        ClientConfig {
            block_size: 64,
            cache_pages: 256,
            redirect: RedirectSet::from_names(["app"]),
            token: Some(Token([7; 16])),
            ..Default::default()
        }
    }

    #[test]
    fn redirect_routes_by_name_set() {
        let set = RedirectSet::from_names(["python3"]);
        assert_eq!(redirect("python3", BlockIndex(5), &set), Route::Remote);
        assert_eq!(redirect("bash", BlockIndex(5), &set), Route::Local);
        assert_eq!(
            redirect("python3", BlockIndex(5), &RedirectSet::new()),
            Route::Local
        );
    }

    #[test]
    fn warm_action_replay_takes_two_round_trips() {
        let server = inproc_server(&[&[1, 3, 8, 9]], Strategy::NvAsync, 4);
        let trace = Trace::from_blocks("app", &[1, 3, 8, 9]);
        let report =
            run_trace_inproc(&trace, &client_cfg(), &LatencyModel::default(), server).unwrap();
        assert!(!report.incomplete);
        assert_eq!(
            report.io_count, 2,
            "B1 and B8 fault remotely; B3 and B9 hit"
        );
        assert_eq!(report.hits, 2);
        let rt_blocks: Vec<u32> = report
            .events
            .iter()
            .filter(|e| e.round_trip)
            .map(|e| e.block)
            .collect();
        assert_eq!(rt_blocks, vec![1, 8]);
    }

    #[test]
    fn warm_cache_needs_no_round_trip() {
        let server = inproc_server(&[&[1, 3]], Strategy::NvAsync, 4);
        let trace = Trace::from_blocks("app", &[1, 3, 1, 3, 3]);
        let report =
            run_trace_inproc(&trace, &client_cfg(), &LatencyModel::default(), server).unwrap();
        assert_eq!(
            report.io_count, 1,
            "single fetch delivers the whole 2-block action"
        );
        assert_eq!(report.hits, 4);
        // Re-requests of cached blocks never reach the ring.
        assert_eq!(report.ring_pushes, report.io_count);
    }

    #[test]
    fn local_route_uses_stub() {
        let server = inproc_server(&[], Strategy::None, 4);
        let mut cfg = client_cfg();
        cfg.redirect = RedirectSet::new(); // nothing redirected
        let trace = Trace::from_blocks("app", &[0, 1, 0]);
        let report = run_trace_inproc(&trace, &cfg, &LatencyModel::default(), server).unwrap();
        assert_eq!(report.io_count, 0);
        assert!(report.events[0].local);
        assert_eq!(report.hits, 1);
    }

    #[test]
    fn construction_round_trips_equal_distinct_blocks() {
        let server = inproc_server(&[], Strategy::None, 4);
        let stream: Vec<u32> = (0..40).map(|i| (i * 13) % 97).collect();
        let trace = Trace::from_blocks("app", &stream);
        let report =
            run_trace_inproc(&trace, &client_cfg(), &LatencyModel::default(), server).unwrap();
        assert_eq!(report.io_count as usize, report.distinct_needed.len());
        assert_eq!(
            report.delivered_blocks, report.io_count,
            "one block per reply"
        );
    }

    #[test]
    fn stable_replay_round_trips_follow_formula() {
        // Construct then replay: 2 + (ceil(N/seg_max) - 1) round trips.
        let server = inproc_server(&[], Strategy::None, 4);
        let stream: Vec<u32> = (0..22).map(|i| i * 5 % 111).collect();
        let trace = Trace::from_blocks("app", &stream);
        let mut cfg = client_cfg();
        cfg.token = Some(Token([1; 16]));
        run_trace_inproc(&trace, &cfg, &LatencyModel::default(), Arc::clone(&server)).unwrap();
        server.lock().unwrap().finish();

        cfg.token = Some(Token([2; 16]));
        let report = run_trace_inproc(&trace, &cfg, &LatencyModel::default(), server).unwrap();
        let segments = stream.len().div_ceil(4);
        assert_eq!(report.io_count as usize, 2 + (segments - 1));
    }

    #[test]
    fn out_of_range_aborts_with_partial_report() {
        let server = inproc_server(&[], Strategy::None, 4);
        let trace = Trace::from_blocks("app", &[1, 4096]);
        let report =
            run_trace_inproc(&trace, &client_cfg(), &LatencyModel::default(), server).unwrap();
        assert!(report.incomplete);
        assert!(report
            .abort
            .as_deref()
            .unwrap_or("")
            .contains("out_of_range"));
        assert_eq!(report.events.len(), 2);
    }

    #[test]
    fn unknown_executable_aborts() {
        let server = inproc_server(&[], Strategy::None, 4);
        let mut cfg = client_cfg();
        cfg.redirect = RedirectSet::from_names(["ghost"]);
        let trace = Trace::from_blocks("ghost", &[1]);
        let report = run_trace_inproc(&trace, &cfg, &LatencyModel::default(), server).unwrap();
        assert!(report.incomplete);
        assert!(report
            .abort
            .as_deref()
            .unwrap_or("")
            .contains("unknown_executable"));
    }

    #[test]
    fn model_latency_single_cold_block_on_warm_store() {
        // One 1-block action, nv_async: the first segment is preloaded, so
        // the lone fault costs rtt + per_block + mem_read = 240us.
        let server = inproc_server(&[&[5]], Strategy::NvAsync, 4);
        let trace = Trace::from_blocks("app", &[5]);
        let report =
            run_trace_inproc(&trace, &client_cfg(), &LatencyModel::default(), server).unwrap();
        assert_eq!(report.events[0].latency_us, 240);
    }

    #[test]
    fn csv_shape() {
        let server = inproc_server(&[&[1, 3]], Strategy::NvAsync, 4);
        let trace = Trace::from_blocks("app", &[1, 3]);
        let report =
            run_trace_inproc(&trace, &client_cfg(), &LatencyModel::default(), server).unwrap();
        let csv = report.csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("seq,block,hit,round_trip,latency_us"));
        assert!(lines.next().unwrap().starts_with("0,1,0,1,"));
        assert!(lines.next().unwrap().starts_with("1,3,1,0,"));
    }

    #[test]
    fn virtual_clock_accumulates_think_time() {
        let server = inproc_server(&[&[1, 3]], Strategy::NvAsync, 4);
        let mut trace = Trace::from_blocks("app", &[1, 3]);
        trace.events[0].think_time_us = 1000;
        trace.events[1].think_time_us = 500;
        let report =
            run_trace_inproc(&trace, &client_cfg(), &LatencyModel::default(), server).unwrap();
        let latency_total: u64 = report.events.iter().map(|e| e.latency_us).sum();
        assert_eq!(report.virtual_end.as_micros(), latency_total + 1500);
    }

    #[test]
    fn workers_mismatch_is_config_error() {
        let trace = Trace::from_blocks("app", &[1]);
        let err = run_trace(&trace, &client_cfg(), &LatencyMode::Measured, vec![]).unwrap_err();
        assert!(matches!(err, ClientError::Config(_)));
    }
}
