//! Server-side block supply: executable images, the normalized-variance
//! preloader, and the asynchronous runtime prefetcher.
//!
//! Each image is a flat run of fixed-size blocks, backed by a `<name>.img`
//! file or synthesized deterministically from the name. A per-block
//! residency map plays the role of the server's page cache ("memcache"):
//! response-path reads are tagged with where they were served from, and a
//! backing read promotes the block to resident.
//!
//! Which blocks get warmed, and when, is the strategy:
//! `none` does nothing, `full` preloads whole images, `norm_var` preloads
//! segments whose normalized variance exceeds a threshold (plus the first
//! segment of every action), and `nv_async` adds runtime prefetch of the
//! segments following the one just served.

use crate::model::{Action, ActionStore, BlockIndex, Segment};
use crate::rng::{block_bytes, fnv1a};
use std::collections::{BTreeSet, VecDeque};
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("block {block} out of range for {executable} (total {total})")]
    OutOfRange {
        executable: String,
        block: u32,
        total: u32,
    },
    #[error("no image for executable {0:?}")]
    MissingImage(String),
    #[error("image file {path} is not a whole number of {block_size}-byte blocks ({len} bytes)")]
    RaggedImage {
        path: String,
        block_size: usize,
        len: u64,
    },
    #[error("image {0:?} already present")]
    DuplicateImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a served payload came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSource {
    Memcache,
    Backing,
}

/// How aggressively the server warms its memcache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    None,
    Full,
    NormVar,
    NvAsync,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Strategy::None),
            "full" => Some(Strategy::Full),
            "norm_var" => Some(Strategy::NormVar),
            "nv_async" => Some(Strategy::NvAsync),
            _ => None,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::None => "none",
            Strategy::Full => "full",
            Strategy::NormVar => "norm_var",
            Strategy::NvAsync => "nv_async",
        };
        f.write_str(s)
    }
}

/// Sum vs mean of squared deviations; the threshold semantics follow it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceEstimator {
    Mean,
    Sum,
}

impl VarianceEstimator {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(VarianceEstimator::Mean),
            "sum" => Some(VarianceEstimator::Sum),
            _ => None,
        }
    }
}

/// Min-max normalization of a segment's block indices: each value maps to
/// `(b - min) / (max - min)`, or 0.0 everywhere when the range collapses.
pub fn normalize_segment(segment: &Segment) -> Vec<f64> {
    let min = segment
        .blocks()
        .iter()
        .map(|b| b.0)
        .min()
        .expect("segment non-empty");
    let max = segment
        .blocks()
        .iter()
        .map(|b| b.0)
        .max()
        .expect("segment non-empty");
    if min == max {
        return vec![0.0; segment.len()];
    }
    let span = (max - min) as f64;
    segment
        .blocks()
        .iter()
        .map(|b| (b.0 - min) as f64 / span)
        .collect()
}

/// Population variance of the normalized values (mean estimator), or the
/// plain sum of squared deviations (sum estimator).
pub fn segment_variance_with(segment: &Segment, estimator: VarianceEstimator) -> f64 {
    let normalized = normalize_segment(segment);
    let n = normalized.len() as f64;
    let avg: f64 = normalized.iter().sum::<f64>() / n;
    let sum: f64 = normalized.iter().map(|v| (avg - v) * (avg - v)).sum();
    match estimator {
        VarianceEstimator::Mean => sum / n,
        VarianceEstimator::Sum => sum,
    }
}

/// Default variance: mean of squared deviations of the normalized indices.
pub fn segment_variance(segment: &Segment) -> f64 {
    segment_variance_with(segment, VarianceEstimator::Mean)
}

/// Per-segment scatter statistics.
#[derive(Debug, Clone)]
pub struct SegmentStats {
    pub b_min: BlockIndex,
    pub b_max: BlockIndex,
    pub normalized: Vec<f64>,
    pub variance: f64,
}

pub fn segment_stats(segment: &Segment, estimator: VarianceEstimator) -> SegmentStats {
    let b_min = BlockIndex(segment.blocks().iter().map(|b| b.0).min().unwrap());
    let b_max = BlockIndex(segment.blocks().iter().map(|b| b.0).max().unwrap());
    SegmentStats {
        b_min,
        b_max,
        normalized: normalize_segment(segment),
        variance: segment_variance_with(segment, estimator),
    }
}

#[derive(Debug)]
enum Backing {
    File { file: File, path: PathBuf },
    Synthetic { seed: u64 },
}

#[derive(Debug)]
struct MemCache {
    resident: Vec<bool>,
    fifo: VecDeque<u32>,
    capacity: usize, // 0 = unbounded
    payloads: Vec<Option<Box<[u8]>>>,
}

impl MemCache {
    fn insert(&mut self, index: u32, payload: Box<[u8]>) {
        let i = index as usize;
        if self.resident[i] {
            return;
        }
        if self.capacity > 0 {
            while self.fifo.len() >= self.capacity {
                let evicted = self.fifo.pop_front().unwrap();
                self.resident[evicted as usize] = false;
                self.payloads[evicted as usize] = None;
            }
            self.fifo.push_back(index);
        }
        self.resident[i] = true;
        self.payloads[i] = Some(payload);
    }
}

/// One executable's block store plus its residency map and counters.
#[derive(Debug)]
pub struct ExecutableImage {
    name: String,
    block_size: usize,
    total_blocks: u32,
    backing: Backing,
    cache: Mutex<MemCache>,
    // Response-path counters.
    mem_reads: AtomicU64,
    backing_reads: AtomicU64,
    // Distinct blocks made resident ahead of need (preload + prefetch).
    preread: Mutex<BTreeSet<u32>>,
}

impl ExecutableImage {
    /// Open `<name>.img`; the file length must be a whole number of blocks.
    pub fn open(path: &Path, block_size: usize) -> Result<Arc<Self>, ProviderError> {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        if len % block_size as u64 != 0 {
            return Err(ProviderError::RaggedImage {
                path: path.display().to_string(),
                block_size,
                len,
            });
        }
        let total_blocks = (len / block_size as u64) as u32;
        Ok(Arc::new(Self::with_backing(
            name,
            block_size,
            total_blocks,
            Backing::File {
                file,
                path: path.to_path_buf(),
            },
        )))
    }

    /// A purely in-memory image whose bytes are derived from the name, so
    /// simulations need no files. The same generator backs
    /// [`write_image_file`].
    pub fn synthetic(name: &str, total_blocks: u32, block_size: usize) -> Arc<Self> {
        Arc::new(Self::with_backing(
            name.to_string(),
            block_size,
            total_blocks,
            Backing::Synthetic {
                seed: fnv1a(name.as_bytes()),
            },
        ))
    }

    fn with_backing(name: String, block_size: usize, total_blocks: u32, backing: Backing) -> Self {
        ExecutableImage {
            name,
            block_size,
            total_blocks,
            backing,
            cache: Mutex::new(MemCache {
                resident: vec![false; total_blocks as usize],
                fifo: VecDeque::new(),
                capacity: 0,
                payloads: vec![None; total_blocks as usize],
            }),
            mem_reads: AtomicU64::new(0),
            backing_reads: AtomicU64::new(0),
            preread: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn total_blocks(&self) -> u32 {
        self.total_blocks
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn set_memcache_capacity(&self, blocks: usize) {
        self.cache.lock().unwrap().capacity = blocks;
    }

    pub fn is_resident(&self, block: BlockIndex) -> bool {
        self.cache
            .lock()
            .unwrap()
            .resident
            .get(block.0 as usize)
            .copied()
            .unwrap_or(false)
    }

    /// (memcache reads, backing reads) on the response path so far.
    pub fn response_counters(&self) -> (u64, u64) {
        (
            self.mem_reads.load(Ordering::Relaxed),
            self.backing_reads.load(Ordering::Relaxed),
        )
    }

    /// Distinct blocks made resident ahead of need.
    pub fn preread_blocks(&self) -> BTreeSet<u32> {
        self.preread.lock().unwrap().clone()
    }

    fn read_backing(&self, index: u32) -> Result<Vec<u8>, ProviderError> {
        match &self.backing {
            Backing::Synthetic { seed } => Ok(block_bytes(*seed, index, self.block_size)),
            Backing::File { file, path } => {
                let mut buf = vec![0u8; self.block_size];
                read_at(file, index as u64 * self.block_size as u64, &mut buf).map_err(|e| {
                    ProviderError::Io(std::io::Error::new(
                        e.kind(),
                        format!("{}: {e}", path.display()),
                    ))
                })?;
                Ok(buf)
            }
        }
    }

    /// Response-path read: serve from memcache when resident, otherwise
    /// from backing (promoting the block).
    pub fn read_block(&self, block: BlockIndex) -> Result<(Vec<u8>, BlockSource), ProviderError> {
        if block.0 >= self.total_blocks {
            return Err(ProviderError::OutOfRange {
                executable: self.name.clone(),
                block: block.0,
                total: self.total_blocks,
            });
        }
        {
            let cache = self.cache.lock().unwrap();
            if cache.resident[block.0 as usize] {
                let payload = cache.payloads[block.0 as usize]
                    .as_ref()
                    .map(|p| p.to_vec());
                drop(cache);
                self.mem_reads.fetch_add(1, Ordering::Relaxed);
                // A resident flag without bytes can only come from an
                // evicted-then-reflagged race; fall through to backing then.
                if let Some(payload) = payload {
                    return Ok((payload, BlockSource::Memcache));
                }
            }
        }
        let payload = self.read_backing(block.0)?;
        self.backing_reads.fetch_add(1, Ordering::Relaxed);
        self.cache
            .lock()
            .unwrap()
            .insert(block.0, payload.clone().into_boxed_slice());
        Ok((payload, BlockSource::Backing))
    }

    /// Pull a block into memcache off the response path (preload/prefetch).
    pub fn make_resident(&self, block: BlockIndex) -> Result<bool, ProviderError> {
        if block.0 >= self.total_blocks {
            return Err(ProviderError::OutOfRange {
                executable: self.name.clone(),
                block: block.0,
                total: self.total_blocks,
            });
        }
        if self.is_resident(block) {
            return Ok(false);
        }
        let payload = self.read_backing(block.0)?;
        self.cache
            .lock()
            .unwrap()
            .insert(block.0, payload.into_boxed_slice());
        self.preread.lock().unwrap().insert(block.0);
        Ok(true)
    }
}

fn read_at(file: &File, offset: u64, buf: &mut [u8]) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

/// Write a deterministic image file for `name`; bytes match
/// [`ExecutableImage::synthetic`].
pub fn write_image_file(
    dir: &Path,
    name: &str,
    total_blocks: u32,
    block_size: usize,
) -> Result<PathBuf, ProviderError> {
    use std::io::Write;
    let path = dir.join(format!("{name}.img"));
    let mut file = std::io::BufWriter::new(File::create(&path)?);
    let seed = fnv1a(name.as_bytes());
    for index in 0..total_blocks {
        file.write_all(&block_bytes(seed, index, block_size))?;
    }
    file.into_inner()
        .map_err(|e| ProviderError::Io(e.into_error()))?
        .sync_all()?;
    Ok(path)
}

/// One row of the preload report.
#[derive(Debug, Clone)]
pub struct PreloadEntry {
    pub executable: String,
    pub action_id: u32,
    pub segment: usize,
    pub variance: f64,
    pub preloaded: bool,
    pub first_segment_warmup: bool,
}

#[derive(Debug, Clone, Default)]
pub struct PreloadReport {
    pub entries: Vec<PreloadEntry>,
    pub blocks_loaded: u64,
}

#[derive(Debug, Clone)]
pub struct ProviderConfig {
    pub strategy: Strategy,
    pub variance_threshold: f64,
    pub prefetch_window: usize,
    pub estimator: VarianceEstimator,
    /// 0 = unbounded; otherwise FIFO eviction beyond this many blocks.
    pub memcache_capacity: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            strategy: Strategy::NvAsync,
            variance_threshold: 0.1,
            prefetch_window: 3,
            estimator: VarianceEstimator::Mean,
            memcache_capacity: 0,
        }
    }
}

struct PrefetchShared {
    queue: Mutex<VecDeque<(Arc<ExecutableImage>, Vec<BlockIndex>)>>,
    ready: Condvar,
    shutdown: AtomicBool,
}

/// FIFO of segment-read work, processed off the response path. In
/// background mode a worker thread drains it; simulations call
/// [`Provider::drain_prefetch`] between faults instead.
struct PrefetchQueue {
    shared: Arc<PrefetchShared>,
    worker: Option<JoinHandle<()>>,
}

impl PrefetchQueue {
    fn new() -> Self {
        PrefetchQueue {
            shared: Arc::new(PrefetchShared {
                queue: Mutex::new(VecDeque::new()),
                ready: Condvar::new(),
                shutdown: AtomicBool::new(false),
            }),
            worker: None,
        }
    }

    fn spawn_worker(&mut self) {
        if self.worker.is_some() {
            return;
        }
        let shared = Arc::clone(&self.shared);
        self.worker = Some(std::thread::spawn(move || loop {
            let item = {
                let mut q = shared.queue.lock().unwrap();
                loop {
                    if let Some(item) = q.pop_front() {
                        break Some(item);
                    }
                    if shared.shutdown.load(Ordering::Relaxed) {
                        break None;
                    }
                    q = shared.ready.wait(q).unwrap();
                }
            };
            match item {
                None => return,
                Some((image, indices)) => {
                    for block in indices {
                        let _ = image.make_resident(block);
                    }
                }
            }
        }));
    }

    fn push(&self, image: Arc<ExecutableImage>, indices: Vec<BlockIndex>) {
        self.shared
            .queue
            .lock()
            .unwrap()
            .push_back((image, indices));
        self.shared.ready.notify_one();
    }

    fn drain(&self) {
        loop {
            let item = self.shared.queue.lock().unwrap().pop_front();
            match item {
                None => return,
                Some((image, indices)) => {
                    for block in indices {
                        let _ = image.make_resident(block);
                    }
                }
            }
        }
    }
}

impl Drop for PrefetchQueue {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::Relaxed);
        self.shared.ready.notify_all();
        if let Some(handle) = self.worker.take() {
            let _ = handle.join();
        }
    }
}

/// The block supplier: images plus the warming machinery.
pub struct Provider {
    config: ProviderConfig,
    block_size: usize,
    images: std::collections::BTreeMap<String, Arc<ExecutableImage>>,
    prefetch: PrefetchQueue,
}

impl Provider {
    pub fn new(block_size: usize, config: ProviderConfig) -> Self {
        Provider {
            config,
            block_size,
            images: Default::default(),
            prefetch: PrefetchQueue::new(),
        }
    }

    /// Load every `*.img` file in `dir`.
    pub fn open_dir(
        dir: &Path,
        block_size: usize,
        config: ProviderConfig,
    ) -> Result<Self, ProviderError> {
        let mut provider = Provider::new(block_size, config);
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "img").unwrap_or(false))
            .collect();
        paths.sort();
        for path in paths {
            provider.add_image(ExecutableImage::open(&path, block_size)?)?;
        }
        Ok(provider)
    }

    pub fn add_image(&mut self, image: Arc<ExecutableImage>) -> Result<(), ProviderError> {
        if self.images.contains_key(image.name()) {
            return Err(ProviderError::DuplicateImage(image.name().to_string()));
        }
        if self.config.memcache_capacity > 0 {
            image.set_memcache_capacity(self.config.memcache_capacity);
        }
        self.images.insert(image.name().to_string(), image);
        Ok(())
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn has_image(&self, name: &str) -> bool {
        self.images.contains_key(name)
    }

    pub fn image(&self, name: &str) -> Option<&Arc<ExecutableImage>> {
        self.images.get(name)
    }

    pub fn image_names(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(|s| s.as_str())
    }

    /// Run the worker thread for live serving. Simulations skip this and
    /// call [`Provider::drain_prefetch`] explicitly.
    pub fn start_prefetch_worker(&mut self) {
        self.prefetch.spawn_worker();
    }

    /// Process all queued prefetch work on the calling thread.
    pub fn drain_prefetch(&self) {
        self.prefetch.drain();
    }

    /// Initialization-stage warming for the configured strategy.
    pub fn apply_strategy(&self, store: &ActionStore) -> Result<PreloadReport, ProviderError> {
        match self.config.strategy {
            Strategy::None => Ok(PreloadReport::default()),
            Strategy::Full => self.preload_everything(),
            Strategy::NormVar | Strategy::NvAsync => {
                self.init_preload(store, self.config.variance_threshold)
            }
        }
    }

    /// The whole-image preload used by the `full` strategy.
    fn preload_everything(&self) -> Result<PreloadReport, ProviderError> {
        let mut report = PreloadReport::default();
        for image in self.images.values() {
            for block in 0..image.total_blocks() {
                if image.make_resident(BlockIndex(block))? {
                    report.blocks_loaded += 1;
                }
            }
        }
        Ok(report)
    }

    /// Variance-driven preload: every segment whose normalized variance
    /// exceeds `threshold` becomes resident, and the first segment of every
    /// action is warmed regardless.
    pub fn init_preload(
        &self,
        store: &ActionStore,
        threshold: f64,
    ) -> Result<PreloadReport, ProviderError> {
        let mut report = PreloadReport::default();
        for action in store.iter() {
            let image = self
                .images
                .get(action.executable())
                .ok_or_else(|| ProviderError::MissingImage(action.executable().to_string()))?;
            for (seg_idx, segment) in action.segments().iter().enumerate() {
                let variance = segment_variance_with(segment, self.config.estimator);
                let warmup = seg_idx == 0;
                let preloaded = warmup || variance > threshold;
                if preloaded {
                    for &block in segment.blocks() {
                        if image.make_resident(block)? {
                            report.blocks_loaded += 1;
                        }
                    }
                }
                report.entries.push(PreloadEntry {
                    executable: action.executable().to_string(),
                    action_id: action.id(),
                    segment: seg_idx,
                    variance,
                    preloaded,
                    first_segment_warmup: warmup,
                });
            }
        }
        Ok(report)
    }

    /// Queue the `window` segments after `just_served` for background
    /// residency. Returns the segment indices actually scheduled; segments
    /// already fully resident are skipped. Never touches the queue unless
    /// the strategy prefetches at runtime.
    pub fn runtime_prefetch(
        &self,
        action: &Action,
        just_served: usize,
        window: usize,
    ) -> Vec<usize> {
        if self.config.strategy != Strategy::NvAsync || window == 0 {
            return Vec::new();
        }
        let Some(image) = self.images.get(action.executable()) else {
            return Vec::new();
        };
        let mut scheduled = Vec::new();
        let last = action.segments().len().saturating_sub(1);
        for seg_idx in just_served + 1..=(just_served + window).min(last) {
            let segment = &action.segments()[seg_idx];
            if segment.blocks().iter().all(|&b| image.is_resident(b)) {
                continue;
            }
            self.prefetch
                .push(Arc::clone(image), segment.blocks().to_vec());
            scheduled.push(seg_idx);
        }
        scheduled
    }

    /// Response-path read of a block run, in order, with source tags.
    pub fn read_blocks(
        &self,
        executable: &str,
        indices: &[BlockIndex],
    ) -> Result<Vec<(BlockIndex, Vec<u8>, BlockSource)>, ProviderError> {
        let image = self
            .images
            .get(executable)
            .ok_or_else(|| ProviderError::MissingImage(executable.to_string()))?;
        let mut out = Vec::with_capacity(indices.len());
        for &block in indices {
            let (payload, source) = image.read_block(block)?;
            out.push((block, payload, source));
        }
        Ok(out)
    }
}
