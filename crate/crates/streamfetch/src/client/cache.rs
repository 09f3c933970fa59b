//! Client-side memory management: the allocator-fed page pool and the LRU
//! page cache.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("burst exceeds pool capacity: requested {requested}, capacity {capacity}")]
    BurstExceedsCapacity { requested: usize, capacity: usize },
    #[error("page pool shut down")]
    ShutDown,
}

/// One free page obtained from the allocator. Handles are moved into the
/// page cache and released back to the kernel analog on eviction.
#[derive(Debug, PartialEq, Eq)]
pub struct PageHandle {
    id: u64,
}

impl PageHandle {
    pub fn id(&self) -> u64 {
        self.id
    }
}

struct PoolState {
    free: Vec<PageHandle>,
    next_id: u64,
    shutdown: bool,
}

struct PoolShared {
    state: Mutex<PoolState>,
    replenished: Condvar,
    need: Condvar,
    capacity: usize,
    released: AtomicU64,
    allocated: AtomicU64,
}

/// A fixed-capacity pool of free pages, refilled toward capacity by a
/// background allocator thread. Consumers take whole batches; a batch
/// larger than the capacity can never be satisfied and errors out.
pub struct PagePool {
    shared: Arc<PoolShared>,
    allocator: Option<JoinHandle<()>>,
}

impl PagePool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "pool capacity must be positive");
        let shared = Arc::new(PoolShared {
            state: Mutex::new(PoolState {
                free: Vec::with_capacity(capacity),
                next_id: 0,
                shutdown: false,
            }),
            replenished: Condvar::new(),
            need: Condvar::new(),
            capacity,
            released: AtomicU64::new(0),
            allocated: AtomicU64::new(0),
        });

        // Prefill so the first burst never waits.
        {
            let mut state = shared.state.lock().unwrap();
            while state.free.len() < capacity {
                let id = state.next_id;
                state.next_id += 1;
                state.free.push(PageHandle { id });
            }
            shared.allocated.store(capacity as u64, Ordering::Relaxed);
        }

        let worker_shared = Arc::clone(&shared);
        let allocator = std::thread::spawn(move || {
            let shared = worker_shared;
            let mut state = shared.state.lock().unwrap();
            loop {
                while state.free.len() == shared.capacity && !state.shutdown {
                    state = shared.need.wait(state).unwrap();
                }
                if state.shutdown {
                    return;
                }
                while state.free.len() < shared.capacity {
                    let id = state.next_id;
                    state.next_id += 1;
                    state.free.push(PageHandle { id });
                    shared.allocated.fetch_add(1, Ordering::Relaxed);
                }
                shared.replenished.notify_all();
            }
        });

        PagePool {
            shared,
            allocator: Some(allocator),
        }
    }

    /// Take `n` free pages, waiting for the allocator if necessary. The
    /// batch is all-or-nothing.
    pub fn acquire(&self, n: usize) -> Result<Vec<PageHandle>, PoolError> {
        if n > self.shared.capacity {
            return Err(PoolError::BurstExceedsCapacity {
                requested: n,
                capacity: self.shared.capacity,
            });
        }
        let mut state = self.shared.state.lock().unwrap();
        loop {
            if state.shutdown {
                return Err(PoolError::ShutDown);
            }
            if state.free.len() >= n {
                let at = state.free.len() - n;
                let batch = state.free.split_off(at);
                self.shared.need.notify_one();
                return Ok(batch);
            }
            self.shared.need.notify_one();
            state = self.shared.replenished.wait(state).unwrap();
        }
    }

    /// Return a page to the kernel analog. Released pages do not re-enter
    /// the free list; the allocator mints fresh ones.
    pub fn release(&self, handle: PageHandle) {
        let _returned_to_kernel = handle;
        self.shared.released.fetch_add(1, Ordering::Relaxed);
    }

    pub fn free_count(&self) -> usize {
        self.shared.state.lock().unwrap().free.len()
    }

    pub fn capacity(&self) -> usize {
        self.shared.capacity
    }

    pub fn released_count(&self) -> u64 {
        self.shared.released.load(Ordering::Relaxed)
    }
}

impl Drop for PagePool {
    fn drop(&mut self) {
        self.shared.state.lock().unwrap().shutdown = true;
        self.shared.need.notify_all();
        self.shared.replenished.notify_all();
        if let Some(handle) = self.allocator.take() {
            let _ = handle.join();
        }
    }
}

/// LRU page cache keyed by (executable, block index). A hit refreshes
/// recency; inserting into a full cache evicts the least recently used
/// entry and releases its page.
pub struct PageCache {
    capacity_pages: usize,
    entries: HashMap<(String, u32), CacheEntry>,
    recency: BTreeMap<u64, (String, u32)>,
    tick: u64,
    hits: u64,
    misses: u64,
    evictions: u64,
}

struct CacheEntry {
    payload: Vec<u8>,
    handle: PageHandle,
    last_used: u64,
}

impl PageCache {
    pub fn new(capacity_pages: usize) -> Self {
        PageCache {
            capacity_pages,
            entries: HashMap::new(),
            recency: BTreeMap::new(),
            tick: 0,
            hits: 0,
            misses: 0,
            evictions: 0,
        }
    }

    fn touch(&mut self, key: &(String, u32)) {
        let entry = self.entries.get_mut(key).expect("touched entry exists");
        self.recency.remove(&entry.last_used);
        self.tick += 1;
        entry.last_used = self.tick;
        self.recency.insert(self.tick, key.clone());
    }

    /// Look a block up, refreshing recency on a hit.
    pub fn get(&mut self, executable: &str, block: u32) -> Option<&[u8]> {
        let key = (executable.to_string(), block);
        if self.entries.contains_key(&key) {
            self.hits += 1;
            self.touch(&key);
            Some(self.entries[&key].payload.as_slice())
        } else {
            self.misses += 1;
            None
        }
    }

    pub fn contains(&self, executable: &str, block: u32) -> bool {
        self.entries.contains_key(&(executable.to_string(), block))
    }

    /// Insert a block. Evicts LRU entries as needed, releasing their pages
    /// to `pool`; a duplicate insert keeps the existing entry and releases
    /// the incoming page.
    pub fn insert(
        &mut self,
        executable: &str,
        block: u32,
        payload: Vec<u8>,
        handle: PageHandle,
        pool: &PagePool,
    ) {
        let key = (executable.to_string(), block);
        if self.entries.contains_key(&key) {
            pool.release(handle);
            self.touch(&key);
            return;
        }
        if self.capacity_pages == 0 {
            pool.release(handle);
            return;
        }
        while self.entries.len() >= self.capacity_pages {
            let (&oldest, _) = self.recency.iter().next().expect("recency tracks entries");
            let victim = self.recency.remove(&oldest).unwrap();
            let evicted = self.entries.remove(&victim).unwrap();
            pool.release(evicted.handle);
            self.evictions += 1;
        }
        self.tick += 1;
        self.recency.insert(self.tick, key.clone());
        self.entries.insert(
            key,
            CacheEntry {
                payload,
                handle,
                last_used: self.tick,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counters(&self) -> (u64, u64, u64) {
        (self.hits, self.misses, self.evictions)
    }
}
