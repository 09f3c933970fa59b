//! The comparator: a sequential-window readahead client against a dumb
//! block server.
//!
//! This is an acknowledged simplification of the kernel's stream readahead,
//! not a faithful reimplementation: on a miss at block `b` it fetches
//! `[b, b+w)` where `w` doubles from 4 up to `window_max` while misses stay
//! sequential (each miss landing exactly at the end of the previous fetch)
//! and resets to 4 on any jump. Metrics are computed with the same
//! machinery as the real client for a fair comparison.

use super::{table2_metrics, RunMetrics, SimError, SimSetup};
use crate::client::{EventRecord, PageCache, PagePool, RunReport};
use crate::latency::{LatencyClock, LatencyModel};
use crate::model::BlockIndex;
use crate::provider::{BlockSource, ExecutableImage};
use crate::time::VirtualTime;

pub fn baseline_readahead(
    setup: &SimSetup,
    window_max: u32,
    model: &LatencyModel,
) -> Result<(RunMetrics, RunReport), SimError> {
    let trace = &setup.trace;
    let image = ExecutableImage::synthetic(&trace.executable, setup.total_blocks, setup.block_size);
    let mut cache = PageCache::new(setup.client.cache_pages);
    let pool = PagePool::new(setup.client.pool_capacity);
    let mut clock = LatencyClock::new(model);
    let mut report = RunReport::new(&trace.executable);
    let mut now = VirtualTime::ZERO;

    let mut window = 4u32;
    let mut expected_next: Option<u32> = None;

    'replay: for (seq, event) in trace.events.iter().enumerate() {
        let block = event.block.0;
        report.distinct_needed.insert(block);
        let mut record = EventRecord {
            seq,
            block,
            hit: false,
            local: false,
            round_trip: false,
            delivered: 0,
            latency_us: 0,
        };

        if cache.get(&trace.executable, block).is_some() {
            report.hits += 1;
            record.hit = true;
            record.latency_us = clock.cache_hit();
        } else {
            report.misses += 1;
            if block >= setup.total_blocks {
                report.incomplete = true;
                report.abort = Some(format!("block {block} out of range"));
                report.events.push(record);
                break 'replay;
            }
            // Window growth only survives strictly sequential misses.
            window = match expected_next {
                Some(next) if next == block => (window * 2).min(window_max),
                _ => 4,
            };
            let end = (block + window).min(setup.total_blocks);
            let mut sources = Vec::with_capacity((end - block) as usize);
            let handles = match pool.acquire((end - block) as usize) {
                Ok(handles) => handles,
                Err(e) => {
                    report.incomplete = true;
                    report.abort = Some(e.to_string());
                    report.events.push(record);
                    break 'replay;
                }
            };
            for (index, handle) in (block..end).zip(handles) {
                let (payload, source) = match image.read_block(BlockIndex(index)) {
                    Ok(read) => read,
                    Err(e) => {
                        report.incomplete = true;
                        report.abort = Some(e.to_string());
                        break;
                    }
                };
                match source {
                    BlockSource::Memcache => report.response_sources.0 += 1,
                    BlockSource::Backing => report.response_sources.1 += 1,
                }
                sources.push(source);
                report.distinct_delivered.insert(index);
                cache.insert(&trace.executable, index, payload, handle, &pool);
            }
            if report.incomplete {
                report.events.push(record);
                break 'replay;
            }
            report.io_count += 1;
            report.delivered_blocks += sources.len() as u64;
            record.round_trip = true;
            record.delivered = sources.len();
            record.latency_us = clock.round_trip(&sources);
            expected_next = Some(end);
        }

        now += record.latency_us + event.think_time_us;
        report.events.push(record);
    }

    report.virtual_end = now;
    report.loss_penalties = clock.penalties_drawn;
    let metrics = table2_metrics(&report, &image, "baseline")?;
    Ok((metrics, report))
}
