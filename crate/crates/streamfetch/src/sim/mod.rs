//! The benchmark harness: deterministic replays against an in-process
//! server, pre-read metrics, the sequential-readahead comparator, strategy
//! comparisons, and a packet-loss knob.

mod baseline;
mod synth;

pub use baseline::baseline_readahead;
pub use synth::{generate_trace, named_spec, named_spec_names, JumpModel, SyntheticTraceSpec};

use crate::client::{self, ClientConfig, ClientError, RedirectSet, RunReport};
use crate::latency::LatencyModel;
use crate::model::{ActionStore, StoreError, Trace};
use crate::predictor::{PredictorConfig, PredictorError};
use crate::provider::{
    ExecutableImage, PreloadReport, Provider, ProviderConfig, ProviderError, Strategy,
};
use crate::server::{Server, ServerError};
use crate::wire::Token;
use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error("internal inconsistency: {0}")]
    Internal(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Pre-read metrics for one run, following the T/N/P breakdown: total
/// blocks, needed (distinct faulted), pre-read (distinct delivered to the
/// client or made server-resident ahead of need), round trips, and
/// blocks-per-IO, plus latency aggregates.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub strategy: String,
    pub total_blocks: u32,
    pub needed: u32,
    pub preread: u32,
    pub io_count: u64,
    pub delivered_blocks: u64,
    pub blocks_per_io: f64,
    pub hit_rate: f64,
    pub mean_us: f64,
    pub p50_us: u64,
    pub p99_us: u64,
    pub response_mem_reads: u64,
    pub response_backing_reads: u64,
    pub loss_penalties: u64,
}

impl RunMetrics {
    pub const CSV_HEADER: &'static str =
        "strategy,T,N,P,io_count,b_per_io,n_t,n_p,p_t,mean_us,p50_us,p99_us";

    pub fn need_over_total(&self) -> f64 {
        ratio(self.needed as f64, self.total_blocks as f64)
    }

    pub fn need_over_preread(&self) -> f64 {
        ratio(self.needed as f64, self.preread as f64)
    }

    pub fn preread_over_total(&self) -> f64 {
        ratio(self.preread as f64, self.total_blocks as f64)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.4},{:.4},{:.4},{:.3},{},{}",
            self.strategy,
            self.total_blocks,
            self.needed,
            self.preread,
            self.io_count,
            self.blocks_per_io,
            self.need_over_total(),
            self.need_over_preread(),
            self.preread_over_total(),
            self.mean_us,
            self.p50_us,
            self.p99_us,
        )
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Compute the T/N/P metrics table for a completed run.
pub fn table2_metrics(
    report: &RunReport,
    image: &ExecutableImage,
    strategy: &str,
) -> Result<RunMetrics, SimError> {
    let needed = report.distinct_needed.len() as u32;
    let local_serves = report.events.iter().filter(|e| e.local).count();
    if report.io_count == 0 && needed > 0 && local_serves == 0 {
        return Err(SimError::Internal(format!(
            "{needed} blocks were needed but no round trips and no local serves happened"
        )));
    }
    let mut preread: BTreeSet<u32> = report.distinct_delivered.clone();
    preread.extend(image.preread_blocks());
    let (mem, backing) = image.response_counters();
    Ok(RunMetrics {
        strategy: strategy.to_string(),
        total_blocks: image.total_blocks(),
        needed,
        preread: preread.len() as u32,
        io_count: report.io_count,
        delivered_blocks: report.delivered_blocks,
        blocks_per_io: ratio(report.delivered_blocks as f64, report.io_count as f64),
        hit_rate: report.hit_rate(),
        mean_us: report.mean_latency_us(),
        p50_us: report.latency_percentile_us(0.50),
        p99_us: report.latency_percentile_us(0.99),
        response_mem_reads: mem,
        response_backing_reads: backing,
        loss_penalties: report.loss_penalties,
    })
}

/// Everything one simulated replay needs: the trace, the image size, and
/// the three component configurations.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub trace: Trace,
    pub total_blocks: u32,
    /// Server-side block size; must agree with `client.block_size`.
    pub block_size: usize,
    pub client: ClientConfig,
    pub predictor: PredictorConfig,
    pub provider: ProviderConfig,
    pub store: ActionStore,
    /// Seeds the per-run token.
    pub run_seed: u64,
}

impl SimSetup {
    /// Sensible defaults: everything redirected, client cache large enough
    /// to hold the whole image, default predictor and provider settings.
    pub fn new(trace: Trace, total_blocks: u32) -> Self {
        let predictor = PredictorConfig::default();
        let client = ClientConfig {
            cache_pages: total_blocks as usize,
            redirect: RedirectSet::from_names([trace.executable.clone()]),
            ..Default::default()
        };
        SimSetup {
            trace,
            total_blocks,
            block_size: client.block_size,
            store: ActionStore::new(predictor.seg_max),
            client,
            predictor,
            provider: ProviderConfig::default(),
            run_seed: 0x5eed,
        }
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.provider.strategy = strategy;
        self
    }

    pub fn with_store(mut self, store: ActionStore) -> Self {
        self.store = store;
        self
    }

    pub fn with_seg_max(mut self, seg_max: u16) -> Self {
        self.predictor.seg_max = seg_max;
        if self.store.is_empty() {
            self.store = ActionStore::new(seg_max);
        }
        self
    }
}

/// The full result of one simulated replay.
#[derive(Debug)]
pub struct SimOutcome {
    pub report: RunReport,
    pub metrics: RunMetrics,
    pub store_after: ActionStore,
    pub preload: PreloadReport,
}

/// Replay `setup.trace` against a freshly built in-process server under the
/// latency model. Deterministic for fixed (setup, model) including seeds.
pub fn simulate_run(setup: &SimSetup, model: &LatencyModel) -> Result<SimOutcome, SimError> {
    if setup.client.block_size != setup.block_size {
        return Err(SimError::ConfigMismatch(format!(
            "client block_size {} != server block_size {}",
            setup.client.block_size, setup.block_size
        )));
    }
    let image = ExecutableImage::synthetic(
        &setup.trace.executable,
        setup.total_blocks,
        setup.block_size,
    );
    let mut provider = Provider::new(setup.block_size, setup.provider.clone());
    provider.add_image(Arc::clone(&image))?;
    let server = Server::new(provider, setup.store.clone(), setup.predictor.clone())?;
    let preload = server.preload_report().clone();
    let server = Arc::new(Mutex::new(server));

    let mut client_cfg = setup.client.clone();
    if client_cfg.token.is_none() {
        client_cfg.token = Some(Token::from_seed(setup.run_seed));
    }
    let report = client::run_trace_inproc(&setup.trace, &client_cfg, model, Arc::clone(&server))?;

    let mut server = Arc::try_unwrap(server)
        .map_err(|_| SimError::Internal("server still shared after replay".into()))?
        .into_inner()
        .unwrap();
    // End-of-run marker: any in-flight construction is finalized now.
    server.finish();

    let strategy = setup.provider.strategy.to_string();
    let metrics = table2_metrics(&report, &image, &strategy)?;
    Ok(SimOutcome {
        report,
        metrics,
        store_after: server.store().clone(),
        preload,
    })
}

/// First run against an empty store: records the trace as actions and
/// returns the store a stable follow-up run can match against.
pub fn construct_store(
    setup: &SimSetup,
    model: &LatencyModel,
) -> Result<(ActionStore, SimOutcome), SimError> {
    let mut first_run = setup.clone();
    first_run.store = ActionStore::new(setup.predictor.seg_max);
    first_run.provider.strategy = Strategy::None;
    first_run.run_seed = setup.run_seed.wrapping_add(0xC0);
    let outcome = simulate_run(&first_run, model)?;
    if outcome.report.incomplete {
        return Err(SimError::Internal(format!(
            "construction run aborted: {}",
            outcome.report.abort.as_deref().unwrap_or("unknown")
        )));
    }
    Ok((outcome.store_after.clone(), outcome))
}

#[derive(Debug)]
pub struct StrategyComparison {
    pub rows: Vec<RunMetrics>,
}

impl StrategyComparison {
    pub fn find(&self, strategy: &str) -> Option<&RunMetrics> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(RunMetrics::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Run the four warming strategies plus the readahead baseline over the
/// same trace and model: construction first, then one cold-client stable
/// replay per strategy against the recorded store.
pub fn compare_strategies(
    setup: &SimSetup,
    model: &LatencyModel,
) -> Result<StrategyComparison, SimError> {
    let (store, _) = construct_store(setup, model)?;
    let mut rows = Vec::new();
    for (idx, strategy) in [
        Strategy::None,
        Strategy::Full,
        Strategy::NormVar,
        Strategy::NvAsync,
    ]
    .iter()
    .enumerate()
    {
        let mut run = setup.clone();
        run.store = store.clone();
        run.provider.strategy = *strategy;
        run.run_seed = setup.run_seed.wrapping_add(idx as u64 + 1);
        let outcome = simulate_run(&run, model)?;
        if outcome.report.incomplete {
            return Err(SimError::Internal(format!(
                "{strategy} run aborted: {}",
                outcome.report.abort.as_deref().unwrap_or("unknown")
            )));
        }
        rows.push(outcome.metrics);
    }
    let (baseline_metrics, _) = baseline_readahead(setup, 32, model)?;
    rows.push(baseline_metrics);
    Ok(StrategyComparison { rows })
}

/// Mean simulated latency across a sweep of packet-loss rates, one fresh
/// cold run per rate with a shared seed.
pub fn loss_sweep(
    setup: &SimSetup,
    model: &LatencyModel,
    rates: &[f64],
) -> Result<Vec<(f64, RunMetrics)>, SimError> {
    let mut out = Vec::with_capacity(rates.len());
    for &rate in rates {
        let swept = model.clone().with_loss(rate);
        let outcome = simulate_run(setup, &swept)?;
        if outcome.report.incomplete {
            return Err(SimError::Internal(format!(
                "loss sweep at {rate} aborted: {}",
                outcome.report.abort.as_deref().unwrap_or("unknown")
            )));
        }
        out.push((rate, outcome.metrics));
    }
    Ok(out)
}
