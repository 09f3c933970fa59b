//! Glues the predictor and the provider behind the wire protocol.
//!
//! [`Server`] is the in-process form used by simulations and tests; the
//! request/response loop over TCP lives in [`serve`], which the `serve`
//! subcommand drives. Both share the same handling path: validate the
//! executable and block, ask the predictor what to respond, read those
//! blocks through the provider, then hand the prefetch hint back to the
//! provider.

use crate::logfmt;
use crate::model::{save_actions_atomic, ActionStore, StoreError};
use crate::predictor::{Predictor, PredictorConfig, PredictorError, StateChange};
use crate::provider::{BlockSource, PreloadReport, Provider, ProviderConfig, ProviderError};
use crate::time::VirtualTime;
use crate::wire::{self, RequestFrame, ResponseFrame, ResponseStatus, WireError};
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One handled request: the frame to send back, where each payload came
/// from, and what the predictor did (for logging).
#[derive(Debug)]
pub struct Served {
    pub response: ResponseFrame,
    pub sources: Vec<BlockSource>,
    pub change: Option<StateChange>,
}

impl Served {
    fn status(status: ResponseStatus) -> Self {
        Served {
            response: ResponseFrame::error(status),
            sources: Vec::new(),
            change: None,
        }
    }
}

pub struct Server {
    predictor: Predictor,
    provider: Provider,
    preload: PreloadReport,
}

impl Server {
    /// Wire a provider and an action store together: registers every image
    /// with the predictor and runs the strategy's initialization preload.
    pub fn new(
        provider: Provider,
        store: ActionStore,
        predictor_cfg: PredictorConfig,
    ) -> Result<Self, ServerError> {
        let mut predictor = Predictor::new(predictor_cfg, store)?;
        let names: Vec<String> = provider.image_names().map(str::to_string).collect();
        for name in names {
            predictor.register_executable(&name);
        }
        let preload = provider.apply_strategy(predictor.store())?;
        Ok(Server {
            predictor,
            provider,
            preload,
        })
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn provider(&self) -> &Provider {
        &self.provider
    }

    pub fn preload_report(&self) -> &PreloadReport {
        &self.preload
    }

    pub fn store(&self) -> &ActionStore {
        self.predictor.store()
    }

    pub fn handle_frame(
        &mut self,
        frame: &RequestFrame,
        now: VirtualTime,
    ) -> Result<Served, ServerError> {
        let Some(image) = self.provider.image(&frame.executable) else {
            return Ok(Served::status(ResponseStatus::UnknownExecutable));
        };
        if frame.block.0 >= image.total_blocks() {
            return Ok(Served::status(ResponseStatus::OutOfRange));
        }

        let decision =
            match self
                .predictor
                .handle_request(frame.token, &frame.executable, frame.block, now)
            {
                Ok(d) => d,
                Err(PredictorError::UnknownExecutable(_)) => {
                    return Ok(Served::status(ResponseStatus::UnknownExecutable))
                }
                Err(e) => return Err(e.into()),
            };

        let served = match self
            .provider
            .read_blocks(&frame.executable, &decision.respond)
        {
            Ok(blocks) => blocks,
            Err(ProviderError::OutOfRange { .. }) => {
                return Ok(Served::status(ResponseStatus::OutOfRange))
            }
            Err(ProviderError::MissingImage(_)) => {
                return Ok(Served::status(ResponseStatus::UnknownExecutable))
            }
            Err(e) => return Err(e.into()),
        };

        if let Some((action_id, just_served)) = decision.prefetch_from {
            if let Some(action) = self.predictor.store().find(&frame.executable, action_id) {
                let window = self.provider.config().prefetch_window;
                self.provider.runtime_prefetch(action, just_served, window);
            }
        }

        let mut blocks = Vec::with_capacity(served.len());
        let mut sources = Vec::with_capacity(served.len());
        for (index, payload, source) in served {
            blocks.push((index, payload));
            sources.push(source);
        }
        Ok(Served {
            response: ResponseFrame {
                status: ResponseStatus::Ok,
                blocks,
            },
            sources,
            change: Some(decision.change),
        })
    }

    /// Periodic maintenance: finalize overdue constructions, expire idle
    /// sessions.
    pub fn tick(&mut self, now: VirtualTime) -> Vec<StateChange> {
        self.predictor.tick(now)
    }

    /// End-of-run: finalize every in-flight construction.
    pub fn finish(&mut self) -> Vec<StateChange> {
        self.predictor.finish_all()
    }

    pub fn drain_prefetch(&self) {
        self.provider.drain_prefetch();
    }
}

/// Options for the TCP daemon.
pub struct ServeOptions {
    pub listen: String,
    pub image_dir: PathBuf,
    pub store_path: PathBuf,
    pub block_size: usize,
    pub predictor: PredictorConfig,
    pub provider: ProviderConfig,
    /// Sweep interval for timers and the shutdown flag.
    pub tick_interval: Duration,
}

/// Run the daemon until `shutdown` goes true, then persist the action
/// store atomically. `on_ready` receives the bound address.
pub fn serve(
    options: &ServeOptions,
    shutdown: Arc<AtomicBool>,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<(), ServerError> {
    let store = match std::fs::File::open(&options.store_path) {
        Ok(file) => crate::model::load_actions(std::io::BufReader::new(file))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            ActionStore::new(options.predictor.seg_max)
        }
        Err(e) => return Err(e.into()),
    };

    let mut provider = Provider::open_dir(
        &options.image_dir,
        options.block_size,
        options.provider.clone(),
    )?;
    provider.start_prefetch_worker();
    let image_count = provider.image_names().count();
    let server = Server::new(provider, store, options.predictor.clone())?;
    logfmt::info(
        "serve",
        "loaded",
        &[
            ("images", image_count.to_string()),
            ("actions", server.store().action_count().to_string()),
            (
                "preloaded_blocks",
                server.preload_report().blocks_loaded.to_string(),
            ),
        ],
    );

    let listener = TcpListener::bind(&options.listen).map_err(|source| ServerError::Bind {
        addr: options.listen.clone(),
        source,
    })?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    logfmt::info("serve", "listening", &[("addr", addr.to_string())]);
    on_ready(addr);

    let server = Arc::new(Mutex::new(server));
    let epoch = Instant::now();
    let connections = Arc::new(AtomicU64::new(0));
    let mut last_tick = Instant::now();

    loop {
        if shutdown.load(Ordering::Relaxed) {
            break;
        }
        match listener.accept() {
            Ok((stream, peer)) => {
                connections.fetch_add(1, Ordering::Relaxed);
                logfmt::info("serve", "accepted", &[("peer", peer.to_string())]);
                let server = Arc::clone(&server);
                let block_size = options.block_size;
                std::thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, server, epoch, block_size) {
                        logfmt::warn("serve", "connection closed", &[("error", e.to_string())]);
                    }
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(options.tick_interval.min(Duration::from_millis(50)));
            }
            Err(e) => return Err(e.into()),
        }
        if last_tick.elapsed() >= options.tick_interval {
            let now = VirtualTime(epoch.elapsed().as_micros() as u64);
            for change in server.lock().unwrap().tick(now) {
                logfmt::info("serve", "tick", &[("change", change.to_string())]);
            }
            last_tick = Instant::now();
        }
    }

    // Shutdown: dump live sessions, finalize constructions, persist.
    let mut locked = server.lock().unwrap();
    for line in locked.predictor().dump_sessions() {
        logfmt::info("serve", "session", &[("state", line)]);
    }
    for change in locked.finish() {
        logfmt::info("serve", "finalized", &[("change", change.to_string())]);
    }
    let bytes = save_actions_atomic(locked.store(), &options.store_path)?;
    logfmt::info(
        "serve",
        "store persisted",
        &[
            ("path", options.store_path.display().to_string()),
            ("bytes", bytes.to_string()),
            ("actions", locked.store().action_count().to_string()),
        ],
    );
    Ok(())
}

fn handle_connection(
    mut stream: TcpStream,
    server: Arc<Mutex<Server>>,
    epoch: Instant,
    block_size: usize,
) -> Result<(), ServerError> {
    stream.set_nodelay(true).ok();
    loop {
        let frame = match wire::read_request(&mut stream) {
            Ok(frame) => frame,
            Err(WireError::Io(e))
                if e.kind() == std::io::ErrorKind::UnexpectedEof
                    || e.kind() == std::io::ErrorKind::ConnectionReset =>
            {
                return Ok(()); // client hung up
            }
            Err(e) => return Err(e.into()),
        };
        let now = VirtualTime(epoch.elapsed().as_micros() as u64);
        let served = server.lock().unwrap().handle_frame(&frame, now)?;
        let encoded = wire::encode_response(&served.response, block_size)?;
        stream.write_all(&encoded)?;
        stream.flush()?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{blocks, ActionKind};
    use crate::provider::ExecutableImage;
    use crate::wire::Token;

    fn test_server(streams: &[&[u32]], strategy: crate::provider::Strategy) -> Server {
        let mut store = ActionStore::new(4);
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
            .add_image(ExecutableImage::synthetic("app", 64, 64))
            .unwrap();
        Server::new(
            provider,
            store,
            PredictorConfig {
                seg_max: 4,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn request(block: u32) -> RequestFrame {
        RequestFrame {
            token: Token([1; 16]),
            executable: "app".into(),
            block: block.into(),
        }
    }

    #[test]
    fn unknown_executable_status() {
        let mut server = test_server(&[], crate::provider::Strategy::None);
        let mut frame = request(0);
        frame.executable = "ghost".into();
        let served = server.handle_frame(&frame, VirtualTime(0)).unwrap();
        assert_eq!(served.response.status, ResponseStatus::UnknownExecutable);
        assert!(served.response.blocks.is_empty());
    }

    #[test]
    fn out_of_range_status() {
        let mut server = test_server(&[], crate::provider::Strategy::None);
        let served = server.handle_frame(&request(64), VirtualTime(0)).unwrap();
        assert_eq!(served.response.status, ResponseStatus::OutOfRange);
    }

    #[test]
    fn warm_match_returns_first_two_blocks() {
        let mut server = test_server(
            &[&[1, 3, 8, 9, 11, 12, 14, 15]],
            crate::provider::Strategy::NvAsync,
        );
        let served = server.handle_frame(&request(1), VirtualTime(0)).unwrap();
        assert_eq!(served.response.status, ResponseStatus::Ok);
        let indices: Vec<u32> = served.response.blocks.iter().map(|(b, _)| b.0).collect();
        assert_eq!(indices, vec![1, 3]);
        // First segment was warmed at init, so both reads hit memcache.
        assert_eq!(
            served.sources,
            vec![BlockSource::Memcache, BlockSource::Memcache]
        );
    }

    #[test]
    fn generation_prefetch_keeps_backing_off_response_path() {
        // Three segments; nv_async warms segment 0 and prefetches 1,2 once
        // generation starts.
        let mut server = test_server(
            &[&[1, 3, 8, 9, 11, 12, 14, 15, 20, 21, 22, 23]],
            crate::provider::Strategy::NvAsync,
        );
        server.handle_frame(&request(1), VirtualTime(0)).unwrap();
        let served = server.handle_frame(&request(8), VirtualTime(1)).unwrap();
        assert_eq!(served.response.blocks.len(), 2); // (8, 9)
        server.drain_prefetch();

        let served = server.handle_frame(&request(11), VirtualTime(2)).unwrap();
        let indices: Vec<u32> = served.response.blocks.iter().map(|(b, _)| b.0).collect();
        assert_eq!(indices, vec![11, 12, 14, 15]);
        assert!(served.sources.iter().all(|s| *s == BlockSource::Memcache));
        server.drain_prefetch();

        let served = server.handle_frame(&request(20), VirtualTime(3)).unwrap();
        assert!(served.sources.iter().all(|s| *s == BlockSource::Memcache));
        let (_, backing) = server.provider().image("app").unwrap().response_counters();
        assert_eq!(backing, 0);
    }

    #[test]
    fn construction_then_finish_persists_action() {
        let mut server = test_server(&[], crate::provider::Strategy::None);
        for (i, b) in [5u32, 9, 2].into_iter().enumerate() {
            let served = server
                .handle_frame(&request(b), VirtualTime(i as u64))
                .unwrap();
            assert_eq!(served.response.blocks.len(), 1);
        }
        server.finish();
        let action = server.store().find("app", 0).unwrap();
        assert_eq!(action.stream(), blocks(&[5, 9, 2]));
    }

    #[test]
    fn payloads_match_provider_bytes() {
        let mut server = test_server(&[&[1, 3, 8, 9]], crate::provider::Strategy::None);
        let served = server.handle_frame(&request(1), VirtualTime(0)).unwrap();
        let expected = crate::rng::block_bytes(crate::rng::fnv1a(b"app"), 1, 64);
        assert_eq!(served.response.blocks[0].1, expected);
    }
}
