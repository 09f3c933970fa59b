//! Live-socket tests of the client pipeline: persistent connections,
//! reconnect-once behavior, server-observed FIFO order, and the daemon's
//! persist-on-shutdown path.

use std::io::Write;
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use streamfetch::client::{run_trace_tcp, ClientConfig, LatencyMode, RedirectSet};
use streamfetch::model::{load_actions, ActionStore, Trace};
use streamfetch::predictor::PredictorConfig;
use streamfetch::provider::{write_image_file, ExecutableImage, Provider, ProviderConfig};
use streamfetch::server::{serve, ServeOptions, Server};
use streamfetch::wire;
use streamfetch::VirtualTime;

const BLOCK_SIZE: usize = 64;

struct TestDaemon {
    addr: String,
    accepts: Arc<AtomicU64>,
    seen_blocks: Arc<Mutex<Vec<u32>>>,
}

/// A minimal accept loop over an in-process [`Server`]. `per_conn_limit`
/// closes each connection after that many responses, to provoke client
/// reconnects.
fn spawn_daemon(total_blocks: u32, per_conn_limit: Option<usize>) -> TestDaemon {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let accepts = Arc::new(AtomicU64::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));

    let mut provider = Provider::new(BLOCK_SIZE, ProviderConfig::default());
    provider
        .add_image(ExecutableImage::synthetic("app", total_blocks, BLOCK_SIZE))
        .unwrap();
    let server = Arc::new(Mutex::new(
        Server::new(
            provider,
            ActionStore::new(4),
            PredictorConfig {
                seg_max: 4,
                ..Default::default()
            },
        )
        .unwrap(),
    ));

    let accepts_counter = Arc::clone(&accepts);
    let seen_log = Arc::clone(&seen);
    std::thread::spawn(move || loop {
        let Ok((mut stream, _)) = listener.accept() else {
            return;
        };
        accepts_counter.fetch_add(1, Ordering::SeqCst);
        let server = Arc::clone(&server);
        let seen = Arc::clone(&seen_log);
        std::thread::spawn(move || {
            let mut served = 0usize;
            loop {
                if per_conn_limit.is_some_and(|limit| served >= limit) {
                    return; // drop the connection mid-run
                }
                let Ok(frame) = wire::read_request(&mut stream) else {
                    return;
                };
                seen.lock().unwrap().push(frame.block.0);
                let reply = server
                    .lock()
                    .unwrap()
                    .handle_frame(&frame, VirtualTime(served as u64))
                    .unwrap();
                let encoded = wire::encode_response(&reply.response, BLOCK_SIZE).unwrap();
                if stream.write_all(&encoded).is_err() {
                    return;
                }
                served += 1;
            }
        });
    });

    TestDaemon {
        addr,
        accepts,
        seen_blocks: seen,
    }
}

fn client_cfg(workers: usize) -> ClientConfig {
    ClientConfig {
        block_size: BLOCK_SIZE,
        cache_pages: 2048,
        workers,
        redirect: RedirectSet::from_names(["app"]),
        ..Default::default()
    }
}

#[test]
fn thousand_requests_reuse_one_connection() {
    let daemon = spawn_daemon(1024, None);
    let blocks: Vec<u32> = (0..1000).collect();
    let trace = Trace::from_blocks("app", &blocks);
    let report =
        run_trace_tcp(&trace, &client_cfg(1), &LatencyMode::Measured, &daemon.addr).unwrap();
    assert!(!report.incomplete, "abort: {:?}", report.abort);
    assert_eq!(report.io_count, 1000);
    assert_eq!(
        daemon.accepts.load(Ordering::SeqCst),
        1,
        "one persistent connection"
    );
    assert_eq!(report.worker_connections, vec![1]);
}

#[test]
fn connection_count_equals_worker_count() {
    let daemon = spawn_daemon(256, None);
    let blocks: Vec<u32> = (0..120).collect();
    let trace = Trace::from_blocks("app", &blocks);
    let report =
        run_trace_tcp(&trace, &client_cfg(3), &LatencyMode::Measured, &daemon.addr).unwrap();
    assert!(!report.incomplete);
    assert_eq!(daemon.accepts.load(Ordering::SeqCst), 3);
    assert_eq!(report.worker_connections, vec![1, 1, 1]);
}

#[test]
fn reconnects_once_when_connection_drops() {
    // The server hangs up after every 2 responses; the client must
    // reconnect and retry without surfacing an error.
    let daemon = spawn_daemon(256, Some(2));
    let blocks: Vec<u32> = (0..6).map(|i| i * 40).collect();
    let trace = Trace::from_blocks("app", &blocks);
    let report =
        run_trace_tcp(&trace, &client_cfg(1), &LatencyMode::Measured, &daemon.addr).unwrap();
    assert!(!report.incomplete, "abort: {:?}", report.abort);
    assert_eq!(report.io_count, 6);
    assert_eq!(
        report.worker_connections,
        vec![3],
        "initial connect plus two reconnects"
    );
    assert_eq!(daemon.accepts.load(Ordering::SeqCst), 3);
}

#[test]
fn server_sees_fault_order() {
    let daemon = spawn_daemon(512, None);
    let blocks: Vec<u32> = vec![9, 200, 3, 401, 77, 0, 133];
    let trace = Trace::from_blocks("app", &blocks);
    let report =
        run_trace_tcp(&trace, &client_cfg(1), &LatencyMode::Measured, &daemon.addr).unwrap();
    assert!(!report.incomplete);
    assert_eq!(
        *daemon.seen_blocks.lock().unwrap(),
        blocks,
        "ring preserves FIFO"
    );
}

#[test]
fn serve_daemon_persists_constructed_actions_on_shutdown() {
    let dir = tempfile::tempdir().unwrap();
    write_image_file(dir.path(), "app", 128, BLOCK_SIZE).unwrap();
    let store_path = dir.path().join("actions.bin");

    let options = ServeOptions {
        listen: "127.0.0.1:0".to_string(),
        image_dir: dir.path().to_path_buf(),
        store_path: store_path.clone(),
        block_size: BLOCK_SIZE,
        predictor: PredictorConfig {
            seg_max: 4,
            ..Default::default()
        },
        provider: ProviderConfig::default(),
        tick_interval: Duration::from_millis(20),
    };
    let shutdown = Arc::new(AtomicBool::new(false));
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let daemon = {
        let shutdown = Arc::clone(&shutdown);
        std::thread::spawn(move || {
            serve(&options, shutdown, move |addr| {
                addr_tx.send(addr).unwrap();
            })
        })
    };
    let addr = addr_rx
        .recv_timeout(Duration::from_secs(5))
        .unwrap()
        .to_string();

    let blocks = [5u32, 17, 3, 64];
    let trace = Trace::from_blocks("app", &blocks);
    let report = run_trace_tcp(&trace, &client_cfg(1), &LatencyMode::Measured, &addr).unwrap();
    assert!(!report.incomplete);
    assert_eq!(
        report.io_count, 4,
        "empty store: every block is one construction round trip"
    );

    shutdown.store(true, Ordering::SeqCst);
    daemon.join().unwrap().unwrap();

    let store = load_actions(std::fs::File::open(&store_path).unwrap()).unwrap();
    assert_eq!(store.action_count(), 1);
    let action = &store.actions_for("app")[0];
    let stream: Vec<u32> = action.stream().iter().map(|b| b.value()).collect();
    assert_eq!(
        stream,
        blocks.to_vec(),
        "shutdown finalizes and persists the construction"
    );
}

#[test]
fn serve_daemon_answers_out_of_range_and_unknown() {
    let dir = tempfile::tempdir().unwrap();
    write_image_file(dir.path(), "app", 16, BLOCK_SIZE).unwrap();
    let options = ServeOptions {
        listen: "127.0.0.1:0".to_string(),
        image_dir: dir.path().to_path_buf(),
        store_path: dir.path().join("actions.bin"),
        block_size: BLOCK_SIZE,
        predictor: PredictorConfig {
            seg_max: 4,
            ..Default::default()
        },
        provider: ProviderConfig::default(),
        tick_interval: Duration::from_millis(20),
    };
    let shutdown = Arc::new(AtomicBool::new(false));
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let daemon = {
        let shutdown = Arc::clone(&shutdown);
        std::thread::spawn(move || {
            serve(&options, shutdown, move |addr| {
                addr_tx.send(addr).unwrap();
            })
        })
    };
    let addr = addr_rx
        .recv_timeout(Duration::from_secs(5))
        .unwrap()
        .to_string();

    let trace = Trace::from_blocks("app", &[3, 99]);
    let report = run_trace_tcp(&trace, &client_cfg(1), &LatencyMode::Measured, &addr).unwrap();
    assert!(report.incomplete);
    assert!(report
        .abort
        .as_deref()
        .unwrap_or("")
        .contains("out_of_range"));

    let ghost = Trace::from_blocks("ghost", &[0]);
    let mut cfg = client_cfg(1);
    cfg.redirect = RedirectSet::from_names(["ghost"]);
    let report = run_trace_tcp(&ghost, &cfg, &LatencyMode::Measured, &addr).unwrap();
    assert!(report.incomplete);
    assert!(report
        .abort
        .as_deref()
        .unwrap_or("")
        .contains("unknown_executable"));

    shutdown.store(true, Ordering::SeqCst);
    daemon.join().unwrap().unwrap();
}
