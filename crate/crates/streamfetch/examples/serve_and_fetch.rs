//! Run the real TCP daemon on an ephemeral port, replay a trace against it
//! over the wire protocol, shut it down, and show what it persisted.
//!
//! ```bash
//! cargo run --example serve_and_fetch
//! ```

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use streamfetch::client::{run_trace_tcp, ClientConfig, LatencyMode, RedirectSet};
use streamfetch::model::{load_actions, Trace};
use streamfetch::predictor::PredictorConfig;
use streamfetch::provider::{write_image_file, ProviderConfig};
use streamfetch::server::{serve, ServeOptions};

const BLOCK_SIZE: usize = 512;

fn main() {
    let dir = std::env::temp_dir().join(format!("streamfetch-demo-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    write_image_file(&dir, "demo", 64, BLOCK_SIZE).unwrap();
    let store_path = dir.join("actions.bin");
    println!("images + store under {}", dir.display());

    let options = ServeOptions {
        listen: "127.0.0.1:0".to_string(),
        image_dir: dir.clone(),
        store_path: store_path.clone(),
        block_size: BLOCK_SIZE,
        predictor: PredictorConfig {
            seg_max: 4,
            ..Default::default()
        },
        provider: ProviderConfig::default(),
        tick_interval: Duration::from_millis(50),
    };
    let shutdown = Arc::new(AtomicBool::new(false));
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let daemon = {
        let shutdown = Arc::clone(&shutdown);
        std::thread::spawn(move || {
            serve(&options, shutdown, move |addr| addr_tx.send(addr).unwrap())
        })
    };
    let addr = addr_rx.recv().unwrap().to_string();
    println!("daemon listening on {addr}\n");

    let cfg = ClientConfig {
        block_size: BLOCK_SIZE,
        cache_pages: 64,
        redirect: RedirectSet::from_names(["demo"]),
        ..Default::default()
    };
    let trace = Trace::from_blocks("demo", &[0, 7, 8, 9, 30, 31]);
    let report = run_trace_tcp(&trace, &cfg, &LatencyMode::Measured, &addr).unwrap();
    print!("{}", report.csv());
    println!("{}", report.summary_line());

    shutdown.store(true, Ordering::SeqCst);
    daemon.join().unwrap().unwrap();

    let store = load_actions(std::fs::File::open(&store_path).unwrap()).unwrap();
    println!("\npersisted store: {} action(s)", store.action_count());
    for action in store.iter() {
        let stream: Vec<u32> = action.stream().iter().map(|b| b.0).collect();
        println!(
            "  {} {} id={} stream={stream:?}",
            action.executable(),
            action.kind(),
            action.id()
        );
    }
    let _ = std::fs::remove_dir_all(&dir);
}
