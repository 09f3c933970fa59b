//! The `streamfetch` binary: thin subcommand dispatch over the library.
//!
//! Exit codes: 0 success, 2 usage/configuration problems, 3 transport
//! failures.

use crate::client::{self, ClientError, LatencyMode, RedirectSet};
use crate::config::{ReplayLatency, Settings};
use crate::logfmt;
use crate::model::{load_actions, parse_trace};
use crate::provider::segment_variance_with;
use crate::server::{serve, ServeOptions};
use crate::sim::{compare_strategies, generate_trace, named_spec, named_spec_names, SimSetup};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

#[derive(Parser)]
#[command(
    name = "streamfetch",
    version,
    about = "On-demand executable block streaming: server daemon, trace replay client, benchmark harness"
)]
struct Cli {
    /// Config file with key=value lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set block_size=4096 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Suppress log lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the block server daemon until SIGTERM/SIGINT, then persist the
    /// action store atomically.
    Serve {
        /// Directory of <name>.img executable images.
        #[arg(long, value_name = "DIR")]
        images: PathBuf,
        /// Action store file (created on shutdown if absent).
        #[arg(long, value_name = "FILE")]
        store: PathBuf,
        /// Listen address, e.g. 127.0.0.1:7070 (port 0 picks one).
        #[arg(long, value_name = "ADDR")]
        listen: String,
    },
    /// Replay a trace file against a live server; per-event CSV on stdout.
    Replay {
        #[arg(long, value_name = "FILE")]
        trace: PathBuf,
        /// Server address; falls back to the server_addr config key.
        #[arg(long, value_name = "ADDR")]
        server: Option<String>,
    },
    /// Self-contained strategy comparison on a synthetic spec or trace
    /// file; CSV on stdout.
    Bench {
        /// Named application shape: jvm, python, perl, gcc or openssl.
        #[arg(long, value_name = "NAME", conflicts_with = "trace")]
        spec: Option<String>,
        /// Replay an explicit trace file instead of a named spec.
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
        /// Image size in blocks when --trace is used (default: max index + 1).
        #[arg(long, value_name = "N")]
        total_blocks: Option<u32>,
        /// Also write the CSV to a file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Sweep packet-loss rates instead of comparing strategies.
        #[arg(long)]
        loss_sweep: bool,
    },
    /// Inspect an action store: one line per action with segment lengths
    /// and per-segment variances.
    Actions {
        #[arg(long, value_name = "FILE")]
        store: PathBuf,
    },
}

static SHUTDOWN: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    SHUTDOWN.store(true, Ordering::SeqCst);
}

fn install_signal_flag() -> Arc<AtomicBool> {
    unsafe {
        let handler = on_signal as extern "C" fn(libc::c_int) as usize;
        libc::signal(libc::SIGTERM, handler);
        libc::signal(libc::SIGINT, handler);
    }
    // The static flag is mirrored into an Arc so the server loop does not
    // depend on this module.
    let flag = Arc::new(AtomicBool::new(false));
    let mirror = Arc::clone(&flag);
    std::thread::spawn(move || loop {
        if SHUTDOWN.load(Ordering::SeqCst) {
            mirror.store(true, Ordering::SeqCst);
            return;
        }
        std::thread::sleep(Duration::from_millis(25));
    });
    flag
}

fn load_settings(cli: &Cli) -> Result<Settings, String> {
    let mut settings = Settings::default();
    if let Some(path) = &cli.config {
        let text =
            std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
        settings.apply_file(&text).map_err(|e| e.to_string())?;
    }
    for kv in &cli.set {
        settings.apply_set(kv).map_err(|e| e.to_string())?;
    }
    Ok(settings)
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    if cli.quiet {
        logfmt::set_quiet(true);
    }
    let settings = match load_settings(&cli) {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_CONFIG;
        }
    };
    match &cli.command {
        Command::Serve {
            images,
            store,
            listen,
        } => cmd_serve(&settings, images, store, listen),
        Command::Replay { trace, server } => cmd_replay(&settings, trace, server.as_deref()),
        Command::Bench {
            spec,
            trace,
            total_blocks,
            out,
            loss_sweep,
        } => cmd_bench(
            &settings,
            spec.as_deref(),
            trace.as_deref(),
            *total_blocks,
            out.as_deref(),
            *loss_sweep,
        ),
        Command::Actions { store } => cmd_actions(&settings, store),
    }
}

fn cmd_serve(
    settings: &Settings,
    images: &std::path::Path,
    store: &std::path::Path,
    listen: &str,
) -> i32 {
    let options = ServeOptions {
        listen: listen.to_string(),
        image_dir: images.to_path_buf(),
        store_path: store.to_path_buf(),
        block_size: settings.block_size,
        predictor: settings.predictor_config(),
        provider: settings.provider_config(),
        tick_interval: Duration::from_millis(200),
    };
    let shutdown = install_signal_flag();
    match serve(&options, shutdown, |_| {}) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn cmd_replay(settings: &Settings, trace_path: &std::path::Path, server: Option<&str>) -> i32 {
    let text = match std::fs::read_to_string(trace_path) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: trace {}: {e}", trace_path.display());
            return EXIT_CONFIG;
        }
    };
    let trace = match parse_trace(&text) {
        Ok(trace) => trace,
        Err(e) => {
            eprintln!("error: trace {}: {e}", trace_path.display());
            return EXIT_CONFIG;
        }
    };
    let Some(addr) = server
        .map(str::to_string)
        .or_else(|| settings.server_addr.clone())
    else {
        eprintln!("error: no server address (pass --server or set server_addr)");
        return EXIT_CONFIG;
    };

    let mut cfg = settings.client_config();
    if cfg.redirect.is_empty() {
        // By default the traced executable itself is redirected.
        cfg.redirect = RedirectSet::from_names([trace.executable.clone()]);
    }
    let mode = match settings.latency {
        ReplayLatency::Measured => LatencyMode::Measured,
        ReplayLatency::Model => LatencyMode::Model(settings.latency_model()),
    };

    logfmt::info(
        "replay",
        "starting",
        &[
            ("server", addr.clone()),
            ("executable", trace.executable.clone()),
            ("events", trace.events.len().to_string()),
            ("workers", cfg.workers.to_string()),
        ],
    );
    match client::run_trace_tcp(&trace, &cfg, &mode, &addr) {
        Ok(report) => {
            print!("{}", report.csv());
            println!("{}", report.summary_line());
            if report.incomplete {
                eprintln!(
                    "error: run aborted: {}",
                    report.abort.as_deref().unwrap_or("unknown")
                );
                return EXIT_TRANSPORT;
            }
            EXIT_OK
        }
        Err(ClientError::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_TRANSPORT
        }
    }
}

fn cmd_bench(
    settings: &Settings,
    spec: Option<&str>,
    trace_path: Option<&std::path::Path>,
    total_blocks: Option<u32>,
    out: Option<&std::path::Path>,
    sweep: bool,
) -> i32 {
    let (trace, total) = match (spec, trace_path) {
        (Some(name), None) => {
            let Some(spec) = named_spec(name) else {
                eprintln!(
                    "error: unknown spec {name:?} (expected one of {})",
                    named_spec_names().join(", ")
                );
                return EXIT_CONFIG;
            };
            let total = spec.total_blocks;
            match generate_trace(&spec) {
                Ok(trace) => (trace, total),
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_CONFIG;
                }
            }
        }
        (None, Some(path)) => {
            let text = match std::fs::read_to_string(path) {
                Ok(text) => text,
                Err(e) => {
                    eprintln!("error: trace {}: {e}", path.display());
                    return EXIT_CONFIG;
                }
            };
            match parse_trace(&text) {
                Ok(trace) => {
                    let max = trace.events.iter().map(|e| e.block.0).max().unwrap_or(0);
                    (trace, total_blocks.unwrap_or(max + 1))
                }
                Err(e) => {
                    eprintln!("error: trace {}: {e}", path.display());
                    return EXIT_CONFIG;
                }
            }
        }
        _ => {
            eprintln!("error: pass exactly one of --spec or --trace");
            return EXIT_CONFIG;
        }
    };

    let mut setup = SimSetup::new(trace, total);
    setup.block_size = settings.block_size;
    setup.client = settings.client_config();
    setup.client.cache_pages = settings.cache_pages.max(total as usize);
    setup.client.redirect = RedirectSet::from_names([setup.trace.executable.clone()]);
    setup.predictor = settings.predictor_config();
    setup.provider = settings.provider_config();
    setup.store = crate::model::ActionStore::new(setup.predictor.seg_max);
    setup.run_seed = settings.lat.seed;
    let model = settings.latency_model();

    let csv = if sweep {
        let rates = [0.0, 0.00001, 0.0001, 0.001, 0.01, 0.1];
        match crate::sim::loss_sweep(&setup, &model, &rates) {
            Ok(rows) => {
                let mut csv = String::from("loss_rate,mean_us,p50_us,p99_us,penalties\n");
                for (rate, m) in rows {
                    csv.push_str(&format!(
                        "{rate},{:.3},{},{},{}\n",
                        m.mean_us, m.p50_us, m.p99_us, m.loss_penalties
                    ));
                }
                csv
            }
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        }
    } else {
        match compare_strategies(&setup, &model) {
            Ok(comparison) => comparison.csv(),
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        }
    };

    print!("{csv}");
    if let Some(path) = out {
        if let Err(e) = std::fs::write(path, &csv) {
            eprintln!("error: write {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    }
    EXIT_OK
}

fn cmd_actions(settings: &Settings, store_path: &std::path::Path) -> i32 {
    let file = match std::fs::File::open(store_path) {
        Ok(file) => file,
        Err(e) => {
            eprintln!("error: store {}: {e}", store_path.display());
            return EXIT_CONFIG;
        }
    };
    let store = match load_actions(std::io::BufReader::new(file)) {
        Ok(store) => store,
        Err(e) => {
            eprintln!("error: store {}: {e}", store_path.display());
            return EXIT_CONFIG;
        }
    };
    if store.is_empty() {
        println!("0 actions");
        return EXIT_OK;
    }
    for action in store.iter() {
        let lens: Vec<String> = action
            .segments()
            .iter()
            .map(|s| s.len().to_string())
            .collect();
        let vars: Vec<String> = action
            .segments()
            .iter()
            .map(|s| {
                // Round half away from zero; `{:.4}` alone banker-rounds
                // exact ties like 0.15625 down.
                let v = segment_variance_with(s, settings.variance_estimator);
                format!("{:.4}", (v * 10_000.0).round() / 10_000.0)
            })
            .collect();
        println!(
            "{} {} id={} segs=[{}] var=[{}]",
            action.executable(),
            action.kind(),
            action.id(),
            lens.join(","),
            vars.join(",")
        );
    }
    EXIT_OK
}
