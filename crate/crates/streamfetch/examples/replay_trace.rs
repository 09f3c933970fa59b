//! Replay an execution-order trace through the full client pipeline
//! against an in-process server, twice: a cold first run that constructs
//! the action, then a stable second run that rides the prediction.
//!
//! ```bash
//! cargo run --example replay_trace                 # synthetic python shape
//! cargo run --example replay_trace -- my.trace 256 # trace file + image blocks
//! ```

use streamfetch::latency::LatencyModel;
use streamfetch::model::parse_trace;
use streamfetch::provider::Strategy;
use streamfetch::sim::{construct_store, generate_trace, named_spec, simulate_run, SimSetup};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (trace, total_blocks) = match args.as_slice() {
        [] => {
            let spec = named_spec("python").unwrap();
            (generate_trace(&spec).unwrap(), spec.total_blocks)
        }
        [path, rest @ ..] => {
            let text = std::fs::read_to_string(path).expect("readable trace file");
            let trace = parse_trace(&text).expect("valid trace file");
            let max = trace.events.iter().map(|e| e.block.0).max().unwrap_or(0);
            let total = rest
                .first()
                .map(|t| t.parse().expect("total blocks"))
                .unwrap_or(max + 1);
            (trace, total)
        }
    };

    println!(
        "trace: executable={} events={} distinct={}",
        trace.executable,
        trace.events.len(),
        trace.distinct_blocks()
    );

    let setup = SimSetup::new(trace, total_blocks);
    let model = LatencyModel::default();

    let (store, cold) = construct_store(&setup, &model).unwrap();
    println!("\nrun 1 (cold, construction):");
    println!("  {}", cold.report.summary_line().trim_start_matches("# "));

    let warm = setup.with_store(store).with_strategy(Strategy::NvAsync);
    let outcome = simulate_run(&warm, &model).unwrap();
    println!("\nrun 2 (stable, nv_async):");
    println!(
        "  {}",
        outcome.report.summary_line().trim_start_matches("# ")
    );
    println!("\nmetrics row:");
    println!("  {}", streamfetch::sim::RunMetrics::CSV_HEADER);
    println!("  {}", outcome.metrics.csv_row());

    println!("\nfirst 10 events of run 2:");
    for line in outcome.report.csv().lines().take(11) {
        println!("  {line}");
    }
}
