//! Sweep the simulated packet-loss rate over a cold python-shape replay
//! and print the mean-latency knee: flat through 0.1%, degrading at 1%+.
//!
//! ```bash
//! cargo run --example packet_loss_sweep
//! ```

use streamfetch::latency::LatencyModel;
use streamfetch::provider::Strategy;
use streamfetch::sim::{generate_trace, loss_sweep, named_spec, SimSetup};

fn main() {
    let spec = named_spec("python").unwrap();
    let trace = generate_trace(&spec).unwrap();
    let mut setup = SimSetup::new(trace, spec.total_blocks);
    setup.provider.strategy = Strategy::None;

    let model = LatencyModel::default().with_seed(7);
    let rates = [0.0, 0.00001, 0.0001, 0.001, 0.01, 0.1];
    let sweep = loss_sweep(&setup, &model, &rates).unwrap();

    let base = sweep[0].1.mean_us;
    println!(
        "{:>10}  {:>12}  {:>10}  {:>9}",
        "loss_rate", "mean_us", "delta", "penalties"
    );
    for (rate, metrics) in &sweep {
        println!(
            "{:>10}  {:>12.1}  {:>+9.1}%  {:>9}",
            format!("{rate}"),
            metrics.mean_us,
            (metrics.mean_us - base) / base * 100.0,
            metrics.loss_penalties
        );
    }
    println!("\n(each round trip draws once against the loss rate; a loss adds the");
    println!(
        "retransmit penalty of {} us to that fault)",
        model.retransmit_penalty_us
    );
}
