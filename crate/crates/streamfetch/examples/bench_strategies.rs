//! Compare the server warming strategies (none / full / norm_var /
//! nv_async) and the sequential-readahead baseline over the named
//! application shapes.
//!
//! ```bash
//! cargo run --example bench_strategies             # all shapes
//! cargo run --example bench_strategies -- openssl  # one shape
//! ```

use streamfetch::latency::LatencyModel;
use streamfetch::sim::{
    compare_strategies, generate_trace, named_spec, named_spec_names, RunMetrics, SimSetup,
};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let names: Vec<&str> = if args.is_empty() {
        named_spec_names().to_vec()
    } else {
        args.iter().map(String::as_str).collect()
    };

    let model = LatencyModel::default();
    for name in names {
        let Some(spec) = named_spec(name) else {
            eprintln!(
                "unknown spec {name:?}; valid: {}",
                named_spec_names().join(", ")
            );
            std::process::exit(2);
        };
        let trace = generate_trace(&spec).unwrap();
        let setup = SimSetup::new(trace, spec.total_blocks);
        let comparison = compare_strategies(&setup, &model).unwrap();

        println!(
            "== {name} (T={}, N={}) ==",
            spec.total_blocks, comparison.rows[0].needed
        );
        println!("{}", RunMetrics::CSV_HEADER);
        for row in &comparison.rows {
            println!("{}", row.csv_row());
        }
        let none = comparison.find("none").unwrap().mean_us;
        let nv = comparison.find("nv_async").unwrap().mean_us;
        println!(
            "nv_async mean latency is {:.1}% below the no-prefetch run\n",
            (1.0 - nv / none) * 100.0
        );
    }
}
