//! Build an action store, persist it, reload it, and print the per-segment
//! scatter statistics the initialization preloader keys off: normalized
//! values, variance, and whether each segment clears the threshold.
//!
//! ```bash
//! cargo run --example action_store_io
//! ```

use streamfetch::model::{blocks, load_actions, save_actions, ActionKind, ActionStore};
use streamfetch::provider::{
    normalize_segment, segment_variance, ExecutableImage, Provider, ProviderConfig,
};

fn main() {
    let mut store = ActionStore::new(4);
    store
        .append_stream("demo", ActionKind::Startup, &blocks(&[0, 1, 2, 3, 4, 5]))
        .unwrap();
    store
        .append_stream(
            "demo",
            ActionKind::Workload,
            &blocks(&[1, 3, 8, 9, 11, 12, 14, 15]),
        )
        .unwrap();
    store
        .append_stream("demo", ActionKind::Exit, &blocks(&[30, 2, 17]))
        .unwrap();

    let mut bytes = Vec::new();
    let written = save_actions(&store, &mut bytes).unwrap();
    println!(
        "serialized {} actions into {written} bytes",
        store.action_count()
    );

    let reloaded = load_actions(&bytes[..]).unwrap();
    assert_eq!(reloaded, store);
    println!(
        "reload round-trips structurally; header seg_max = {}\n",
        reloaded.seg_max()
    );

    let threshold = 0.1;
    println!("per-segment statistics (preload threshold {threshold}):");
    for action in reloaded.iter() {
        println!(
            "  {} {} id={}",
            action.executable(),
            action.kind(),
            action.id()
        );
        for (i, segment) in action.segments().iter().enumerate() {
            let ids: Vec<u32> = segment.blocks().iter().map(|b| b.0).collect();
            let variance = segment_variance(segment);
            let verdict = if i == 0 {
                "preload (first-segment warm-up)"
            } else if variance > threshold {
                "preload (variance above threshold)"
            } else {
                "leave on disk"
            };
            println!(
                "    seg {i}: blocks {ids:?} normalized {:?} variance {:.4} -> {verdict}",
                normalize_segment(segment)
                    .iter()
                    .map(|v| (v * 100.0).round() / 100.0)
                    .collect::<Vec<_>>(),
                (variance * 10_000.0).round() / 10_000.0,
            );
        }
    }

    let mut provider = Provider::new(
        64,
        ProviderConfig {
            variance_threshold: threshold,
            ..Default::default()
        },
    );
    provider
        .add_image(ExecutableImage::synthetic("demo", 40, 64))
        .unwrap();
    let report = provider.init_preload(&reloaded, threshold).unwrap();
    println!(
        "\ninit preload pulled {} blocks into the server memcache",
        report.blocks_loaded
    );
}
