//! Walk the predictor through its whole lifecycle: record a fresh block
//! stream as an action, then watch a second run get matched, verified at
//! the checkpoint, pushed segment-by-segment, and re-matched after a
//! divergent jump.
//!
//! ```bash
//! cargo run --example construct_and_match
//! ```

use streamfetch::model::{ActionStore, BlockIndex};
use streamfetch::predictor::{Predictor, PredictorConfig};
use streamfetch::wire::Token;
use streamfetch::VirtualTime;

fn send(p: &mut Predictor, token: Token, block: u32, at_us: u64) {
    let decision = p
        .handle_request(token, "demo", BlockIndex(block), VirtualTime(at_us))
        .expect("demo is registered");
    let respond: Vec<u32> = decision.respond.iter().map(|b| b.0).collect();
    println!(
        "  request B{block:<3} -> respond {respond:?}  [{}]",
        decision.change
    );
}

fn main() {
    let cfg = PredictorConfig {
        seg_max: 4,
        ..Default::default()
    };
    let mut predictor = Predictor::new(cfg, ActionStore::new(4)).unwrap();
    predictor.register_executable("demo");

    println!("== run 1: construction (every reply is a single block) ==");
    let run1 = Token::from_seed(1);
    for (i, block) in [1u32, 3, 8, 9, 11, 12, 14, 15].into_iter().enumerate() {
        send(&mut predictor, run1, block, i as u64 * 1000);
    }
    println!("  -- 3s construction window elapses --");
    for change in predictor.tick(VirtualTime(3_000_000)) {
        println!("  {change}");
    }
    for action in predictor.store().iter() {
        let lens: Vec<usize> = action.segments().iter().map(|s| s.len()).collect();
        println!(
            "  stored: {} {} id={} segment lengths {:?}",
            action.executable(),
            action.kind(),
            action.id(),
            lens
        );
    }

    println!();
    println!("== run 2: match + generation (segments pushed whole) ==");
    let run2 = Token::from_seed(2);
    // The client's page cache absorbs B3 and B9; only B1, B8, B11 fault.
    for (i, block) in [1u32, 8, 11].into_iter().enumerate() {
        send(&mut predictor, run2, block, 4_000_000 + i as u64 * 1000);
    }

    println!();
    println!("== run 3: divergence falls back to the all-segment scan ==");
    let run3 = Token::from_seed(3);
    send(&mut predictor, run3, 1, 8_000_000);
    send(&mut predictor, run3, 8, 8_001_000);
    // B11 is expected next; a jump to B14 lands mid-segment, so the scan
    // serves the suffix of the segment that contains it.
    send(&mut predictor, run3, 14, 8_002_000);

    println!();
    println!("live sessions: {}", predictor.session_count());
    for line in predictor.dump_sessions() {
        println!("  {line}");
    }
}
