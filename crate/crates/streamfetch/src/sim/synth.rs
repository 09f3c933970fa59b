//! Deterministic synthetic fault traces with controllable jump structure,
//! plus the named application shapes (total/needed block counts) used by
//! the benchmarks.

use super::SimError;
use crate::model::{BlockIndex, Trace, TraceEvent};
use crate::rng::{fnv1a, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JumpModel {
    /// Blocks 0..N in order.
    Sequential,
    /// Fixed stride walk over the image, collision-bumped to stay distinct.
    Strided(u32),
    /// Mostly next-unused-block runs, jumping to a random unused block with
    /// the given probability.
    ClusteredJumps(f64),
}

#[derive(Debug, Clone)]
pub struct SyntheticTraceSpec {
    pub executable: String,
    pub total_blocks: u32,
    /// Fraction of the image actually faulted, in (0, 1].
    pub needed_fraction: f64,
    pub jump_model: JumpModel,
    pub seed: u64,
    pub think_time_us: u64,
}

/// Named shapes with (total, needed) block counts of the benchmarked
/// applications: jvm (2803, 1651), python (1149, 519), perl (782, 408),
/// gcc (269, 97), openssl (131, 63).
pub fn named_spec(name: &str) -> Option<SyntheticTraceSpec> {
    let (total, needed): (u32, u32) = match name {
        "jvm" => (2803, 1651),
        "python" => (1149, 519),
        "perl" => (782, 408),
        "gcc" => (269, 97),
        "openssl" => (131, 63),
        _ => return None,
    };
    Some(SyntheticTraceSpec {
        executable: name.to_string(),
        total_blocks: total,
        needed_fraction: needed as f64 / total as f64,
        jump_model: JumpModel::ClusteredJumps(0.15),
        seed: fnv1a(name.as_bytes()),
        think_time_us: 0,
    })
}

pub fn named_spec_names() -> &'static [&'static str] {
    &["jvm", "python", "perl", "gcc", "openssl"]
}

/// Generate the fault trace for a spec: exactly `round(T * fraction)`
/// distinct blocks, visited once each in the requested jump structure,
/// reproducible from the seed.
pub fn generate_trace(spec: &SyntheticTraceSpec) -> Result<Trace, SimError> {
    if spec.total_blocks == 0 {
        return Err(SimError::BadSpec("total_blocks must be positive".into()));
    }
    if !(spec.needed_fraction > 0.0 && spec.needed_fraction <= 1.0) {
        return Err(SimError::BadSpec(format!(
            "needed_fraction {} outside (0, 1]",
            spec.needed_fraction
        )));
    }
    let total = spec.total_blocks;
    let needed = ((total as f64) * spec.needed_fraction).round() as u32;
    if needed == 0 || needed > total {
        return Err(SimError::BadSpec(format!(
            "needed_fraction {} yields {needed} of {total} blocks",
            spec.needed_fraction
        )));
    }

    let blocks: Vec<u32> = match spec.jump_model {
        JumpModel::Sequential => (0..needed).collect(),
        JumpModel::Strided(stride) => {
            if stride == 0 {
                return Err(SimError::BadSpec("stride must be positive".into()));
            }
            let mut used = vec![false; total as usize];
            let mut out = Vec::with_capacity(needed as usize);
            let mut at = 0u32;
            for _ in 0..needed {
                while used[at as usize] {
                    at = (at + 1) % total;
                }
                used[at as usize] = true;
                out.push(at);
                at = (at + stride) % total;
            }
            out
        }
        JumpModel::ClusteredJumps(p) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::BadSpec(format!(
                    "jump probability {p} outside [0, 1]"
                )));
            }
            let mut rng = SplitMix64::new(spec.seed);
            let mut unused: Vec<u32> = (0..total).collect();
            let mut out = Vec::with_capacity(needed as usize);
            // Execution starts at the entry block.
            let mut cursor = unused.remove(0);
            out.push(cursor);
            for _ in 1..needed {
                let pick = if rng.next_bool(p) {
                    rng.next_below(unused.len() as u64) as usize
                } else {
                    // The smallest unused block after the cursor, wrapping.
                    unused
                        .iter()
                        .enumerate()
                        .filter(|(_, &b)| b > cursor)
                        .min_by_key(|(_, &b)| b)
                        .map(|(i, _)| i)
                        .unwrap_or_else(|| {
                            unused
                                .iter()
                                .enumerate()
                                .min_by_key(|(_, &b)| b)
                                .map(|(i, _)| i)
                                .expect("unused non-empty")
                        })
                };
                cursor = unused.swap_remove(pick);
                out.push(cursor);
            }
            out
        }
    };

    Ok(Trace {
        executable: spec.executable.clone(),
        events: blocks
            .into_iter()
            .map(|b| TraceEvent {
                block: BlockIndex(b),
                think_time_us: spec.think_time_us,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_full_coverage() {
        let spec = SyntheticTraceSpec {
            executable: "app".into(),
            total_blocks: 100,
            needed_fraction: 1.0,
            jump_model: JumpModel::Sequential,
            seed: 0,
            think_time_us: 0,
        };
        let trace = generate_trace(&spec).unwrap();
        let blocks: Vec<u32> = trace.events.iter().map(|e| e.block.0).collect();
        assert_eq!(blocks, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn clustered_is_deterministic_and_distinct() {
        let spec = SyntheticTraceSpec {
            executable: "app".into(),
            total_blocks: 200,
            needed_fraction: 0.4,
            jump_model: JumpModel::ClusteredJumps(0.2),
            seed: 7,
            think_time_us: 0,
        };
        let a = generate_trace(&spec).unwrap();
        let b = generate_trace(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.events.len(), 80);
        assert_eq!(a.distinct_blocks(), 80);
        assert!(a.events.iter().all(|e| e.block.0 < 200));
    }

    #[test]
    fn strided_is_distinct() {
        let spec = SyntheticTraceSpec {
            executable: "app".into(),
            total_blocks: 64,
            needed_fraction: 1.0,
            jump_model: JumpModel::Strided(10),
            seed: 0,
            think_time_us: 0,
        };
        let trace = generate_trace(&spec).unwrap();
        assert_eq!(trace.distinct_blocks(), 64);
    }

    #[test]
    fn named_specs_hit_their_needed_counts() {
        for (name, total, needed) in [
            ("jvm", 2803u32, 1651usize),
            ("python", 1149, 519),
            ("perl", 782, 408),
            ("gcc", 269, 97),
            ("openssl", 131, 63),
        ] {
            let spec = named_spec(name).unwrap();
            assert_eq!(spec.total_blocks, total);
            let trace = generate_trace(&spec).unwrap();
            assert_eq!(trace.events.len(), needed, "{name}");
            assert_eq!(trace.distinct_blocks(), needed, "{name}");
        }
        assert!(named_spec("emacs").is_none());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut spec = named_spec("gcc").unwrap();
        spec.needed_fraction = 0.0;
        assert!(generate_trace(&spec).is_err());
        spec.needed_fraction = 1.5;
        assert!(generate_trace(&spec).is_err());
    }

    #[test]
    fn clustered_mostly_runs_sequentially() {
        let spec = SyntheticTraceSpec {
            executable: "app".into(),
            total_blocks: 500,
            needed_fraction: 0.8,
            jump_model: JumpModel::ClusteredJumps(0.1),
            seed: 3,
            think_time_us: 0,
        };
        let trace = generate_trace(&spec).unwrap();
        let blocks: Vec<u32> = trace.events.iter().map(|e| e.block.0).collect();
        let ascending_steps = blocks
            .windows(2)
            .filter(|w| w[1] > w[0] && w[1] - w[0] <= 3)
            .count();
        assert!(
            ascending_steps * 2 > blocks.len(),
            "low jump probability should keep most steps near-sequential"
        );
    }
}
