//! Deterministic latency model.
//!
//! Per-fault cost is assembled from fixed component prices: a network round
//! trip, a per-block transfer cost, and a per-block read cost on the server
//! that depends on where the block was served from. Packet loss is a
//! Bernoulli draw per round trip that adds a fixed retransmit penalty; the
//! draw threshold is monotone in the loss rate, so the same seed penalizes
//! a superset of round trips at a higher rate.

use crate::provider::BlockSource;
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct LatencyModel {
    /// Cost of one network round trip, in microseconds.
    pub net_rtt_us: u64,
    /// Added per block payload carried in a response.
    pub net_per_block_us: u64,
    /// Server-side backing (disk) read on the response path, per block.
    pub disk_read_us: u64,
    /// Memory read, per block. Also the client page-cache hit cost.
    pub mem_read_us: u64,
    /// Probability that a round trip incurs `retransmit_penalty_us`.
    pub loss_rate: f64,
    /// Ethernet-style retransmission timeout.
    pub retransmit_penalty_us: u64,
    pub seed: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            net_rtt_us: 200,
            net_per_block_us: 35,
            disk_read_us: 500,
            mem_read_us: 5,
            loss_rate: 0.0,
            retransmit_penalty_us: 200_000,
            seed: 1,
        }
    }
}

impl LatencyModel {
    pub fn with_loss(mut self, rate: f64) -> Self {
        self.loss_rate = rate;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A running cost meter for one replay: owns the model plus the loss RNG.
pub struct LatencyClock {
    model: LatencyModel,
    rng: SplitMix64,
    pub penalties_drawn: u64,
}

impl LatencyClock {
    pub fn new(model: &LatencyModel) -> Self {
        LatencyClock {
            model: model.clone(),
            rng: SplitMix64::new(model.seed),
            penalties_drawn: 0,
        }
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    /// Client page-cache hit.
    pub fn cache_hit(&mut self) -> u64 {
        self.model.mem_read_us
    }

    /// Local-route miss served by the local storage stub.
    pub fn local_read(&mut self, block_count: usize) -> u64 {
        self.model.disk_read_us * block_count as u64
    }

    /// One network round trip delivering `sources.len()` blocks. When the
    /// per-block server sources are unknown (live TCP replay) they are
    /// priced as memory reads.
    pub fn round_trip(&mut self, sources: &[BlockSource]) -> u64 {
        let mut cost = self.model.net_rtt_us + self.model.net_per_block_us * sources.len() as u64;
        for source in sources {
            cost += match source {
                BlockSource::Memcache => self.model.mem_read_us,
                BlockSource::Backing => self.model.disk_read_us,
            };
        }
        // One uniform draw per round trip even at loss 0 keeps the stream
        // aligned across loss-rate sweeps with a shared seed.
        if self.rng.next_bool(self.model.loss_rate) {
            self.penalties_drawn += 1;
            cost += self.model.retransmit_penalty_us;
        }
        cost
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_memcache_round_trip_is_240us() {
        let mut clock = LatencyClock::new(&LatencyModel::default());
        assert_eq!(clock.round_trip(&[BlockSource::Memcache]), 240);
    }

    #[test]
    fn backing_blocks_cost_disk_reads() {
        let mut clock = LatencyClock::new(&LatencyModel::default());
        let cost = clock.round_trip(&[BlockSource::Backing, BlockSource::Memcache]);
        assert_eq!(cost, 200 + 2 * 35 + 500 + 5);
    }

    #[test]
    fn loss_draws_are_monotone_in_rate() {
        let n = 5000;
        let mut penalized_low = Vec::new();
        let mut penalized_high = Vec::new();
        for (rate, out) in [(0.001, &mut penalized_low), (0.01, &mut penalized_high)] {
            let mut clock = LatencyClock::new(&LatencyModel::default().with_loss(rate));
            for i in 0..n {
                let base =
                    clock.model.net_rtt_us + clock.model.net_per_block_us + clock.model.mem_read_us;
                if clock.round_trip(&[BlockSource::Memcache]) > base {
                    out.push(i);
                }
            }
        }
        for i in &penalized_low {
            assert!(
                penalized_high.contains(i),
                "higher rate must penalize a superset"
            );
        }
        assert!(penalized_high.len() >= penalized_low.len());
    }

    #[test]
    fn zero_loss_never_penalizes() {
        let mut clock = LatencyClock::new(&LatencyModel::default());
        for _ in 0..1000 {
            clock.round_trip(&[BlockSource::Memcache]);
        }
        assert_eq!(clock.penalties_drawn, 0);
    }
}
