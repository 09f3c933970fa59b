//! Small self-contained PRNG so simulations are bit-reproducible across
//! platforms and crate versions.

/// SplitMix64. One u64 of state, full 64-bit output.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [0, bound). `bound` must be nonzero.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        // Modulo bias is irrelevant at our bounds (tiny vs 2^64).
        self.next_u64() % bound
    }

    pub fn next_bool(&mut self, probability: f64) -> bool {
        self.next_f64() < probability
    }
}

/// FNV-1a over a byte string; used to derive stable seeds from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic payload for one block of a synthetic executable image.
/// The same function backs `.img` file generation and in-memory images,
/// so file-backed and synthetic reads agree byte for byte.
pub fn block_bytes(image_seed: u64, block_index: u32, block_size: usize) -> Vec<u8> {
    let mut rng = SplitMix64::new(image_seed ^ ((block_index as u64) << 20 | 0x5eed));
    let mut out = Vec::with_capacity(block_size);
    while out.len() < block_size {
        let word = rng.next_u64().to_le_bytes();
        let take = word.len().min(block_size - out.len());
        out.extend_from_slice(&word[..take]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_is_deterministic() {
        let mut a = SplitMix64::new(7);
        let mut b = SplitMix64::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn f64_in_unit_interval() {
        let mut rng = SplitMix64::new(99);
        for _ in 0..1000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn block_bytes_stable_and_sized() {
        let a = block_bytes(42, 3, 4096);
        let b = block_bytes(42, 3, 4096);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4096);
        assert_ne!(a, block_bytes(42, 4, 4096));
        assert_ne!(a, block_bytes(43, 3, 4096));
    }

    #[test]
    fn fnv_distinguishes_names() {
        assert_ne!(fnv1a(b"python3"), fnv1a(b"perl"));
    }
}
