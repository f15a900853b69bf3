use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A reproducible, splittable random stream.
///
/// A stream is identified by `(seed, stream_id)`. Identical identifiers
/// yield bit-identical draw sequences across runs, and streams with
/// distinct ids share no state, so batches, chains, and replications can
/// each own a derived stream and be generated in any order or in
/// parallel without affecting each other.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Derives a fresh child stream from this stream's identity (not
    /// from its current position), so derivation is pure.
    pub fn substream(&self, child: u64) -> Self {
        Self::new(self.seed, derive_stream_id(self.stream_id, child))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

/// SplitMix64-style mixing of a parent stream id and a child index.
fn derive_stream_id(parent: u64, child: u64) -> u64 {
    let mut z = parent ^ child.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identical_ids_reproduce_draws() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_stream_ids_diverge() {
        let root = RngStream::new(42, 0);
        let mut a = root.substream(1);
        let mut b = root.substream(2);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn substream_derivation_is_pure() {
        let mut root = RngStream::new(42, 0);
        let a = root.substream(5);
        // Advancing the parent must not change what substream(5) means.
        let _: f64 = root.gen();
        let b = root.substream(5);
        assert_eq!(a.stream_id(), b.stream_id());
    }
}
