use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A reproducible random stream owned by a single producer.
///
/// Streams are keyed by `(base_seed, worker_id, rank)`. The base seed picks
/// the ChaCha key; worker and rank select one of its independent streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

/// Exact position of an [`RngStream`], stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Stream ids at or above this value are reserved for non-worker consumers
/// (model init, dropout, evaluation sets, file sampling).
pub const RESERVED_STREAMS: u64 = 1 << 40;

impl RngStream {
    /// `base_seed < 0` draws the key from OS entropy.
    pub fn new(base_seed: i64, worker_id: u64, rank: u64) -> Self {
        let mut rng = if base_seed >= 0 {
            ChaCha8Rng::seed_from_u64(base_seed as u64)
        } else {
            ChaCha8Rng::from_os_rng()
        };
        rng.set_stream((worker_id << 16) ^ rank);
        Self { rng }
    }

    /// A stream reserved for an internal purpose (not a data worker).
    pub fn purpose(base_seed: i64, purpose: u64, rank: u64) -> Self {
        let mut s = Self::new(base_seed, 0, 0);
        s.rng.set_stream(RESERVED_STREAMS + (purpose << 16) + rank);
        s
    }

    /// Independent sibling stream sharing this stream's key.
    pub fn fork(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(self.rng.get_seed());
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        Self { rng }
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_in(&mut self, lo: i64, hi: i64) -> i64 {
        self.rng.random_range(lo..=hi)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Uniform real in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
