//! Counter-based deterministic random streams.
//!
//! Every stochastic event in the crate — parameter init, candidate rollouts,
//! batch shuffling, task generation, stochastic decoding — draws from its own
//! short-lived ChaCha8 stream whose 256-bit key is assembled from a domain
//! tag plus the event coordinates (seed, step, sequence, position, ...).
//! No generator is ever shared or advanced across events, so any event can be
//! replayed in isolation and results are independent of scheduling order.
//! This is what makes interrupted-and-resumed runs bit-identical to
//! uninterrupted ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags. Arbitrary odd 64-bit constants; they only need to be
/// distinct so that streams for different purposes never collide even when
/// their coordinates do.
pub const DOMAIN_INIT: u64 = 0x9d3f_8e11_b61c_2a75;
pub const DOMAIN_ROLLOUT: u64 = 0x5b1d_64ad_c0ff_ee01;
pub const DOMAIN_SHUFFLE: u64 = 0x27c4_9a0b_11dd_5e43;
pub const DOMAIN_EVAL: u64 = 0x8ba7_30f2_66d1_9c27;
pub const DOMAIN_TASK: u64 = 0xe4d9_0c83_527a_f1b9;

/// SplitMix64 finalizer. Used to fold the domain tag into the user seed so
/// that nearby seeds still produce unrelated key words.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Key of one random stream: a domain-mixed seed plus three free
/// coordinates. The four words form the ChaCha key directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    words: [u64; 4],
}

impl StreamKey {
    /// Builds a key for `(domain, seed)` with up to three event coordinates.
    pub fn new(domain: u64, seed: u64, a: u64, b: u64, c: u64) -> Self {
        StreamKey { words: [mix(seed ^ domain), a, b, c] }
    }

    /// The fresh generator for this key.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        for (chunk, word) in bytes.chunks_exact_mut(8).zip(self.words) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(bytes)
    }
}

/// Stream for drawing the initial values of parameter tensor `tensor_idx`.
pub fn init_stream(seed: u64, tensor_idx: u64) -> ChaCha8Rng {
    StreamKey::new(DOMAIN_INIT, seed, tensor_idx, 0, 0).rng()
}

/// Stream for the candidate rollout at `(step, sequence, position)`.
pub fn rollout_stream(seed: u64, step: u64, seq: u64, pos: u64) -> ChaCha8Rng {
    StreamKey::new(DOMAIN_ROLLOUT, seed, step, seq, pos).rng()
}

/// Stream for shuffling the example order of `epoch`.
pub fn shuffle_stream(seed: u64, epoch: u64) -> ChaCha8Rng {
    StreamKey::new(DOMAIN_SHUFFLE, seed, epoch, 0, 0).rng()
}

/// Stream for stochastic decoding of evaluation example `example_idx`.
pub fn eval_stream(seed: u64, step: u64, example_idx: u64) -> ChaCha8Rng {
    StreamKey::new(DOMAIN_EVAL, seed, step, example_idx, 0).rng()
}

/// Stream for synthetic task generation under `split_seed`.
pub fn task_stream(split_seed: u64) -> ChaCha8Rng {
    StreamKey::new(DOMAIN_TASK, split_seed, 0, 0, 0).rng()
}
