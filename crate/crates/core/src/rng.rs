//! Seeded random streams.
//!
//! Every stochastic quantity in the pipeline (noise draws, partition masks,
//! shuffles, sampling paths) pulls from its own ChaCha stream derived from a
//! `(seed, domain, index)` triple. Streams are stateless to reconstruct: a
//! resumed training run re-derives the step-`k` stream instead of restoring
//! serialized RNG guts, which is what makes resume equivalence and log replay
//! exact.

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};

/// Domain separation tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Per-step noise draw (t, epsilon) during training.
    TrainStep,
    /// Per-step partition mask during training.
    Partition,
    /// Per-epoch shuffle of the training slices.
    Shuffle,
    /// Acquisition mask generation.
    Mask,
    /// Phantom / coil-map synthesis.
    Data,
    /// Model parameter initialization.
    Init,
    /// One reverse-diffusion sampling path.
    SamplePath,
    /// Validation-time sampling paths.
    Validation,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::TrainStep => 0x1,
            StreamKind::Partition => 0x2,
            StreamKind::Shuffle => 0x3,
            StreamKind::Mask => 0x4,
            StreamKind::Data => 0x5,
            StreamKind::Init => 0x6,
            StreamKind::SamplePath => 0x7,
            StreamKind::Validation => 0x8,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha stream from `(seed, kind, index)`.
pub fn stream(seed: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ kind.tag().rotate_left(17) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw in `(0, 1]`; the open lower bound keeps `ln(u)` finite.
pub fn uniform_open(rng: &mut ChaCha8Rng) -> f64 {
    let bits = rng.next_u64() >> 11; // 53 random bits
    (bits as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0) // 2^-53
}

/// Uniform integer in `[0, n)`.
pub fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0);
    // Modulo bias is below 2^-40 for any n we use; fine for sampling steps.
    (rng.next_u64() % n as u64) as usize
}

/// Standard normal source via Box-Muller, caching the paired draw.
pub struct NormalSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSource {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng, spare: None }
    }

    pub fn from_stream(seed: u64, kind: StreamKind, index: u64) -> Self {
        Self::new(stream(seed, kind, index))
    }

    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = uniform_open(&mut self.rng);
        let u2 = uniform_open(&mut self.rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.next();
        }
    }

    /// Inner RNG, for mixing uniform draws into the same stream.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Fisher-Yates shuffle of `0..n` driven by a derived stream.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = uniform_index(rng, i + 1);
        order.swap(i, j);
    }
    order
}
