//! Counter-based random streams.
//!
//! Every random quantity in the crate comes from a pure function of
//! `(seed, stream, counter)`, so any value can be regenerated without replaying
//! the values before it. The construction is SplitMix64 driven by a counter:
//!
//! ```text
//! key(seed, stream) = seed ^ mix64(stream_tag · γ)
//! draw(key, k)      = mix64(key + (k + 1) · γ)        (wrapping u64 arithmetic)
//! γ                 = 0x9E37_79B9_7F4A_7C15
//! mix64(z)          = SplitMix64 finalizer (xor-shift 30/27/31, multipliers
//!                     0xBF58_476D_1CE4_E5B9 and 0x94D0_49BB_1331_11EB)
//! ```
//!
//! Derived values:
//! * uniform in `[0, 1)`: `(draw >> 11) · 2⁻⁵³`
//! * integer in `[0, n)`: `(draw · n) >> 64` computed in 128 bits
//! * standard normal: Box–Muller on two consecutive uniforms `u₁, u₂`,
//!   `√(−2 ln(1 − u₁)) · cos(2π u₂)`
//!
//! Each role (dataset, sample index, initialization, replacement, test set)
//! has its own stream tag so that, for example, changing the index seed never
//! perturbs the data.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Role of a random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Dataset = 1,
    Index = 2,
    Init = 3,
    Replacement = 4,
    TestSet = 5,
    Replicate = 6,
}

pub fn stream_key(seed: u64, stream: Stream) -> u64 {
    seed ^ mix64((stream as u64).wrapping_mul(GAMMA))
}

/// Derives an independent child seed, e.g. one per replicate.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(stream_key(seed, Stream::Replicate).wrapping_add(tag.wrapping_add(1).wrapping_mul(GAMMA)))
}

#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self { key: stream_key(seed, stream), counter: 0 }
    }

    /// The `k`-th draw of the stream, independent of any other draws.
    pub fn draw_at(seed: u64, stream: Stream, k: u64) -> u64 {
        mix64(stream_key(seed, stream).wrapping_add(k.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    pub fn uniform(&mut self) -> f64 {
        to_unit(self.next_u64())
    }

    pub fn below(&mut self, n: usize) -> usize {
        scale_below(self.next_u64(), n)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[inline]
fn to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn scale_below(x: u64, n: usize) -> usize {
    ((x as u128 * n as u128) >> 64) as usize
}

/// Sample index drawn at counter `k` of the index stream: a pure function of
/// `(index_seed, n, k)`.
pub fn index_at(index_seed: u64, n: usize, k: u64) -> usize {
    scale_below(CounterRng::draw_at(index_seed, Stream::Index, k), n)
}
