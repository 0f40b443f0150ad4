//! Counter-based random numbers (Philox4x32-10).
//!
//! Every random draw in the crate is addressed by `(key, stream, index, lane)`
//! rather than by position in a sequential generator, so results do not
//! depend on traversal order or on how work is partitioned.

use core::convert::Infallible;

use rand_core::TryRng;
use rand_distr::{Distribution, StandardNormal};

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

/// Stream tags used across the crate. Distinct tags keep unrelated draws
/// that share a seed statistically independent.
pub mod streams {
    pub const HADAMARD_SIGNS: u32 = 1;
    pub const STOCHASTIC_ROUNDING: u32 = 2;
    pub const GAUSSIAN: u32 = 3;
    pub const DERIVE: u32 = 4;
    pub const INIT: u32 = 5;
    pub const DATA: u32 = 6;
}

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// The Philox4x32 bijection with 10 rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(W0);
            k[1] = k[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, c[0]);
        let (hi1, lo1) = mulhilo(M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

#[inline]
fn to_unit_open_right(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A keyed counter-based generator. Cheap to copy; holds no state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: [u32; 2],
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
        }
    }

    pub fn seed(&self) -> u64 {
        self.key[0] as u64 | ((self.key[1] as u64) << 32)
    }

    /// Raw 128-bit block at `(stream, index, lane)`.
    #[inline]
    pub fn block(&self, stream: u32, index: u64, lane: u32) -> [u32; 4] {
        philox4x32_10([index as u32, (index >> 32) as u32, lane, stream], self.key)
    }

    #[inline]
    pub fn u64_at(&self, stream: u32, index: u64) -> u64 {
        let b = self.block(stream, index, 0);
        b[0] as u64 | ((b[1] as u64) << 32)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform_at(&self, stream: u32, index: u64) -> f64 {
        to_unit_open_right(self.u64_at(stream, index))
    }

    /// A child generator whose key is a hash of this key and `tags`.
    pub fn derive(&self, tags: &[u64]) -> Self {
        let mut key = self.seed();
        for (i, &t) in tags.iter().enumerate() {
            let b = CounterRng::new(key).block(streams::DERIVE, t, i as u32);
            key = b[0] as u64 | ((b[1] as u64) << 32);
        }
        Self::new(key)
    }

    /// Sequential view over the blocks `(stream, index, 0..)`.
    pub fn stream(&self, stream: u32, index: u64) -> Stream {
        Stream {
            rng: *self,
            stream,
            index,
            lane: 0,
            buf: [0; 4],
            pos: 4,
        }
    }
}

/// Uniforms in `(0, 1)` addressed by element index: element `n` takes
/// 32-bit word `n % 4` of block `(stream, n / 4, 0)`. The last block is
/// cached, so a sequential sweep costs one Philox call per four elements.
#[derive(Debug, Clone)]
pub struct IndexedUniforms {
    rng: CounterRng,
    stream: u32,
    block: u64,
    words: [u32; 4],
}

impl IndexedUniforms {
    pub fn new(rng: CounterRng, stream: u32) -> Self {
        Self {
            rng,
            stream,
            block: u64::MAX,
            words: rng.block(stream, u64::MAX, 0),
        }
    }

    #[inline]
    pub fn at(&mut self, n: u64) -> f64 {
        let b = n / 4;
        if b != self.block {
            self.block = b;
            self.words = self.rng.block(self.stream, b, 0);
        }
        (self.words[(n % 4) as usize] as f64 + 0.5) * (1.0 / 4_294_967_296.0)
    }
}

/// Sequential draws from one `(stream, index)` address of a [`CounterRng`].
#[derive(Debug, Clone)]
pub struct Stream {
    rng: CounterRng,
    stream: u32,
    index: u64,
    lane: u32,
    buf: [u32; 4],
    pos: usize,
}

impl Stream {
    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        if self.pos == 4 {
            self.buf = self.rng.block(self.stream, self.index, self.lane);
            self.lane = self.lane.wrapping_add(1);
            self.pos = 0;
        }
        let v = self.buf[self.pos];
        self.pos += 1;
        v
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let lo = self.next_u32() as u64;
        lo | ((self.next_u32() as u64) << 32)
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        to_unit_open_right(self.next_u64())
    }

    /// Standard normal (ziggurat).
    #[inline]
    pub fn next_gaussian(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Student-t with `dof` degrees of freedom (heavy-tailed test inputs).
    pub fn next_student_t(&mut self, dof: u32) -> f64 {
        let z = self.next_gaussian();
        let chi2: f64 = (0..dof)
            .map(|_| {
                let g = self.next_gaussian();
                g * g
            })
            .sum();
        z / libm::sqrt(chi2 / dof as f64)
    }
}

impl TryRng for Stream {
    type Error = Infallible;

    #[inline]
    fn try_next_u32(&mut self) -> Result<u32, Infallible> {
        Ok(self.next_u32())
    }

    #[inline]
    fn try_next_u64(&mut self) -> Result<u64, Infallible> {
        Ok(self.next_u64())
    }

    fn try_fill_bytes(&mut self, dst: &mut [u8]) -> Result<(), Infallible> {
        for chunk in dst.chunks_mut(4) {
            let b = self.next_u32().to_le_bytes();
            chunk.copy_from_slice(&b[..chunk.len()]);
        }
        Ok(())
    }
}
