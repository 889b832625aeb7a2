//! Splittable seeded random streams.
//!
//! Generator: xoshiro256** with the reference update rule
//!
//! ```text
//! result = rotl(s1 * 5, 7) * 9
//! t  = s1 << 17
//! s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
//! s2 ^= t;  s3 = rotl(s3, 45)
//! ```
//!
//! Stream derivation from `(base_seed, stream_id)`: a SplitMix64 sequence
//! started at `base_seed` yields one word `a`; a second SplitMix64 sequence
//! started at `a ^ (stream_id · 0xD1B54A32D192ED03)` yields the four state
//! words. All arithmetic is wrapping 64-bit, so the raw `u64` sequence is
//! identical on every platform.
//!
//! Derived draws: `next_f64 = (next_u64 >> 11) · 2⁻⁵³`; `normal` is the
//! cosine branch of Box–Muller on `(1 − u₁, u₂)`; `index(n)` is the high
//! word of `next_u64 · n`.

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_MULT: u64 = 0xD1B5_4A32_D192_ED03;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Reproducible random stream identified by `(base_seed, stream_id)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeededRng {
    base_seed: u64,
    stream_id: u64,
    state: [u64; 4],
}

/// Derives an independent stream; a pure function of its arguments.
pub fn rng_derive(base_seed: u64, stream_id: u64) -> SeededRng {
    let mut sm = base_seed;
    let a = splitmix64(&mut sm);
    let mut sm2 = a ^ stream_id.wrapping_mul(STREAM_MULT);
    let state = [
        splitmix64(&mut sm2),
        splitmix64(&mut sm2),
        splitmix64(&mut sm2),
        splitmix64(&mut sm2),
    ];
    SeededRng {
        base_seed,
        stream_id,
        state,
    }
}

/// Stream id for an `(entity kind, entity id)` pair.
pub fn stream_key(kind: u32, id: u64) -> u64 {
    ((kind as u64) << 40) ^ id
}

impl SeededRng {
    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian(&mut self, mean: f64, sigma: f64) -> f64 {
        mean + sigma * self.normal()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// A fresh 64-bit seed for a child component.
    pub fn child_seed(&mut self) -> u64 {
        self.next_u64()
    }
}
