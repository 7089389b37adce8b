//! Deterministic random numbers with named substreams.
//!
//! Every stochastic component in the crate draws from a [`SeededRng`]. The
//! generator is written out in full (splitmix64 seeding, xoshiro256++ stream,
//! Box-Muller normals) rather than pulled from a crate so that the stream is
//! a fixed, documented artifact: test vectors stay valid across dependency
//! bumps, the raw state words can be stored in checkpoints, and no entropy
//! source is needed (which keeps the crate compiling for wasm targets).
//!
//! Substreams are derived from the *original seed* plus a string tag, never
//! from the current state, so `rng.substream("eval")` yields the same stream
//! no matter how many draws happened in between. Integer and uniform draws
//! are bit-portable; `normal` additionally depends on the platform's `ln`,
//! `sqrt` and `cos` rounding, which is stable within a platform.

/// xoshiro256++ generator with a remembered seed for substream derivation.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: [u64; 4],
    seed: u64,
}

/// splitmix64 step: advances `x` and returns the next output word.
fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes; folds a substream name into a 64-bit word.
fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl SeededRng {
    /// Expands `seed` into the four state words via splitmix64 (the seeding
    /// procedure recommended by the xoshiro authors).
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        SeededRng { state, seed }
    }

    /// The seed this generator (or substream) was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream identified by `tag`.
    ///
    /// Child seed = splitmix64(parent_seed ^ fnv1a(tag)); derivation uses the
    /// parent's seed, not its state, so the result is independent of how many
    /// draws the parent has made.
    pub fn substream(&self, tag: &str) -> SeededRng {
        let mut sm = self.seed ^ fnv1a(tag);
        let child_seed = splitmix64(&mut sm);
        SeededRng::new(child_seed)
    }

    /// Raw state words, e.g. for checkpointing.
    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    /// Rebuilds a generator from checkpointed parts.
    pub fn from_parts(seed: u64, state: [u64; 4]) -> Self {
        SeededRng { state, seed }
    }

    /// Next 64 random bits (xoshiro256++).
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform in {0, 1, ..., n-1}, unbiased (Lemire's multiply-shift with
    /// rejection). Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is meaningless");
        let n = n as u64;
        // Reject the low product words that would over-represent small values.
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u64();
            let wide = u128::from(r) * u128::from(n);
            if (wide as u64) >= threshold {
                return (wide >> 64) as usize;
            }
        }
    }

    /// Uniform in {lo, ..., hi} inclusive. Panics if `lo > hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi, "empty range {lo}..={hi}");
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal via Box-Muller (cosine branch; two words per draw so
    /// there is no cached half-sample to checkpoint).
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `n` independent standard normals.
    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i + 1);
            slice.swap(i, j);
        }
    }

    /// `k` distinct indices drawn uniformly from {0, ..., n-1}, in draw order.
    /// Panics if `k > n`.
    pub fn distinct_below(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values below {n}");
        // Partial Fisher-Yates over an index vector; fine at desk scale.
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
