//! Deterministic random number generation.
//!
//! A self-contained xoshiro256++ generator seeded through splitmix64, so the
//! same seed produces the same stream on every platform. Sub-streams for data
//! shuffling, initialization, Monte-Carlo noise, and evaluation are derived by
//! mixing the master seed with fixed stream tags, which keeps the streams
//! independent of each other and of consumption order.

use crate::numerics::Tensor2;

/// Fixed tags for the derived sub-streams.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const MC_NOISE: u64 = 3;
    pub const EVAL: u64 = 4;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256++ with Box-Muller normal sampling.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            s,
            cached_normal: None,
        }
    }

    /// Sub-stream for one of the fixed stream tags.
    pub fn substream(seed: u64, tag: u64) -> Self {
        let mut sm = seed ^ tag.wrapping_mul(GOLDEN);
        let mixed = splitmix64(&mut sm);
        Rng::new(mixed)
    }

    /// Sub-stream keyed by tag and a name, e.g. one stream per parameter.
    /// Adding or reshaping one parameter does not disturb the streams of the
    /// others.
    pub fn named_substream(seed: u64, tag: u64, name: &str) -> Self {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        let mut sm = seed ^ tag.wrapping_mul(GOLDEN) ^ h;
        let mixed = splitmix64(&mut sm);
        Rng::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
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

    /// Uniform in (0, 1]; safe as a log argument.
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; the second value of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_tensor(&mut self, rows: usize, cols: usize) -> Tensor2 {
        let data = (0..rows * cols).map(|_| self.normal()).collect();
        Tensor2::new(rows, cols, data)
    }

    /// Standard logistic variate.
    pub fn logistic(&mut self) -> f64 {
        let u = self.uniform_open().min(1.0 - 1e-16);
        (u / (1.0 - u)).ln()
    }

    /// Unbiased integer in [0, n).
    pub fn gen_range(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_range needs n > 0");
        let n = n as u64;
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < limit {
                return (v % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.gen_range(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Index drawn from normalized weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
