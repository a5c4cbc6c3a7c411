//! Counter-based reproducible random streams.
//!
//! Each `StreamRng` is identified by a seed plus a list of stream ids (task
//! index, purpose, ...). Draw i of a stream is a pure function of
//! (seed, ids, i) — the SplitMix64 output function applied to a keyed
//! counter — so distinct streams are independent and any one of them can be
//! replayed without touching the others. Bit-stable across platforms by
//! construction: nothing here depends on library versions or thread timing.

/// SplitMix64 output mix (Steele, Lea, Flood 2014).
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e3779b97f4a7c15;

/// Deterministic counter-based random stream.
#[derive(Clone, Debug)]
pub struct StreamRng {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl StreamRng {
    /// Open the stream identified by `(seed, ids)`.
    pub fn new(seed: u64, ids: &[u64]) -> Self {
        let mut key = mix64(seed.wrapping_add(GOLDEN));
        for &id in ids {
            key = mix64(key ^ mix64(id.wrapping_mul(GOLDEN).wrapping_add(0x2545f4914f6cdd1d)));
        }
        StreamRng { key, counter: 0, spare_normal: None }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        mix64(self.key.wrapping_add(c.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1), 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller; the paired draw is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0,1] so the log is finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}
