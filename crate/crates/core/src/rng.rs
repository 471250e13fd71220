//! Counter-based Gaussian noise.
//!
//! Every draw is a pure function of `(seed, path, step, component)`, so a
//! path can be simulated by any worker in any order and still see exactly
//! the same noise. The bits come from Philox4x32-10; uniforms are mapped to
//! standard normals by the inverse distribution function.

use crate::special::{inverse_norm_cdf, inverse_norm_cdf_into};

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with ten rounds.
#[inline]
pub fn philox4x32(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
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

/// Map 64 random bits to the open interval (0, 1).
#[inline]
fn to_open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Keyed source of standard normal draws indexed by
/// `(path, step, component)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSource {
    seed: u64,
    key: [u32; 2],
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            key: [seed as u32, (seed >> 32) as u32],
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream derived from this one, for estimators that
    /// must not share draws with the base stream.
    pub fn derive(&self, tag: u64) -> Self {
        let mut z = self.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Self::new(z ^ (z >> 31))
    }

    #[inline]
    fn pair_uniforms(&self, path: u64, pair: u64, component: u32) -> [f64; 2] {
        let ctr = [
            path as u32,
            (path >> 32) as u32,
            pair as u32,
            component ^ ((pair >> 32) as u32).rotate_left(16),
        ];
        let out = philox4x32(ctr, self.key);
        let a = (u64::from(out[0]) << 32) | u64::from(out[1]);
        let b = (u64::from(out[2]) << 32) | u64::from(out[3]);
        [to_open_unit(a), to_open_unit(b)]
    }

    /// Two normals for steps `2*pair` and `2*pair + 1`.
    #[inline]
    pub fn normal_pair(&self, path: u64, pair: u64, component: u32) -> [f64; 2] {
        let [a, b] = self.pair_uniforms(path, pair, component);
        [inverse_norm_cdf(a), inverse_norm_cdf(b)]
    }

    /// The standard normal attached to `(path, step, component)`.
    #[inline]
    pub fn normal(&self, path: u64, step: u64, component: u32) -> f64 {
        self.normal_pair(path, step >> 1, component)[(step & 1) as usize]
    }

    /// Fill `out[step * k + component]` with the draws for steps
    /// `0..n_steps` of one path.
    pub fn fill_path(&self, path: u64, n_steps: usize, k: usize, out: &mut [f64]) {
        debug_assert!(out.len() >= n_steps * k);
        let pairs = n_steps.div_ceil(2);
        if k == 1 {
            // Bits for a block first, then the inverse over the block: both
            // loops pipeline far better than the interleaved form.
            const BLOCK: usize = 64;
            let mut u = [0.0; BLOCK];
            for (b, chunk) in out[..n_steps].chunks_mut(BLOCK).enumerate() {
                let u = &mut u[..chunk.len()];
                for (j, pair) in u.chunks_mut(2).enumerate() {
                    let [a, c] = self.pair_uniforms(path, (b * BLOCK / 2 + j) as u64, 0);
                    pair[0] = a;
                    if let Some(x) = pair.get_mut(1) {
                        *x = c;
                    }
                }
                inverse_norm_cdf_into(u, chunk);
            }
            return;
        }
        for pair in 0..pairs {
            for comp in 0..k {
                let [a, b] = self.normal_pair(path, pair as u64, comp as u32);
                let s = 2 * pair;
                out[s * k + comp] = a;
                if s + 1 < n_steps {
                    out[(s + 1) * k + comp] = b;
                }
            }
        }
    }
}
