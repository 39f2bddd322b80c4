//! Seeded synthetic shadow pairs: smooth colour gradients with mild noise,
//! and an axis-aligned rectangle darkened by a factor in `[0.3, 0.6]`.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{MaskImage, Tensor};

pub const MIN_FACTOR: f64 = 0.3;
pub const MAX_FACTOR: f64 = 0.6;
const NOISE: f64 = 0.02;

/// One training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowPair {
    /// Shadowed input `[3×H×W]`.
    pub input: Tensor,
    pub mask: MaskImage,
    /// Shadow-free target `[3×H×W]`.
    pub target: Tensor,
    pub factor: f64,
}

/// Draws one pair of size `h×w` from `rng`. The rectangle spans between a
/// quarter and a half of each side.
pub fn shadow_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ShadowPair {
    let mut coeffs = [[0.0; 3]; 3];
    for c in &mut coeffs {
        let base = rng.gen_range(0.35..0.75);
        let gy = rng.gen_range(-0.25..0.25);
        let gx = rng.gen_range(-0.25..0.25);
        *c = [base, gy, gx];
    }
    let target = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let y = (p / w) as f64 / h.max(2) as f64 - 0.5;
        let x = (p % w) as f64 / w.max(2) as f64 - 0.5;
        let [base, gy, gx] = coeffs[c];
        (base + gy * y + gx * x + rng.gen_range(-NOISE..NOISE)).clamp(0.0, 1.0)
    });

    let side = |rng: &mut ChaCha8Rng, n: usize| {
        let len = rng.gen_range((n / 4).max(1)..=(n / 2).max(1));
        let start = rng.gen_range(0..=n - len);
        (start, start + len)
    };
    let (top, bottom) = side(rng, h);
    let (left, right) = side(rng, w);
    let mask = MaskImage::rectangle(h, w, top, bottom, left, right);
    let factor = rng.gen_range(MIN_FACTOR..MAX_FACTOR);

    let mut input = target.clone();
    for (i, v) in input.data_mut().iter_mut().enumerate() {
        if mask.values()[i % (h * w)] >= 0.5 {
            *v *= factor;
        }
    }
    ShadowPair { input, mask, target, factor }
}

/// `count` pairs from a seeded stream.
pub fn shadow_pairs(seed: u64, count: usize, h: usize, w: usize) -> Vec<ShadowPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| shadow_pair(&mut rng, h, w)).collect()
}
