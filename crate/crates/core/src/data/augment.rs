//! Stochastic augmentations for contrastive view pairs.
//!
//! The chain preserves single-channel microscopy content: geometric
//! flips and square rotation, mild multiplicative intensity jitter, and
//! low-amplitude additive Gaussian jitter. No color or hue operations.

use ndarray::{Array2, ArrayView2};

use crate::rng::SeededRng;

/// Augmentation chain configuration. Probabilities apply independently;
/// jitter draws are always sampled (a [0.9, 1.1] gain and sigma-scaled
/// noise), so the identity chain also needs the neutral jitter ranges.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentChain {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_rot90: f64,
    pub intensity_lo: f64,
    pub intensity_hi: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentChain {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_rot90: 0.5,
            intensity_lo: 0.9,
            intensity_hi: 1.1,
            noise_sigma: 0.02,
        }
    }
}

impl AugmentChain {
    /// The chain that maps every patch to itself.
    pub fn identity() -> Self {
        Self {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_rot90: 0.0,
            intensity_lo: 1.0,
            intensity_hi: 1.0,
            noise_sigma: 0.0,
        }
    }

    /// Geometric flips only, each taken with certainty when the
    /// corresponding probability is 1.
    pub fn flips_only(p_hflip: f64, p_vflip: f64) -> Self {
        Self {
            p_hflip,
            p_vflip,
            p_rot90: 0.0,
            intensity_lo: 1.0,
            intensity_hi: 1.0,
            noise_sigma: 0.0,
        }
    }

    /// Apply the chain once. Output is clamped back into [0, 1].
    pub fn apply(&self, patch: &ArrayView2<f64>, rng: &mut SeededRng) -> Array2<f64> {
        let mut out = patch.to_owned();
        if rng.coin(self.p_hflip) {
            out = flip_horizontal(&out);
        }
        if rng.coin(self.p_vflip) {
            out = flip_vertical(&out);
        }
        // rotation is only defined on square patches
        if out.nrows() == out.ncols() && rng.coin(self.p_rot90) {
            out = rotate90(&out);
        }
        let gain = rng.uniform_in(self.intensity_lo, self.intensity_hi);
        if gain != 1.0 {
            out.mapv_inplace(|v| v * gain);
        }
        if self.noise_sigma > 0.0 {
            for v in out.iter_mut() {
                *v += self.noise_sigma * rng.normal();
            }
        }
        if gain != 1.0 || self.noise_sigma > 0.0 {
            out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
        out
    }

    /// Two stochastic views of the same patch from one seeded stream.
    pub fn contrastive_augment(
        &self,
        patch: &ArrayView2<f64>,
        seed: u64,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut rng = SeededRng::new(seed);
        let a = self.apply(patch, &mut rng);
        let b = self.apply(patch, &mut rng);
        (a, b)
    }
}

/// Mirror along the vertical axis (reverse columns).
pub fn flip_horizontal(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[[i, w - 1 - j]])
}

/// Mirror along the horizontal axis (reverse rows).
pub fn flip_vertical(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[[h - 1 - i, j]])
}

/// Rotate a square image 90 degrees clockwise.
pub fn rotate90(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    assert_eq!(h, w, "90-degree rotation needs a square patch");
    Array2::from_shape_fn((h, w), |(i, j)| a[[h - 1 - j, i]])
}
