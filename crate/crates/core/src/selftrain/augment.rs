//! Photometric weak/strong views. No spatial transforms, so both views stay
//! pixel-aligned with the original image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseGrid, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Per-channel gain drawn from `1 ± weak_gain`.
    pub weak_gain: f64,
    pub weak_offset: f64,
    pub strong_gain: f64,
    pub strong_offset: f64,
    pub strong_noise: f64,
    /// Box-blur radius applied to the strong view with `blur_prob`.
    pub blur_radius: usize,
    pub blur_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_gain: 0.03,
            weak_offset: 0.02,
            strong_gain: 0.2,
            strong_offset: 0.1,
            strong_noise: 0.04,
            blur_radius: 1,
            blur_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.weak_gain,
            self.weak_offset,
            self.strong_gain,
            self.strong_offset,
            self.strong_noise,
        ];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || self.weak_gain >= 1.0 || self.strong_gain >= 1.0 {
            return Err(Error::Invalid("augmentation magnitudes must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return Err(Error::Invalid("blur_prob outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongParams {
    pub jitter: Jitter,
    pub noise_std: f64,
    pub noise_seed: u64,
    /// 0 for no blur.
    pub blur_radius: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPair {
    pub weak: Jitter,
    pub strong: StrongParams,
}

fn jitter(rng: &mut Rng, gain: f64, offset: f64) -> Jitter {
    let mut j = Jitter {
        gain: [1.0; 3],
        offset: [0.0; 3],
    };
    for ch in 0..3 {
        j.gain[ch] = 1.0 + rng.uniform_in(-gain, gain);
        j.offset[ch] = rng.uniform_in(-offset, offset);
    }
    j
}

impl AugmentationPair {
    pub fn sample(cfg: &AugmentConfig, rng: &mut Rng) -> Self {
        let weak = jitter(rng, cfg.weak_gain, cfg.weak_offset);
        let sj = jitter(rng, cfg.strong_gain, cfg.strong_offset);
        let blur = rng.uniform() < cfg.blur_prob;
        Self {
            weak,
            strong: StrongParams {
                jitter: sj,
                noise_std: cfg.strong_noise,
                noise_seed: rng.next_u64(),
                blur_radius: if blur { cfg.blur_radius } else { 0 },
            },
        }
    }

    /// Both views of `image`; each has the shape of `image`.
    pub fn apply(&self, image: &DenseGrid) -> (DenseGrid, DenseGrid) {
        let weak = apply_jitter(image, &self.weak);
        let mut strong = apply_jitter(image, &self.strong.jitter);
        if self.strong.blur_radius > 0 {
            strong = box_blur(&strong, self.strong.blur_radius);
        }
        if self.strong.noise_std > 0.0 {
            let mut rng = Rng::new(self.strong.noise_seed);
            for v in strong.data_mut() {
                *v = (*v + self.strong.noise_std * rng.normal()).clamp(0.0, 1.0);
            }
        }
        (weak, strong)
    }
}

pub fn apply_jitter(image: &DenseGrid, j: &Jitter) -> DenseGrid {
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(image.channels()) {
        for (ch, v) in px.iter_mut().enumerate().take(3) {
            *v = (j.gain[ch] * *v + j.offset[ch]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Mean over the `(2r+1)²` window, borders replicated.
pub fn box_blur(image: &DenseGrid, radius: usize) -> DenseGrid {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let r = radius as i64;
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = DenseGrid::zeros(h, w, c);
    for i in 0..h {
        for j in 0..w {
            let dst = out.pixel_mut(i, j);
            for di in -r..=r {
                let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                for dj in -r..=r {
                    let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                    for (d, s) in dst.iter_mut().zip(image.pixel(ii, jj)) {
                        *d += s;
                    }
                }
            }
            dst.iter_mut().for_each(|d| *d /= n);
        }
    }
    out
}
