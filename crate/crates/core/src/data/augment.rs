//! Label-preserving photometric perturbations used during adaptation.

use ndarray::{s, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub erase_prob: f64,
    pub contrast_prob: f64,
    pub noise_prob: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    /// Erased rectangle aspect ratio (height / width), sampled log-uniformly.
    pub erase_aspect: (f64, f64),
    /// Contrast factor interval around the per-channel mean.
    pub contrast_range: (f32, f32),
    pub noise_sigma: f32,
    /// Probability of a global additive brightness offset (off for the weak
    /// adaptation perturbations).
    pub brightness_prob: f64,
    pub brightness_range: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            erase_prob: 0.5,
            contrast_prob: 0.5,
            noise_prob: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
            contrast_range: (0.75, 1.25),
            noise_sigma: 0.05,
            brightness_prob: 0.0,
            brightness_range: (-0.1, 0.1),
        }
    }
}

impl AugmentConfig {
    /// Photometric jitter for supervised source training: brightness and
    /// contrast changes plus noise, no erasing.
    pub fn source_training() -> Self {
        Self {
            erase_prob: 0.0,
            contrast_prob: 0.5,
            noise_prob: 0.5,
            brightness_prob: 0.5,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl EraseRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }
}

/// Which perturbations fired on one call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentTrace {
    pub erased: Option<EraseRect>,
    pub contrast: Option<f32>,
    pub brightness: Option<f32>,
    pub noise: bool,
}

impl AugmentTrace {
    pub fn is_identity(&self) -> bool {
        self.erased.is_none() && self.contrast.is_none() && self.brightness.is_none() && !self.noise
    }
}

pub fn weak_augment<R: Rng + ?Sized>(image: &Array3<f32>, cfg: &AugmentConfig, rng: &mut R) -> Array3<f32> {
    weak_augment_traced(image, cfg, rng).0
}

/// Random erasing, then contrast change, then an optional brightness offset,
/// then Gaussian noise, each with its own probability. The output is clipped to `[0,1]`.
pub fn weak_augment_traced<R: Rng + ?Sized>(
    image: &Array3<f32>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Array3<f32>, AugmentTrace) {
    let mut out = image.clone();
    let mut trace = AugmentTrace::default();
    let (h, w, _) = image.dim();

    if rng.random_bool(cfg.erase_prob) {
        let rect = sample_rect(h, w, cfg, rng);
        let means = channel_means(&out);
        for (c, mean) in means.iter().enumerate() {
            out.slice_mut(s![rect.top..rect.top + rect.height, rect.left..rect.left + rect.width, c])
                .fill(*mean);
        }
        trace.erased = Some(rect);
    }

    if rng.random_bool(cfg.contrast_prob) {
        let (lo, hi) = cfg.contrast_range;
        let factor = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let means = channel_means(&out);
        for (c, mean) in means.iter().enumerate() {
            out.index_axis_mut(Axis(2), c)
                .mapv_inplace(|v| ((v - mean) * factor + mean).clamp(0.0, 1.0));
        }
        trace.contrast = Some(factor);
    }

    if cfg.brightness_prob > 0.0 && rng.random_bool(cfg.brightness_prob) {
        let (lo, hi) = cfg.brightness_range;
        let offset = if hi > lo { rng.random_range(lo..hi) } else { lo };
        out.mapv_inplace(|v| (v + offset).clamp(0.0, 1.0));
        trace.brightness = Some(offset);
    }

    if rng.random_bool(cfg.noise_prob) && cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_sigma).expect("finite sigma");
        out.mapv_inplace(|v| (v + normal.sample(rng)).clamp(0.0, 1.0));
        trace.noise = true;
    }
    (out, trace)
}

fn channel_means(image: &Array3<f32>) -> Vec<f32> {
    (0..image.dim().2)
        .map(|c| {
            let ch = image.index_axis(Axis(2), c);
            (ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64) as f32
        })
        .collect()
}

fn sample_rect<R: Rng + ?Sized>(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) -> EraseRect {
    let total = (h * w) as f64;
    let (alo, ahi) = cfg.erase_area;
    let (rlo, rhi) = (cfg.erase_aspect.0.ln(), cfg.erase_aspect.1.ln());
    let mut draw = || {
        let area = total * if ahi > alo { rng.random_range(alo..ahi) } else { alo };
        let aspect = if rhi > rlo { rng.random_range(rlo..rhi) } else { rlo }.exp();
        let rh = (area * aspect).sqrt().round() as usize;
        let rw = (area / aspect).sqrt().round() as usize;
        (rh.max(1), rw.max(1))
    };
    let (mut rh, mut rw) = draw();
    for _ in 0..10 {
        if rh <= h && rw <= w {
            break;
        }
        (rh, rw) = draw();
    }
    let (rh, rw) = (rh.min(h), rw.min(w));
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    EraseRect {
        top,
        left,
        height: rh,
        width: rw,
    }
}
