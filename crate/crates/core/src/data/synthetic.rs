//! Procedural fundus-like images with exact cup/disc masks.
//!
//! Geometry and the clean appearance are drawn from one random stream, the
//! acquisition noise from another, so two specs that differ only in their
//! appearance transform produce the same anatomy.

use std::f32::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, FundusSample, SplitKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub split: SplitKind,
    pub n_samples: usize,
    /// Side length of the square images.
    pub image_size: usize,
    /// Disc radius interval in pixels.
    pub disc_radius_range: (f32, f32),
    /// Cup radius as a fraction of the disc radius.
    pub cup_to_disc_ratio_range: (f32, f32),
    /// Additive brightness offset applied after contrast scaling.
    pub intensity_shift: f32,
    /// Contrast factor around mid-gray.
    pub contrast_scale: f32,
    /// Gaussian blur standard deviation in pixels (0 disables).
    pub blur_sigma: f32,
    /// Additive Gaussian noise standard deviation (0 disables).
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            split: SplitKind::Train,
            n_samples: 20,
            image_size: 128,
            disc_radius_range: (18.0, 26.0),
            cup_to_disc_ratio_range: (0.4, 0.65),
            intensity_shift: 0.0,
            contrast_scale: 1.0,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let (rlo, rhi) = self.cup_to_disc_ratio_range;
        if !(0.0 < rlo && rlo <= rhi && rhi < 1.0) {
            return Err(Error::invalid(format!(
                "cup_to_disc_ratio_range ({rlo}, {rhi}) must lie inside (0, 1)"
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be at least 1"));
        }
        let (dlo, dhi) = self.disc_radius_range;
        if !(dlo >= 2.0 && dlo <= dhi) {
            return Err(Error::invalid(format!("invalid disc_radius_range ({dlo}, {dhi})")));
        }
        if dhi * 1.25 >= self.image_size as f32 / 2.0 {
            return Err(Error::invalid(format!(
                "disc radius {dhi} too large for {}px images",
                self.image_size
            )));
        }
        if self.contrast_scale <= 0.0 || self.blur_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::invalid("contrast must be positive and blur/noise non-negative"));
        }
        Ok(())
    }
}

/// Generates a labelled split. A pure function of `spec`.
pub fn generate_synthetic_domain(spec: &SyntheticDomainSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut geometry_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);

    let width = spec.n_samples.to_string().len().max(3);
    let samples = (0..spec.n_samples)
        .map(|i| {
            let anatomy = Anatomy::draw(spec, &mut geometry_rng);
            let (clean, masks) = anatomy.render(spec.image_size);
            let image = apply_domain(clean, spec, &mut noise_rng);
            let id = format!("{}_{:0width$}", spec.name, i, width = width);
            FundusSample::new(id, image, Some(masks))
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetSplit::new(samples, spec.split, spec.name.clone())
}

struct Vessel {
    angle: f32,
    curvature: f32,
    phase: f32,
    width: f32,
}

struct Anatomy {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    theta: f32,
    cup_ratio: f32,
    ratio_bounds: (f32, f32),
    brightness: f32,
    texture: [(f32, f32, f32, f32); 3],
    vessels: Vec<Vessel>,
}

impl Anatomy {
    fn draw(spec: &SyntheticDomainSpec, rng: &mut ChaCha8Rng) -> Self {
        let size = spec.image_size as f32;
        let jitter = 0.08 * size;
        let (dlo, dhi) = spec.disc_radius_range;
        let radius = if dhi > dlo { rng.random_range(dlo..dhi) } else { dlo };
        let (clo, chi) = spec.cup_to_disc_ratio_range;
        let cup_ratio = if chi > clo { rng.random_range(clo..chi) } else { clo };
        let texture = std::array::from_fn(|_| {
            (
                rng.random_range(0.02..0.08),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.01..0.03),
            )
        });
        let n_vessels = rng.random_range(4..7);
        let base = rng.random_range(0.0..2.0 * PI);
        let vessels = (0..n_vessels)
            .map(|k| Vessel {
                angle: base + k as f32 * 2.0 * PI / n_vessels as f32 + rng.random_range(-0.3..0.3),
                curvature: rng.random_range(-0.6..0.6),
                phase: rng.random_range(0.0..2.0 * PI),
                width: rng.random_range(0.8..1.6),
            })
            .collect();
        Self {
            cy: size / 2.0 + rng.random_range(-jitter..jitter),
            cx: size / 2.0 + rng.random_range(-jitter..jitter),
            ry: radius * rng.random_range(0.92..1.08),
            rx: radius,
            theta: rng.random_range(0.0..PI),
            cup_ratio,
            ratio_bounds: (clo * clo, chi * chi),
            brightness: rng.random_range(-0.03..0.03),
            texture,
            vessels,
        }
    }

    /// Normalised elliptical radius: 1 on the disc boundary.
    fn radius_at(&self, y: f32, x: f32) -> f32 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    fn render(&self, size: usize) -> (Array3<f32>, Array3<u8>) {
        let radii = Array2::from_shape_fn((size, size), |(y, x)| self.radius_at(y as f32 + 0.5, x as f32 + 0.5));
        let cup_ratio = self.fit_cup_ratio(&radii);

        let mut masks = Array3::<u8>::zeros((size, size, 2));
        let mut image = Array3::<f32>::zeros((size, size, 3));
        let s = size as f32;
        let mean_r = 0.5 * (self.rx + self.ry);
        let disc_edge = 1.5 / mean_r;
        let cup_edge = 2.5 / mean_r;
        let background = [0.50, 0.20, 0.09];
        let disc = [0.88, 0.55, 0.33];
        let cup = [0.97, 0.82, 0.62];

        for y in 0..size {
            for x in 0..size {
                let q = radii[[y, x]];
                masks[[y, x, 1]] = (q < 1.0) as u8;
                masks[[y, x, 0]] = (q < cup_ratio) as u8;

                let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
                let rc = ((fy - s / 2.0).powi(2) + (fx - s / 2.0).powi(2)).sqrt() / s;
                let illumination = 1.0 - 0.7 * rc * rc + self.brightness;
                let texture: f32 = self
                    .texture
                    .iter()
                    .map(|&(freq, a, b, amp)| amp * (freq * fx * a.cos() + freq * fy * a.sin() + b).sin())
                    .sum();
                let w_disc = smoothstep(1.0 + disc_edge, 1.0 - disc_edge, q);
                let w_cup = smoothstep(cup_ratio + cup_edge, cup_ratio - cup_edge, q);
                let vessel = self.vessel_darkening(fy, fx, q);
                for c in 0..3 {
                    let mut v = background[c] * illumination + texture;
                    v += w_disc * (disc[c] - v);
                    v += w_cup * (cup[c] - v);
                    v *= 1.0 - vessel;
                    image[[y, x, c]] = v.clamp(0.0, 1.0);
                }
            }
        }
        (image, masks)
    }

    /// Largest darkening factor from any vessel at the point.
    fn vessel_darkening(&self, y: f32, x: f32, q: f32) -> f32 {
        if q < 0.3 {
            return 0.0;
        }
        let (dy, dx) = (y - self.cy, x - self.cx);
        let r = (dy * dy + dx * dx).sqrt();
        let phi = dy.atan2(dx);
        let mut best = 0.0f32;
        for v in &self.vessels {
            let centre_angle = v.angle + v.curvature * (r / 40.0) + 0.05 * (r / 6.0 + v.phase).sin();
            let mut d = phi - centre_angle;
            d = (d + PI).rem_euclid(2.0 * PI) - PI;
            let dist = (d * r).abs();
            let taper = (1.0 - r / 150.0).max(0.3);
            let width = v.width * taper;
            let strength = 0.35 * (-(dist * dist) / (2.0 * width * width)).exp();
            best = best.max(strength);
        }
        best
    }

    /// Adjusts the drawn cup ratio until the pixel-area ratio respects the
    /// squared ratio bounds despite discretisation.
    fn fit_cup_ratio(&self, radii: &Array2<f32>) -> f32 {
        let disc_area = radii.iter().filter(|&&q| q < 1.0).count().max(1) as f32;
        let (lo, hi) = self.ratio_bounds;
        let mut ratio = self.cup_ratio;
        for _ in 0..200 {
            let area = radii.iter().filter(|&&q| q < ratio).count() as f32 / disc_area;
            if area < lo {
                ratio += 0.002;
            } else if area > hi {
                ratio -= 0.002;
            } else {
                break;
            }
        }
        ratio
    }
}

fn smoothstep(edge0: f32, edge1: f32, x: f32) -> f32 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn apply_domain(mut image: Array3<f32>, spec: &SyntheticDomainSpec, noise_rng: &mut ChaCha8Rng) -> Array3<f32> {
    if spec.contrast_scale != 1.0 || spec.intensity_shift != 0.0 {
        image.mapv_inplace(|v| ((v - 0.5) * spec.contrast_scale + 0.5 + spec.intensity_shift).clamp(0.0, 1.0));
    }
    if spec.blur_sigma > 0.0 {
        image = gaussian_blur(&image, spec.blur_sigma);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma).expect("validated sigma");
        image.mapv_inplace(|v| (v + normal.sample(noise_rng)).clamp(0.0, 1.0));
    }
    image
}

/// Separable Gaussian blur with clamped borders, applied per channel.
pub(crate) fn gaussian_blur(image: &Array3<f32>, sigma: f32) -> Array3<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w, c) = image.dim();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[[y, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * image[[y, clampi(x as isize + k as isize - radius, w), ch]])
                    .sum();
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v: f32 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * tmp[[clampi(y as isize + k as isize - radius, h), x, ch]])
                    .sum();
                out[[y, x, ch]] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ClassId;

    fn small(seed: u64) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            n_samples: 6,
            image_size: 64,
            disc_radius_range: (9.0, 13.0),
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic_domain(&small(7)).unwrap();
        let b = generate_synthetic_domain(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_domain(&small(8)).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn cup_area_ratio_within_squared_bounds() {
        let spec = SyntheticDomainSpec {
            n_samples: 25,
            cup_to_disc_ratio_range: (0.4, 0.6),
            ..small(3)
        };
        for s in generate_synthetic_domain(&spec).unwrap().samples {
            assert!(s.cup_within_disc(), "{}", s.id);
            let cup = s.mask(ClassId::Cup).unwrap().iter().filter(|&&v| v == 1).count() as f32;
            let disc = s.mask(ClassId::Disc).unwrap().iter().filter(|&&v| v == 1).count() as f32;
            let ratio = cup / disc;
            assert!((0.16..=0.36).contains(&ratio), "{}: ratio {ratio}", s.id);
        }
    }

    #[test]
    fn neutral_appearance_fields_do_not_change_images() {
        let a = SyntheticDomainSpec {
            intensity_shift: 0.0,
            contrast_scale: 1.0,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            ..small(11)
        };
        let b = a.clone();
        assert_eq!(
            generate_synthetic_domain(&a).unwrap(),
            generate_synthetic_domain(&b).unwrap()
        );
    }

    #[test]
    fn appearance_shift_keeps_anatomy() {
        let a = small(5);
        let b = SyntheticDomainSpec {
            intensity_shift: 0.1,
            contrast_scale: 0.7,
            blur_sigma: 1.0,
            noise_sigma: 0.02,
            ..small(5)
        };
        let (da, db) = (generate_synthetic_domain(&a).unwrap(), generate_synthetic_domain(&b).unwrap());
        for (sa, sb) in da.samples.iter().zip(&db.samples) {
            assert_eq!(sa.gt_masks, sb.gt_masks);
            assert_ne!(sa.image, sb.image);
            assert!(sb.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_ratio_rejected() {
        let spec = SyntheticDomainSpec {
            cup_to_disc_ratio_range: (0.5, 1.0),
            ..small(0)
        };
        assert!(generate_synthetic_domain(&spec).is_err());
        let spec = SyntheticDomainSpec { n_samples: 0, ..small(0) };
        assert!(generate_synthetic_domain(&spec).is_err());
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Array3::from_elem((9, 9, 3), 0.4f32);
        let out = gaussian_blur(&img, 1.5);
        assert!(out.iter().all(|v| (v - 0.4).abs() < 1e-6));
    }
}
