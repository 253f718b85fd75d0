//! Dice, average surface distance, mask post-processing and split evaluation.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use image::{GrayImage, Luma};
use imageproc::distance_transform::euclidean_squared_distance_transform;
use imageproc::region_labelling::{connected_components, Connectivity};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, DatasetSplit};
use crate::nn::SegModel;
use crate::{ClassId, Error, Result};

fn check_same(a: &ArrayView2<u8>, b: &ArrayView2<u8>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("mask shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)` on nonzero pixels, 1 when both masks are empty.
pub fn dice(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<f64> {
    check_same(&pred, &gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (a, b) = (a != 0, b != 0);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Foreground pixels with a 4-neighbour outside the foreground; pixels past
/// the image edge count as background.
pub fn boundary_pixels(mask: ArrayView2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let fg = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]] != 0;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn mean_distance_to(from: &[(usize, usize)], to: &[(usize, usize)], h: usize, w: usize) -> f64 {
    let mut seeds = GrayImage::new(w as u32, h as u32);
    for &(y, x) in to {
        seeds.put_pixel(x as u32, y as u32, Luma([255]));
    }
    let edt = euclidean_squared_distance_transform(&seeds);
    let total: f64 = from.iter().map(|&(y, x)| edt.get_pixel(x as u32, y as u32)[0].sqrt()).sum();
    total / from.len() as f64
}

/// Symmetric mean boundary-to-boundary Euclidean distance in pixels, or
/// `None` when either mask is empty.
pub fn average_surface_distance(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<Option<f64>> {
    check_same(&pred, &gt)?;
    let (h, w) = pred.dim();
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    Ok(Some(0.5 * (mean_distance_to(&bp, &bg, h, w) + mean_distance_to(&bg, &bp, h, w))))
}

fn to_gray(mask: ArrayView2<u8>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([(mask[[y as usize, x as usize]] != 0) as u8]))
}

/// Keeps the largest 8-connected foreground component and fills holes
/// (background regions, 4-connected, that do not touch the image edge).
pub fn postprocess_mask(mask: ArrayView2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let img = to_gray(mask);
    let labels = connected_components(&img, Connectivity::Eight, Luma([0u8]));
    let mut sizes: Vec<usize> = Vec::new();
    for p in labels.pixels() {
        let l = p[0] as usize;
        if l > 0 {
            if sizes.len() <= l {
                sizes.resize(l + 1, 0);
            }
            sizes[l] += 1;
        }
    }
    let Some(best) = (1..sizes.len()).max_by_key(|&l| (sizes[l], std::cmp::Reverse(l))) else {
        return Array2::zeros((h, w));
    };
    let keep = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([(labels.get_pixel(x, y)[0] as usize == best) as u8]));
    let inverse = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([1 - keep.get_pixel(x, y)[0]]));
    let bg = connected_components(&inverse, Connectivity::Four, Luma([0u8]));
    let mut touches_edge = std::collections::HashSet::new();
    for y in 0..h as u32 {
        for x in 0..w as u32 {
            if y == 0 || x == 0 || y + 1 == h as u32 || x + 1 == w as u32 {
                touches_edge.insert(bg.get_pixel(x, y)[0]);
            }
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (x, y) = (x as u32, y as u32);
        if keep.get_pixel(x, y)[0] == 1 {
            return 1;
        }
        let l = bg.get_pixel(x, y)[0];
        (l != 0 && !touches_edge.contains(&l)) as u8
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Probability threshold for the predicted masks.
    pub threshold: f64,
    pub postprocess: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            postprocess: true,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    /// Dice in percent, cup then disc.
    pub dice: [f64; 2],
    /// ASD in pixels, `None` when undefined.
    pub asd: [Option<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub domain: String,
    pub n_samples: usize,
    pub threshold: f64,
    pub postprocess: bool,
    pub samples: Vec<SampleMetrics>,
    /// Mean Dice in percent per class.
    pub mean_dice: [f64; 2],
    /// Mean ASD per class over samples where it is defined.
    pub mean_asd: [Option<f64>; 2],
    /// Per class, samples whose ASD was undefined.
    pub undefined_asd: [usize; 2],
}

impl MetricsReport {
    /// Cup and disc Dice averaged, in percent.
    pub fn mean_dice_overall(&self) -> f64 {
        0.5 * (self.mean_dice[0] + self.mean_dice[1])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let fmt_asd = |a: Option<f64>| a.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "domain {} | {} samples | threshold {} | postprocess {}",
            self.domain, self.n_samples, self.threshold, self.postprocess
        );
        let _ = writeln!(s, "{:<24} {:>9} {:>9} {:>9} {:>9}", "id", "cup_dice", "cup_asd", "disc_dice", "disc_asd");
        for r in &self.samples {
            let _ = writeln!(
                s,
                "{:<24} {:>9.2} {:>9} {:>9.2} {:>9}",
                r.id,
                r.dice[0],
                fmt_asd(r.asd[0]),
                r.dice[1],
                fmt_asd(r.asd[1])
            );
        }
        let _ = writeln!(
            s,
            "{:<24} {:>9.2} {:>9} {:>9.2} {:>9}",
            "mean",
            self.mean_dice[0],
            fmt_asd(self.mean_asd[0]),
            self.mean_dice[1],
            fmt_asd(self.mean_asd[1])
        );
        s
    }
}

/// Binary masks for one sample from `2×H×W` probabilities.
pub fn threshold_masks(probs: &Tensor, cfg: &EvalConfig) -> Result<[Array2<u8>; 2]> {
    let (c, h, w) = probs.dims3()?;
    if c != 2 {
        return Err(Error::invalid(format!("expected 2 probability channels, got {c}")));
    }
    let v: Vec<f64> = probs.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mask = |ch: usize| {
        let m = Array2::from_shape_fn((h, w), |(y, x)| (v[ch * h * w + y * w + x] >= cfg.threshold) as u8);
        if cfg.postprocess {
            postprocess_mask(m.view())
        } else {
            m
        }
    };
    Ok([mask(0), mask(1)])
}

/// Scores predicted masks (`[cup, disc]` per sample, in split order).
pub fn evaluate_masks(split: &DatasetSplit, preds: &[[Array2<u8>; 2]], cfg: &EvalConfig) -> Result<MetricsReport> {
    if preds.len() != split.len() {
        return Err(Error::invalid(format!("{} predictions for {} samples", preds.len(), split.len())));
    }
    let mut samples = Vec::with_capacity(split.len());
    for (s, pred) in split.samples.iter().zip(preds) {
        let mut row = SampleMetrics {
            id: s.id.clone(),
            dice: [0.0; 2],
            asd: [None; 2],
        };
        for class in ClassId::ALL {
            let gt = s
                .mask(class)
                .ok_or_else(|| Error::invalid(format!("sample '{}' has no ground-truth masks", s.id)))?;
            let c = class.channel();
            row.dice[c] = 100.0 * dice(pred[c].view(), gt)?;
            row.asd[c] = average_surface_distance(pred[c].view(), gt)?;
            if row.asd[c].is_none() {
                log::warn!("ASD undefined for {} {} (empty mask)", s.id, class);
            }
        }
        samples.push(row);
    }
    let n = samples.len();
    let mut mean_dice = [0.0; 2];
    let mut mean_asd = [None; 2];
    let mut undefined_asd = [0; 2];
    for c in 0..2 {
        mean_dice[c] = if n == 0 { 0.0 } else { samples.iter().map(|r| r.dice[c]).sum::<f64>() / n as f64 };
        let defined: Vec<f64> = samples.iter().filter_map(|r| r.asd[c]).collect();
        undefined_asd[c] = n - defined.len();
        if !defined.is_empty() {
            mean_asd[c] = Some(defined.iter().sum::<f64>() / defined.len() as f64);
        }
    }
    Ok(MetricsReport {
        domain: split.domain_name.clone(),
        n_samples: n,
        threshold: cfg.threshold,
        postprocess: cfg.postprocess,
        samples,
        mean_dice,
        mean_asd,
        undefined_asd,
    })
}

/// Deterministic forward over the split, thresholding, optional
/// post-processing, and per-class Dice/ASD.
pub fn evaluate(model: &SegModel, split: &DatasetSplit, cfg: &EvalConfig) -> Result<MetricsReport> {
    if !split.has_masks() {
        return Err(Error::invalid(format!("split '{}' has no ground-truth masks to evaluate against", split.domain_name)));
    }
    let mut preds = Vec::with_capacity(split.len());
    for chunk in split.samples.chunks(cfg.batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = images_to_tensor(&images, model.device())?;
        let probs = model.forward(&x, None)?.probs;
        for i in 0..chunk.len() {
            preds.push(threshold_masks(&probs.get(i)?, cfg)?);
        }
    }
    evaluate_masks(split, &preds, cfg)
}
