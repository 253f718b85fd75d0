//! On-disk dataset layouts.
//!
//! `synthetic_dir`: `images/<id>.png`, `masks/<id>_cup.png`, `masks/<id>_disc.png`
//! (nonzero = foreground), optionally nested under a `train/` or `test/` folder.
//!
//! `refuge`, `drishti`, `rimone`: the preprocessed ROI distribution used by the
//! fundus adaptation literature, `<root>/<split>/ROIs/image/<id>.png` with a
//! single grayscale `<root>/<split>/ROIs/mask/<id>.png` per image encoding
//! cup = 0, disc rim = 128, background = 255.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{roi_window, DatasetSplit, FundusSample, SplitKind};
use crate::{ClassId, Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetLayout {
    Refuge,
    Drishti,
    Rimone,
    SyntheticDir,
}

impl DatasetLayout {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetLayout::Refuge => "refuge",
            DatasetLayout::Drishti => "drishti",
            DatasetLayout::Rimone => "rimone",
            DatasetLayout::SyntheticDir => "synthetic_dir",
        }
    }

    /// Public split sizes, used only to warn about incomplete copies.
    pub fn expected_count(self, split: SplitKind) -> Option<usize> {
        match (self, split) {
            (DatasetLayout::Rimone, SplitKind::Train) => Some(99),
            (DatasetLayout::Rimone, SplitKind::Test) => Some(60),
            (DatasetLayout::Drishti, SplitKind::Train) => Some(50),
            (DatasetLayout::Drishti, SplitKind::Test) => Some(51),
            _ => None,
        }
    }
}

impl std::str::FromStr for DatasetLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "refuge" => Ok(DatasetLayout::Refuge),
            "drishti" | "drishti_gs" => Ok(DatasetLayout::Drishti),
            "rimone" | "rim_one_r3" => Ok(DatasetLayout::Rimone),
            "synthetic_dir" | "synthetic" => Ok(DatasetLayout::SyntheticDir),
            other => Err(Error::invalid(format!("unknown dataset layout '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRequirement {
    /// Every image must have masks.
    Required,
    /// Masks are loaded when present.
    Optional,
    /// Masks are never read.
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub roi_size: usize,
    pub masks: MaskRequirement,
}

impl LoadOptions {
    pub fn new(roi_size: usize, masks: MaskRequirement) -> Self {
        Self { roi_size, masks }
    }
}

pub fn load_dataset(root: &Path, layout: DatasetLayout, split: SplitKind, opts: LoadOptions) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(Error::load(root, "dataset directory does not exist"));
    }
    let (image_dir, mask_dir) = match layout {
        DatasetLayout::SyntheticDir => {
            let nested = root.join(split.as_str());
            let base = if nested.join("images").is_dir() { nested } else { root.to_path_buf() };
            (base.join("images"), base.join("masks"))
        }
        _ => {
            let base = root.join(split.as_str()).join("ROIs");
            (base.join("image"), base.join("mask"))
        }
    };
    if !image_dir.is_dir() {
        return Err(Error::load(&image_dir, format!("missing image folder for {} layout", layout.as_str())));
    }

    let images = list_images(&image_dir)?;
    let mut samples = Vec::with_capacity(images.len());
    for (id, path) in images {
        let image = read_rgb(&path)?;
        let masks = match opts.masks {
            MaskRequirement::Ignore => None,
            req => {
                let found = match layout {
                    DatasetLayout::SyntheticDir => read_split_masks(&mask_dir, &id)?,
                    _ => read_encoded_mask(&mask_dir, &id)?,
                };
                if found.is_none() && req == MaskRequirement::Required {
                    return Err(Error::load(&mask_dir, format!("no ground-truth mask for sample '{id}'")));
                }
                found
            }
        };
        if let Some(m) = &masks {
            let (ih, iw, _) = image.dim();
            let (mh, mw, _) = m.dim();
            if (ih, iw) != (mh, mw) {
                return Err(Error::load(
                    &path,
                    format!("mask for '{id}' is {mh}x{mw} but the image is {ih}x{iw}"),
                ));
            }
        }
        let sample = crop_sample(id, image, masks, opts.roi_size).map_err(|e| Error::load(&path, e.to_string()))?;
        if !sample.cup_within_disc() {
            log::warn!("{}: cup mask extends outside the disc mask", sample.id);
        }
        samples.push(sample);
    }

    if let Some(expected) = layout.expected_count(split) {
        if samples.len() != expected {
            log::warn!(
                "{} {} split has {} samples, the public release has {expected}",
                layout.as_str(),
                split,
                samples.len()
            );
        }
    }
    let domain = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| layout.as_str().to_string());
    DatasetSplit::new(samples, split, domain)
}

/// Crops image and masks to the ROI around the disc centroid (or image centre).
fn crop_sample(id: String, image: Array3<f32>, masks: Option<Array3<u8>>, roi: usize) -> Result<FundusSample> {
    let (h, w, _) = image.dim();
    let center = masks.as_ref().and_then(|m| {
        let (mut sy, mut sx, mut n) = (0usize, 0usize, 0usize);
        for ((y, x, c), &v) in m.indexed_iter() {
            if c == ClassId::Disc.channel() && v > 0 {
                sy += y;
                sx += x;
                n += 1;
            }
        }
        (n > 0).then(|| (sy / n, sx / n))
    });
    let win = roi_window(h, w, center, roi)?;
    FundusSample::new(id, win.apply(&image), masks.map(|m| win.apply(&m)))
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::load(dir, e.to_string()))? {
        let path = entry?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let Some(stem) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
            continue;
        };
        if out.insert(stem.clone(), path).is_some() {
            return Err(Error::load(dir, format!("more than one image file for id '{stem}'")));
        }
    }
    Ok(out)
}

fn find_with_extension(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::load(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    // Nonzero in any channel counts as foreground for binary masks.
    let rgb = img.to_rgb8();
    Ok(GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        let p = rgb.get_pixel(x, y);
        image::Luma([p[0].max(p[1]).max(p[2])])
    }))
}

fn read_split_masks(dir: &Path, id: &str) -> Result<Option<Array3<u8>>> {
    let cup = find_with_extension(dir, &format!("{id}_cup"));
    let disc = find_with_extension(dir, &format!("{id}_disc"));
    let (cup, disc) = match (cup, disc) {
        (Some(c), Some(d)) => (read_gray(&c)?, read_gray(&d)?),
        (None, None) => return Ok(None),
        _ => {
            return Err(Error::load(dir, format!("sample '{id}' has only one of its cup/disc masks")));
        }
    };
    if cup.dimensions() != disc.dimensions() {
        return Err(Error::load(dir, format!("cup and disc masks of '{id}' differ in size")));
    }
    let (w, h) = cup.dimensions();
    Ok(Some(Array3::from_shape_fn((h as usize, w as usize, 2), |(y, x, c)| {
        let src = if c == ClassId::Cup.channel() { &cup } else { &disc };
        (src.get_pixel(x as u32, y as u32)[0] > 0) as u8
    })))
}

fn read_encoded_mask(dir: &Path, id: &str) -> Result<Option<Array3<u8>>> {
    let Some(path) = find_with_extension(dir, id) else {
        return Ok(None);
    };
    let gray = image::open(&path)
        .map_err(|e| Error::load(&path, e.to_string()))?
        .to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Some(Array3::from_shape_fn((h as usize, w as usize, 2), |(y, x, c)| {
        let v = gray.get_pixel(x as u32, y as u32)[0];
        if c == ClassId::Cup.channel() {
            (v < 64) as u8
        } else {
            (v < 192) as u8
        }
    })))
}

/// Writes a split in the `synthetic_dir` layout and returns the files written,
/// in a stable order.
pub fn write_synthetic_dir(split: &DatasetSplit, dir: &Path) -> Result<Vec<PathBuf>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let mut written = Vec::new();
    for s in &split.samples {
        let (h, w, _) = s.image.dim();
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (s.image[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        let path = images.join(format!("{}.png", s.id));
        rgb.save(&path)?;
        written.push(path);
        if let Some(m) = &s.gt_masks {
            for class in ClassId::ALL {
                let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([m[[y as usize, x as usize, class.channel()]] * 255])
                });
                let path = masks.join(format!("{}_{}.png", s.id, class.name()));
                gray.save(&path)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
