use std::collections::HashSet;
use std::fmt;

use candle_core::{Device, Tensor};
use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{ClassId, Error, Result};

/// One fundus image, `H×W×3` in `[0,1]`, with optional `H×W×2` binary masks
/// (channel 0 cup, channel 1 disc).
#[derive(Debug, Clone, PartialEq)]
pub struct FundusSample {
    pub id: String,
    pub image: Array3<f32>,
    pub gt_masks: Option<Array3<u8>>,
}

impl FundusSample {
    pub fn new(id: impl Into<String>, image: Array3<f32>, gt_masks: Option<Array3<u8>>) -> Result<Self> {
        let id = id.into();
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::invalid(format!("{id}: image must have 3 channels, got {c}")));
        }
        if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("{id}: image value {v} outside [0,1]")));
        }
        if let Some(m) = &gt_masks {
            if m.dim() != (h, w, 2) {
                return Err(Error::invalid(format!(
                    "{id}: mask shape {:?} does not match image {h}x{w}x2",
                    m.dim()
                )));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::invalid(format!("{id}: masks must be binary")));
            }
        }
        Ok(Self { id, image, gt_masks })
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn mask(&self, class: ClassId) -> Option<ArrayView2<'_, u8>> {
        self.gt_masks
            .as_ref()
            .map(|m| m.index_axis(Axis(2), class.channel()))
    }

    /// Whether every cup pixel is also a disc pixel. Vacuously true without masks.
    pub fn cup_within_disc(&self) -> bool {
        match (self.mask(ClassId::Cup), self.mask(ClassId::Disc)) {
            (Some(cup), Some(disc)) => cup.iter().zip(disc.iter()).all(|(&c, &d)| c <= d),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::invalid(format!("unknown split '{other}' (expected train|test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub samples: Vec<FundusSample>,
    pub split: SplitKind,
    pub domain_name: String,
}

impl DatasetSplit {
    pub fn new(samples: Vec<FundusSample>, split: SplitKind, domain_name: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample id '{}'", s.id)));
            }
        }
        Ok(Self {
            samples,
            split,
            domain_name: domain_name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.gt_masks.is_some())
    }

    /// Drops every ground-truth mask. The adaptation path only accepts the
    /// result, so it cannot observe target labels.
    pub fn strip_labels(&self) -> UnlabeledSplit {
        UnlabeledSplit {
            images: self
                .samples
                .iter()
                .map(|s| UnlabeledImage {
                    id: s.id.clone(),
                    image: s.image.clone(),
                })
                .collect(),
            domain_name: self.domain_name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledImage {
    pub id: String,
    pub image: Array3<f32>,
}

/// Target-domain images with no label storage at all.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSplit {
    pub images: Vec<UnlabeledImage>,
    pub domain_name: String,
}

impl UnlabeledSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Stacks `H×W×3` images into a `B×3×H×W` tensor.
pub fn images_to_tensor(images: &[&Array3<f32>], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot build a batch from zero images"))?;
    let (h, w, _) = first.dim();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dim() != (h, w, 3) {
            return Err(Error::invalid(format!(
                "batch images must share shape {h}x{w}x3, got {:?}",
                img.dim()
            )));
        }
        for c in 0..3 {
            data.extend(img.index_axis(Axis(2), c).iter().copied());
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

/// Stacks `H×W×2` masks into a `B×2×H×W` f32 tensor of zeros and ones.
pub fn masks_to_tensor(masks: &[&Array3<u8>], device: &Device) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("cannot build a batch from zero masks"))?;
    let (h, w, _) = first.dim();
    let mut data = Vec::with_capacity(masks.len() * 2 * h * w);
    for m in masks {
        if m.dim() != (h, w, 2) {
            return Err(Error::invalid("batch masks must share shape"));
        }
        for c in 0..2 {
            data.extend(m.index_axis(Axis(2), c).iter().map(|&v| v as f32));
        }
    }
    Ok(Tensor::from_vec(data, (masks.len(), 2, h, w), device)?)
}
