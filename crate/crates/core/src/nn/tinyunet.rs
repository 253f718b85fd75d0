//! Small U-Net for CPU-scale experiments.
//!
//! A stride-2 stem halves the resolution, two pooling stages follow, and the
//! decoder returns to half resolution. Every 3×3 convolution is followed by
//! batch normalisation and ReLU. The Grad-CAM hook point is the output of the
//! last decoder block (input of the 1×1 classifier).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Builder, Conv};
use super::ops::ConvGeometry;
use crate::{Result, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyUnetConfig {
    pub base_channels: usize,
}

impl Default for TinyUnetConfig {
    fn default() -> Self {
        Self { base_channels: 16 }
    }
}

const SAME3: ConvGeometry = ConvGeometry {
    kernel: 3,
    stride: 1,
    padding: 1,
    dilation: 1,
};

#[derive(Debug, Clone)]
struct Block {
    conv: Conv,
    bn: BatchNorm,
}

impl Block {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, g: ConvGeometry) -> Result<Self> {
        Ok(Self {
            conv: b.conv(&format!("{name}.conv"), cin, cout, g, 1, false)?,
            bn: b.batch_norm(&format!("{name}.bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct TinyUnet {
    stem: Block,
    enc1: Block,
    enc2: [Block; 2],
    mid: [Block; 2],
    dec2: [Block; 2],
    dec1: [Block; 2],
    pub(crate) classifier: Conv,
}

impl TinyUnet {
    /// Spatial sizes must be multiples of this.
    pub const INPUT_MULTIPLE: usize = 8;

    pub fn new(cfg: TinyUnetConfig, b: &mut Builder) -> Result<Self> {
        let c = cfg.base_channels;
        let stem_geom = ConvGeometry {
            stride: 2,
            ..SAME3
        };
        Ok(Self {
            stem: Block::new(b, "stem", 3, c, stem_geom)?,
            enc1: Block::new(b, "enc1", c, c, SAME3)?,
            enc2: [Block::new(b, "enc2.0", c, 2 * c, SAME3)?, Block::new(b, "enc2.1", 2 * c, 2 * c, SAME3)?],
            mid: [Block::new(b, "mid.0", 2 * c, 4 * c, SAME3)?, Block::new(b, "mid.1", 4 * c, 4 * c, SAME3)?],
            dec2: [Block::new(b, "dec2.0", 6 * c, 2 * c, SAME3)?, Block::new(b, "dec2.1", 2 * c, 2 * c, SAME3)?],
            dec1: [Block::new(b, "dec1.0", 3 * c, c, SAME3)?, Block::new(b, "dec1.1", c, c, SAME3)?],
            classifier: b.conv(
                "classifier",
                c,
                NUM_CLASSES,
                ConvGeometry {
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                    dilation: 1,
                },
                1,
                true,
            )?,
        })
    }

    pub fn feature_channels(cfg: TinyUnetConfig) -> usize {
        cfg.base_channels
    }

    pub fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let s1 = self.enc1.forward(&self.stem.forward(x, train)?, train)?;
        let (_, _, h1, w1) = s1.dims4()?;
        let p1 = s1.max_pool2d(2)?;
        let s2 = self.enc2[1].forward(&self.enc2[0].forward(&p1, train)?, train)?;
        let (_, _, h2, w2) = s2.dims4()?;
        let p2 = s2.max_pool2d(2)?;
        let m = self.mid[1].forward(&self.mid[0].forward(&p2, train)?, train)?;
        let u2 = Tensor::cat(&[&m.upsample_nearest2d(h2, w2)?, &s2], 1)?;
        let d2 = self.dec2[1].forward(&self.dec2[0].forward(&u2, train)?, train)?;
        let u1 = Tensor::cat(&[&d2.upsample_nearest2d(h1, w1)?, &s1], 1)?;
        self.dec1[1].forward(&self.dec1[0].forward(&u1, train)?, train)
    }
}
