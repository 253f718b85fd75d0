//! DeepLabv3+ with a MobileNetV2 encoder (output stride 16).
//!
//! The Grad-CAM hook point is the output of the second 3×3 decoder
//! convolution: 256 channels at stride 4, the input of the 1×1 classifier.

use candle_core::Tensor;

use super::layers::{BatchNorm, Builder, Conv};
use super::ops::{resize_bilinear, ConvGeometry};
use crate::{Result, NUM_CLASSES};

fn geom(kernel: usize, stride: usize, dilation: usize) -> ConvGeometry {
    ConvGeometry {
        kernel,
        stride,
        padding: dilation * (kernel - 1) / 2,
        dilation,
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
    relu6: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, g: ConvGeometry, groups: usize, relu6: bool) -> Result<Self> {
        Ok(Self {
            conv: b.conv(&format!("{name}.conv"), cin, cout, g, groups, false)?,
            bn: b.batch_norm(&format!("{name}.bn"), cout)?,
            relu6,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, train)?;
        Ok(if self.relu6 { y.clamp(0.0, 6.0)? } else { y })
    }
}

#[derive(Debug, Clone)]
struct InvertedResidual {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    project: ConvBn,
    residual: bool,
}

impl InvertedResidual {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, stride: usize, dilation: usize, expand: usize) -> Result<Self> {
        let hidden = cin * expand;
        Ok(Self {
            expand: if expand != 1 {
                Some(ConvBn::new(b, &format!("{name}.expand"), cin, hidden, geom(1, 1, 1), 1, true)?)
            } else {
                None
            },
            depthwise: ConvBn::new(b, &format!("{name}.dw"), hidden, hidden, geom(3, stride, dilation), hidden, true)?,
            project: ConvBn::new(b, &format!("{name}.project"), hidden, cout, geom(1, 1, 1), 1, false)?,
            residual: stride == 1 && cin == cout,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        if let Some(e) = &self.expand {
            y = e.forward(&y, train)?;
        }
        y = self.project.forward(&self.depthwise.forward(&y, train)?, train)?;
        Ok(if self.residual { (y + x)? } else { y })
    }
}

#[derive(Debug, Clone)]
pub struct DeepLabV3Plus {
    stem: ConvBn,
    low_blocks: Vec<InvertedResidual>,
    high_blocks: Vec<InvertedResidual>,
    aspp: Vec<ConvBn>,
    aspp_pool: ConvBn,
    aspp_project: ConvBn,
    low_project: ConvBn,
    decoder: [ConvBn; 2],
    pub(crate) classifier: Conv,
}

impl DeepLabV3Plus {
    pub const INPUT_MULTIPLE: usize = 16;
    pub const FEATURE_CHANNELS: usize = 256;

    pub fn new(b: &mut Builder) -> Result<Self> {
        let stem = ConvBn::new(b, "backbone.stem", 3, 32, geom(3, 2, 1), 1, true)?;
        // (expansion, channels, repeats, stride); strides past 16 become dilation.
        let settings = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)];
        let mut blocks = Vec::new();
        let (mut cin, mut current_stride, mut dilation) = (32, 2, 1);
        for (stage, &(t, c, n, s)) in settings.iter().enumerate() {
            for i in 0..n {
                let mut stride = if i == 0 { s } else { 1 };
                let block_dilation = dilation;
                if stride == 2 && current_stride >= 16 {
                    dilation *= 2;
                    stride = 1;
                } else if stride == 2 {
                    current_stride *= 2;
                }
                let d = if i == 0 { block_dilation } else { dilation };
                blocks.push(InvertedResidual::new(b, &format!("backbone.s{stage}.{i}"), cin, c, stride, d, t)?);
                cin = c;
            }
        }
        // First four blocks end at stride 4 with 24 channels.
        let high_blocks = blocks.split_off(3);
        let mut aspp = vec![ConvBn::new(b, "aspp.b0", 320, 256, geom(1, 1, 1), 1, true)?];
        for (i, rate) in [6, 12, 18].into_iter().enumerate() {
            aspp.push(ConvBn::new(b, &format!("aspp.b{}", i + 1), 320, 256, geom(3, 1, rate), 1, true)?);
        }
        Ok(Self {
            stem,
            low_blocks: blocks,
            high_blocks,
            aspp,
            aspp_pool: ConvBn::new(b, "aspp.pool", 320, 256, geom(1, 1, 1), 1, true)?,
            aspp_project: ConvBn::new(b, "aspp.project", 5 * 256, 256, geom(1, 1, 1), 1, true)?,
            low_project: ConvBn::new(b, "decoder.low", 24, 48, geom(1, 1, 1), 1, true)?,
            decoder: [
                ConvBn::new(b, "decoder.0", 304, 256, geom(3, 1, 1), 1, true)?,
                ConvBn::new(b, "decoder.1", 256, 256, geom(3, 1, 1), 1, true)?,
            ],
            classifier: b.conv("classifier", 256, NUM_CLASSES, geom(1, 1, 1), 1, true)?,
        })
    }

    pub fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = self.stem.forward(x, train)?;
        for blk in &self.low_blocks {
            y = blk.forward(&y, train)?;
        }
        let low = y.clone();
        for blk in &self.high_blocks {
            y = blk.forward(&y, train)?;
        }
        let mut branches = self
            .aspp
            .iter()
            .map(|br| br.forward(&y, train))
            .collect::<Result<Vec<_>>>()?;
        let pooled = y.mean_keepdim(2)?.mean_keepdim(3)?;
        // Batch statistics on a 1×1 map are degenerate for batch size one.
        let pool_train = train && y.dim(0)? > 1;
        let pooled = self.aspp_pool.forward(&pooled, pool_train)?;
        branches.push(pooled.broadcast_as(branches[0].shape())?.contiguous()?);
        let aspp = self.aspp_project.forward(&Tensor::cat(&branches, 1)?, train)?;
        let (_, _, lh, lw) = low.dims4()?;
        let up = resize_bilinear(&aspp, lh, lw)?;
        let low = self.low_project.forward(&low, train)?;
        let d = self.decoder[0].forward(&Tensor::cat(&[&up, &low], 1)?, train)?;
        self.decoder[1].forward(&d, train)
    }
}
