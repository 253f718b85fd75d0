//! Class-specific Grad-CAM maps for segmentation logits.

use std::path::Path;

use candle_core::{DType, Tensor, Var, D};

use crate::nn::SegModel;
use crate::{ClassId, Error, Result};

#[derive(Debug, Clone)]
pub struct SaliencyMap {
    /// `B×Hf×Wf`, non-negative.
    pub e_gc: Tensor,
    /// `B×Kf` channel weights.
    pub alpha: Tensor,
    pub class: ClassId,
    pub normalized: bool,
}

impl SaliencyMap {
    pub fn into_normalized(self) -> Result<Self> {
        if self.normalized {
            return Ok(self);
        }
        Ok(Self {
            e_gc: normalize_saliency(&self.e_gc)?,
            normalized: true,
            ..self
        })
    }
}

/// Spatial sum of one class channel of `B×2×H×W` logits, one value per image.
pub fn class_score(logits: &Tensor, class: ClassId) -> Result<Tensor> {
    let (_, c, _, _) = logits.dims4()?;
    if class.channel() >= c {
        return Err(Error::invalid(format!("logits have {c} channels, no {class} channel")));
    }
    Ok(logits.narrow(1, class.channel(), 1)?.sum((1, 2, 3))?)
}

/// Spatial mean of `∂score/∂A` per channel, `B×Kf`. `score` may be per image
/// or already reduced; per-image scores are summed, which is exact whenever
/// image `b`'s score depends only on `A[b]`.
pub fn gradcam_weights(score: &Tensor, features: &Tensor) -> Result<Tensor> {
    let total = score.sum_all()?;
    let grads = total.backward()?;
    let g = grads.get(features).ok_or_else(|| {
        Error::ContractViolation("no gradient reaches the feature maps; were they detached?".into())
    })?;
    Ok(g.mean((2, 3))?)
}

/// `ReLU(Σ_k α_k A^k)`, `B×Hf×Wf`.
pub fn gradcam_heatmap(alpha: &Tensor, features: &Tensor) -> Result<Tensor> {
    let (b, k, _, _) = features.dims4()?;
    if alpha.dims() != [b, k] {
        return Err(Error::invalid(format!(
            "alpha shape {:?} does not match features {:?}",
            alpha.dims(),
            features.dims()
        )));
    }
    let weighted = features.broadcast_mul(&alpha.to_dtype(features.dtype())?.reshape((b, k, 1, 1))?)?;
    Ok(weighted.sum(1)?.relu()?)
}

/// Per-image min-max scaling to `[0,1]`. A constant map is scaled with its
/// minimum taken as zero, so constant positive maps become ones and all-zero
/// maps stay zero.
pub fn normalize_saliency(map: &Tensor) -> Result<Tensor> {
    let (b, h, w) = map.dims3()?;
    let flat = map.reshape((b, h * w))?;
    let max = flat.max_keepdim(D::Minus1)?;
    let min = flat.min_keepdim(D::Minus1)?;
    let constant = max.eq(&min)?.to_dtype(map.dtype())?;
    // min := 0 for constant maps; range := max, or 1 when max is 0 too
    let min = min.mul(&(1.0 - &constant)?)?;
    let range = (&max - &min)?;
    let degenerate = range.le(0.0)?.to_dtype(map.dtype())?;
    let range = (range + degenerate)?;
    Ok(flat.broadcast_sub(&min)?.broadcast_div(&range)?.reshape((b, h, w))?)
}

/// Grad-CAM of `class` from precomputed classifier-head inputs. The features
/// are re-rooted as a fresh leaf, so the returned map carries no graph back
/// into the model. The head runs without dropout.
pub fn class_saliency(model: &SegModel, features: &Tensor, out_hw: (usize, usize), class: ClassId) -> Result<SaliencyMap> {
    let leaf = Var::from_tensor(&features.detach())?;
    let logits = model.head(leaf.as_tensor(), out_hw, None)?;
    let score = class_score(&logits, class)?;
    let alpha = gradcam_weights(&score, leaf.as_tensor())?;
    let e_gc = gradcam_heatmap(&alpha, &features.detach())?;
    Ok(SaliencyMap {
        e_gc,
        alpha,
        class,
        normalized: false,
    })
}

/// Normalized cup and disc maps, in class-channel order.
pub fn both_saliency(model: &SegModel, features: &Tensor, out_hw: (usize, usize)) -> Result<[SaliencyMap; 2]> {
    let cup = class_saliency(model, features, out_hw, ClassId::Cup)?.into_normalized()?;
    let disc = class_saliency(model, features, out_hw, ClassId::Disc)?.into_normalized()?;
    Ok([cup, disc])
}

/// 8-bit grayscale rendering of one `H×W` map, scaled by its maximum.
pub fn heatmap_image(map: &Tensor) -> Result<image::GrayImage> {
    let (h, w) = map.dims2()?;
    let v: Vec<f32> = map.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let max = v.iter().cloned().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let px: Vec<u8> = v.iter().map(|&x| (x.max(0.0) * scale).round().min(255.0) as u8).collect();
    image::GrayImage::from_raw(w as u32, h as u32, px).ok_or_else(|| Error::ContractViolation("heatmap buffer size".into()))
}

pub fn save_heatmap_png(map: &Tensor, path: &Path) -> Result<()> {
    heatmap_image(map)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::tensor_from_fn;
    use crate::nn::ModelConfig;
    use candle_core::Device;
    use proptest::prelude::*;

    fn vals(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn score_sums_channel() {
        let logits = Tensor::new(&[[[[1f32, 2.], [3., 4.]], [[9., 9.], [9., 9.]]]], &Device::Cpu).unwrap();
        assert_eq!(vals(&class_score(&logits, ClassId::Cup).unwrap()), vec![10.0]);
        assert_eq!(vals(&class_score(&logits, ClassId::Disc).unwrap()), vec![36.0]);
        let one = logits.narrow(1, 0, 1).unwrap();
        assert!(class_score(&one, ClassId::Disc).is_err());
    }

    #[test]
    fn linear_score_weights() {
        let a = Var::rand(0f64, 1.0, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let score = (a.as_tensor().narrow(1, 0, 1).unwrap() * 2.0).unwrap().sum_all().unwrap();
        let alpha = vals(&gradcam_weights(&score, a.as_tensor()).unwrap());
        assert!((alpha[0] - 2.0).abs() < 1e-12);
        assert_eq!(alpha[1], 0.0);
    }

    #[test]
    fn detached_features_are_a_contract_violation() {
        let a = Var::rand(0f64, 1.0, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let score = a.as_tensor().sum_all().unwrap();
        let detached = a.as_tensor().detach();
        assert!(matches!(gradcam_weights(&score, &detached), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn heatmap_hand_cases() {
        let a = Tensor::full(-1f32, (1, 1, 2, 2), &Device::Cpu).unwrap();
        let alpha = Tensor::new(&[[1f32]], &Device::Cpu).unwrap();
        assert!(vals(&gradcam_heatmap(&alpha, &a).unwrap()).iter().all(|&v| v == 0.0));
        let a = Tensor::full(0.5f32, (1, 2, 2, 2), &Device::Cpu).unwrap();
        let alpha = Tensor::new(&[[1f32, 1.]], &Device::Cpu).unwrap();
        assert!(vals(&gradcam_heatmap(&alpha, &a).unwrap()).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalization_cases() {
        let m = Tensor::new(&[[[0f32, 1.], [2., 4.]]], &Device::Cpu).unwrap();
        assert_eq!(vals(&normalize_saliency(&m).unwrap()), vec![0.0, 0.25, 0.5, 1.0]);
        let z = Tensor::zeros((2, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(vals(&normalize_saliency(&z).unwrap()).iter().all(|&v| v == 0.0));
        let c = Tensor::full(3.5f32, (1, 3, 3), &Device::Cpu).unwrap();
        assert!(vals(&normalize_saliency(&c).unwrap()).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tinyunet_weights_are_scaled_head_weights() {
        let model = SegModel::new(
            ModelConfig {
                base_channels: 4,
                ..Default::default()
            },
            5,
            &Device::Cpu,
        )
        .unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let feats = model.features(&x, false).unwrap();
        let (_, _, hf, wf) = feats.dims4().unwrap();
        let weights = model
            .named_tensors()
            .into_iter()
            .find(|(n, _)| n == "classifier.weight")
            .unwrap()
            .1;
        for class in ClassId::ALL {
            let s = class_saliency(&model, &feats, (16, 16), class).unwrap();
            let w = vals(&weights.get(class.channel()).unwrap());
            let a = vals(&s.alpha);
            let scale = (16.0 * 16.0) / (hf * wf) as f64;
            for b in 0..2 {
                for k in 0..4 {
                    assert!((a[b * 4 + k] - w[k] * scale).abs() < 1e-4 * (1.0 + w[k].abs()));
                }
            }
        }
    }

    #[test]
    fn png_export_has_map_size() {
        let m = Tensor::new(&[[0f32, 1.], [2., 4.], [0., 0.]], &Device::Cpu).unwrap();
        let img = heatmap_image(&m).unwrap();
        assert_eq!(img.dimensions(), (2, 3));
        assert_eq!(img.get_pixel(1, 1).0[0], 255);
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn heatmap_matches_loops(seed in 0u64..1000, k in 1usize..5) {
            let dev = Device::Cpu;
            let mut s = seed;
            let mut next = move || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0 };
            let a = tensor_from_fn(&[2, k, 3, 4], &dev, DType::F64, |_| next()).unwrap();
            let alpha = tensor_from_fn(&[2, k], &dev, DType::F64, |_| next()).unwrap();
            let got = vals(&gradcam_heatmap(&alpha, &a).unwrap());
            let av = vals(&a);
            let al = vals(&alpha);
            for b in 0..2 {
                for p in 0..12 {
                    let mut acc = 0.0;
                    for c in 0..k {
                        acc += al[b * k + c] * av[(b * k + c) * 12 + p];
                    }
                    prop_assert!((got[b * 12 + p] - acc.max(0.0)).abs() < 1e-12);
                }
            }
            let scaled = vals(&normalize_saliency(&gradcam_heatmap(&(&alpha * 3.0).unwrap(), &a).unwrap()).unwrap());
            let base = vals(&normalize_saliency(&gradcam_heatmap(&alpha, &a).unwrap()).unwrap());
            for (x, y) in scaled.iter().zip(&base) {
                prop_assert!((x - y).abs() < 1e-9);
                prop_assert!(*x >= 0.0 && *x <= 1.0);
            }
        }
    }
}
