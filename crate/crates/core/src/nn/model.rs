use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::deeplab::DeepLabV3Plus;
use super::layers::{Builder, Conv, ParamStore};
use super::ops::{dropout, resize_bilinear};
use super::tinyunet::{TinyUnet, TinyUnetConfig};
use crate::data::{images_to_tensor, masks_to_tensor, weak_augment, AugmentConfig, DatasetSplit};
use crate::{tensor_io, Error, Result, CHANNEL_CONVENTION, NUM_CLASSES};

/// RNG driving dropout masks, shuffling and augmentation.
pub type ModelRng = ChaCha8Rng;

pub const CHECKPOINT_KIND: &str = "gradcl-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchitectureId {
    #[serde(rename = "tinyunet")]
    TinyUnet,
    #[serde(rename = "deeplabv3plus_mobilenetv2")]
    DeepLabV3PlusMobileNetV2,
}

impl ArchitectureId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureId::TinyUnet => "tinyunet",
            ArchitectureId::DeepLabV3PlusMobileNetV2 => "deeplabv3plus_mobilenetv2",
        }
    }
}

impl std::str::FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tinyunet" => Ok(ArchitectureId::TinyUnet),
            "deeplabv3plus_mobilenetv2" | "deeplab" => Ok(ArchitectureId::DeepLabV3PlusMobileNetV2),
            other => Err(Error::invalid(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: ArchitectureId,
    /// Width of the first TinyUnet stage; ignored by DeepLab.
    pub base_channels: usize,
    pub dropout_rate: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: ArchitectureId::TinyUnet,
            base_channels: TinyUnetConfig::default().base_channels,
            dropout_rate: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        if self.architecture == ArchitectureId::TinyUnet && self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Net {
    Tiny(TinyUnet),
    DeepLab(DeepLabV3Plus),
}

/// Network output for one batch.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `B×2×H×W` logits (channel 0 cup, channel 1 disc).
    pub logits: Tensor,
    /// `B×K×Hf×Wf` input of the classifier head.
    pub features: Tensor,
    /// Elementwise sigmoid of the logits.
    pub probs: Tensor,
}

/// Two-class sigmoid segmentation network.
///
/// All dropout sits between the feature hook point and the 1×1 classifier,
/// so Monte Carlo passes only need to re-run the head.
#[derive(Debug)]
pub struct SegModel {
    config: ModelConfig,
    net: Net,
    store: ParamStore,
    device: Device,
    dtype: DType,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    architecture_id: String,
    config: ModelConfig,
    dropout_rate: f32,
    channel_convention: String,
    num_classes: usize,
}

impl SegModel {
    pub fn new(config: ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        Self::build(config, ChaCha8Rng::seed_from_u64(seed), device, DType::F32)
    }

    fn build(config: ModelConfig, rng: ChaCha8Rng, device: &Device, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let net = {
            let mut b = Builder::new(&mut store, rng, device, dtype);
            match config.architecture {
                ArchitectureId::TinyUnet => Net::Tiny(TinyUnet::new(
                    TinyUnetConfig {
                        base_channels: config.base_channels,
                    },
                    &mut b,
                )?),
                ArchitectureId::DeepLabV3PlusMobileNetV2 => Net::DeepLab(DeepLabV3Plus::new(&mut b)?),
            }
        };
        Ok(Self {
            config,
            net,
            store,
            device: device.clone(),
            dtype,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture_id(&self) -> &'static str {
        self.config.architecture.as_str()
    }

    pub fn dropout_rate(&self) -> f32 {
        self.config.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f32) -> Result<()> {
        let mut config = self.config.clone();
        config.dropout_rate = rate;
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn feature_channels(&self) -> usize {
        match self.net {
            Net::Tiny(_) => self.config.base_channels,
            Net::DeepLab(_) => DeepLabV3Plus::FEATURE_CHANNELS,
        }
    }

    pub fn input_multiple(&self) -> usize {
        match self.net {
            Net::Tiny(_) => TinyUnet::INPUT_MULTIPLE,
            Net::DeepLab(_) => DeepLabV3Plus::INPUT_MULTIPLE,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.store.trainable()
    }

    /// Parameters and buffers by name, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.store.named()
    }

    fn classifier(&self) -> &Conv {
        match &self.net {
            Net::Tiny(n) => &n.classifier,
            Net::DeepLab(n) => &n.classifier,
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<(usize, usize)> {
        let dims = batch.dims();
        let m = self.input_multiple();
        match *dims {
            [_, 3, h, w] if h % m == 0 && w % m == 0 && h > 0 && w > 0 => Ok((h, w)),
            _ => Err(Error::invalid(format!(
                "expected a B×3×H×W batch with H, W multiples of {m}, got {dims:?}"
            ))),
        }
    }

    /// Penultimate feature maps. `train` selects batch statistics in the
    /// normalisation layers and updates their running statistics.
    pub fn features(&self, batch: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(batch)?;
        let batch = batch.to_dtype(self.dtype)?;
        match &self.net {
            Net::Tiny(n) => n.features(&batch, train),
            Net::DeepLab(n) => n.features(&batch, train),
        }
    }

    /// Classifier head: optional dropout, 1×1 convolution, bilinear resize to
    /// `out_hw`.
    pub fn head(&self, features: &Tensor, out_hw: (usize, usize), rng: Option<&mut ModelRng>) -> Result<Tensor> {
        let x = match rng {
            Some(rng) => dropout(features, self.config.dropout_rate, rng)?,
            None => features.clone(),
        };
        let logits = self.classifier().forward(&x)?;
        resize_bilinear(&logits, out_hw.0, out_hw.1)
    }

    fn run(&self, batch: &Tensor, train: bool, rng: Option<&mut ModelRng>) -> Result<ForwardResult> {
        let (h, w) = self.check_input(batch)?;
        let features = self.features(batch, train)?;
        let logits = self.head(&features, (h, w), rng)?;
        let probs = candle_nn::ops::sigmoid(&logits)?;
        Ok(ForwardResult {
            logits,
            features,
            probs,
        })
    }

    /// Inference-mode forward pass. With an RNG, dropout stays active
    /// (Monte Carlo dropout); without one the pass is deterministic.
    pub fn forward(&self, batch: &Tensor, stochastic: Option<&mut ModelRng>) -> Result<ForwardResult> {
        self.run(batch, false, stochastic)
    }

    /// Training-mode forward pass: batch statistics and active dropout.
    pub fn forward_train(&self, batch: &Tensor, rng: &mut ModelRng) -> Result<ForwardResult> {
        self.run(batch, true, Some(rng))
    }

    /// Deep copy with independent parameter storage.
    pub fn try_clone(&self) -> Result<Self> {
        self.to_dtype(self.dtype)
    }

    /// Deep copy converted to `dtype` (f64 copies are used for gradient checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let copy = Self::build(self.config.clone(), ChaCha8Rng::seed_from_u64(0), &self.device, dtype)?;
        for (name, t) in self.store.named() {
            let var = copy
                .store
                .get(&name)
                .ok_or_else(|| Error::ContractViolation(format!("parameter {name} missing from copy")))?;
            var.set(&t.to_dtype(dtype)?)?;
        }
        Ok(copy)
    }

    /// Bitwise parameter equality.
    pub fn same_parameters(&self, other: &SegModel) -> Result<bool> {
        let (a, b) = (self.store.named(), other.store.named());
        if a.len() != b.len() {
            return Ok(false);
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.dims() != tb.dims() {
                return Ok(false);
            }
            let va: Vec<f32> = ta.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            let vb: Vec<f32> = tb.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            if va.iter().zip(&vb).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: tensor_io::FORMAT_VERSION,
            architecture_id: self.architecture_id().to_string(),
            config: self.config.clone(),
            dropout_rate: self.config.dropout_rate,
            channel_convention: CHANNEL_CONVENTION.to_string(),
            num_classes: NUM_CLASSES,
        };
        tensor_io::write(path, CHECKPOINT_KIND, &meta, &self.store.named())
    }

    pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Self> {
        let file = tensor_io::read(path)?;
        let meta = checkpoint_meta(&file)?;
        let mut model = Self::build(meta.config, ChaCha8Rng::seed_from_u64(0), device, DType::F32)?;
        model.assign(&file)?;
        Ok(model)
    }

    /// Loads parameters into this model. The model is untouched on any error.
    pub fn restore_checkpoint(&mut self, path: &Path) -> Result<()> {
        let file = tensor_io::read(path)?;
        let meta = checkpoint_meta(&file)?;
        if meta.architecture_id != self.architecture_id() {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture '{}' does not match model architecture '{}'",
                meta.architecture_id,
                self.architecture_id()
            )));
        }
        if meta.config.base_channels != self.config.base_channels {
            return Err(Error::Checkpoint(format!(
                "checkpoint width {} does not match model width {}",
                meta.config.base_channels, self.config.base_channels
            )));
        }
        self.assign(&file)?;
        self.config.dropout_rate = meta.dropout_rate;
        Ok(())
    }

    fn assign(&mut self, file: &tensor_io::TensorFile) -> Result<()> {
        let named = self.store.named();
        if named.len() != file.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                file.tensors.len(),
                named.len()
            )));
        }
        let mut staged = Vec::with_capacity(named.len());
        for (name, current) in &named {
            let t = file.tensor(name, &self.device)?;
            if t.dims() != current.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.dims(),
                    current.dims()
                )));
            }
            staged.push((name, t.to_dtype(self.dtype)?));
        }
        for (name, t) in staged {
            self.store.get(name).expect("name from store").set(&t)?;
        }
        Ok(())
    }
}

fn checkpoint_meta(file: &tensor_io::TensorFile) -> Result<CheckpointMeta> {
    if file.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("file holds '{}', not a model checkpoint", file.kind)));
    }
    let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("malformed checkpoint header: {e}")))?;
    if meta.channel_convention != CHANNEL_CONVENTION || meta.num_classes != NUM_CLASSES {
        return Err(Error::Checkpoint(format!(
            "checkpoint channel convention '{}' is incompatible with '{CHANNEL_CONVENTION}'",
            meta.channel_convention
        )));
    }
    if meta.architecture_id != meta.config.architecture.as_str() {
        return Err(Error::Checkpoint("inconsistent architecture fields in checkpoint".into()));
    }
    Ok(meta)
}

/// Mean binary cross-entropy between logits and 0/1 targets, computed in the
/// numerically stable `max(x,0) - x·y + log(1 + e^{-|x|})` form.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let targets = targets.to_dtype(logits.dtype())?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((logits.relu()? - logits.mul(&targets)?)?.add(&soft)?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Photometric jitter of the training images.
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
            augment: true,
            augmentation: AugmentConfig::source_training(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceTrainReport {
    /// Mean training-mode BCE per epoch.
    pub epoch_losses: Vec<f64>,
    /// Inference-mode BCE over the split before the first update.
    pub initial_bce: f64,
    /// Inference-mode BCE over the split after the last update.
    pub final_bce: f64,
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Inference-mode BCE over a labelled split.
pub fn split_bce(model: &SegModel, split: &DatasetSplit, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in split.samples.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let masks: Vec<_> = chunk
            .iter()
            .map(|s| s.gt_masks.as_ref().ok_or_else(|| Error::invalid(format!("{} has no masks", s.id))))
            .collect::<Result<_>>()?;
        let x = images_to_tensor(&images, model.device())?;
        let y = masks_to_tensor(&masks, model.device())?;
        let out = model.forward(&x, None)?;
        let l: f64 = bce_with_logits(&out.logits, &y)?.to_dtype(DType::F64)?.to_scalar()?;
        total += l * chunk.len() as f64;
    }
    Ok(total / split.len() as f64)
}

/// Supervised training of a source model with per-channel sigmoid BCE and Adam.
pub fn train_source(model: &mut SegModel, split: &DatasetSplit, cfg: &SourceTrainConfig) -> Result<SourceTrainReport> {
    if split.is_empty() || !split.has_masks() {
        return Err(Error::invalid("source training needs a non-empty split with ground-truth masks"));
    }
    if cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(Error::invalid("batch_size and lr must be positive"));
    }
    let start = Instant::now();
    let initial_bce = split_bce(model, split, cfg.batch_size)?;
    let mut report = SourceTrainReport {
        initial_bce,
        final_bce: initial_bce,
        ..Default::default()
    };
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let mut opt = AdamW::new(
        model.trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..split.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let im = &split.samples[i].image;
                    if cfg.augment {
                        weak_augment(im, &cfg.augmentation, &mut rng)
                    } else {
                        im.clone()
                    }
                })
                .collect();
            let images: Vec<_> = images.iter().collect();
            let masks: Vec<_> = chunk
                .iter()
                .map(|&i| split.samples[i].gt_masks.as_ref().expect("checked above"))
                .collect();
            let x = images_to_tensor(&images, model.device())?;
            let y = masks_to_tensor(&masks, model.device())?;
            let out = model.forward_train(&x, &mut rng)?;
            let loss = bce_with_logits(&out.logits, &y)?;
            let value: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite source loss at epoch {epoch}")));
            }
            opt.backward_step(&loss)?;
            sum += value * chunk.len() as f64;
        }
        let mean = sum / split.len() as f64;
        log::info!("source epoch {}/{}: bce {:.5}", epoch + 1, cfg.epochs, mean);
        report.epoch_losses.push(mean);
    }
    report.final_bce = split_bce(model, split, cfg.batch_size)?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dropout: f32) -> SegModel {
        SegModel::new(
            ModelConfig {
                base_channels: 4,
                dropout_rate: dropout,
                ..Default::default()
            },
            1,
            &Device::Cpu,
        )
        .unwrap()
    }

    fn batch(n: usize, size: usize) -> Tensor {
        Tensor::rand(0f32, 1.0, (n, 3, size, size), &Device::Cpu).unwrap()
    }

    #[test]
    fn shapes_and_sigmoid() {
        let m = tiny(0.5);
        let out = m.forward(&batch(2, 16), None).unwrap();
        assert_eq!(out.logits.dims(), &[2, 2, 16, 16]);
        assert_eq!(out.features.dims(), &[2, 4, 8, 8]);
        let l: Vec<f32> = out.logits.flatten_all().unwrap().to_vec1().unwrap();
        let p: Vec<f32> = out.probs.flatten_all().unwrap().to_vec1().unwrap();
        for (l, p) in l.iter().zip(&p) {
            assert!((1.0 / (1.0 + (-l).exp()) - p).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_without_rng_stochastic_with() {
        let m = tiny(0.5);
        let x = batch(1, 16);
        let a: Vec<f32> = m.forward(&x, None).unwrap().logits.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = m.forward(&x, None).unwrap().logits.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut differs = 0;
        for _ in 0..3 {
            let s1: Vec<f32> = m.forward(&x, Some(&mut rng)).unwrap().logits.flatten_all().unwrap().to_vec1().unwrap();
            let s2: Vec<f32> = m.forward(&x, Some(&mut rng)).unwrap().logits.flatten_all().unwrap().to_vec1().unwrap();
            let max = s1.iter().zip(&s2).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            if max > 0.0 {
                differs += 1;
            }
        }
        assert_eq!(differs, 3);
    }

    #[test]
    fn zero_head_gives_bias_logits() {
        let m = tiny(0.0);
        let cls = m.classifier();
        cls.weight.set(&cls.weight.zeros_like().unwrap()).unwrap();
        let bias = Tensor::new(&[0.3f32, -1.2], &Device::Cpu).unwrap();
        cls.bias.as_ref().unwrap().set(&bias).unwrap();
        let out = m.forward(&Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap(), None).unwrap();
        let l = out.logits.to_dtype(DType::F64).unwrap();
        let cup: Vec<f64> = l.narrow(1, 0, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let disc: Vec<f64> = l.narrow(1, 1, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(cup.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert!(disc.iter().all(|&v| (v + 1.2).abs() < 1e-6));
        let p: Vec<f32> = out.probs.narrow(1, 0, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let s = 1.0 / (1.0 + (-0.3f32).exp());
        assert!(p.iter().all(|&v| (v - s).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_shapes() {
        let m = tiny(0.5);
        assert!(matches!(m.forward(&batch(1, 12), None), Err(Error::InvalidArgument(_))));
        let x = Tensor::zeros((1, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(m.forward(&x, None).is_err());
    }

    #[test]
    fn default_tinyunet_has_about_100k_parameters() {
        let m = SegModel::new(ModelConfig::default(), 0, &Device::Cpu).unwrap();
        let n = m.parameter_count();
        assert!((90_000..130_000).contains(&n), "{n}");
    }

    #[test]
    fn clone_is_deep() {
        let m = tiny(0.5);
        let c = m.try_clone().unwrap();
        assert!(m.same_parameters(&c).unwrap());
        let v = &c.trainable_vars()[0];
        v.set(&(v.as_tensor() + 1.0).unwrap()).unwrap();
        assert!(!m.same_parameters(&c).unwrap());
    }
}
