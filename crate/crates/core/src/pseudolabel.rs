//! Confidence-thresholded pseudolabels and Monte Carlo dropout uncertainty.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, UnlabeledSplit};
use crate::nn::{ModelRng, SegModel};
use crate::{tensor_io, Error, Result, CHANNEL_CONVENTION};

pub const CACHE_KIND: &str = "gradcl-pseudolabels";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelConfig {
    /// Confidence threshold γ; pixels with `p ≥ γ` become positive.
    pub gamma: f64,
    /// Uncertainty threshold η; pixels with `u < η` are kept.
    pub eta: f64,
    /// Number of stochastic passes K.
    pub mc_passes: usize,
    pub batch_size: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            gamma: 0.75,
            eta: 0.05,
            mc_passes: 10,
            batch_size: 8,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        check_eta(self.eta)?;
        check_passes(self.mc_passes)?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("gamma {gamma} outside (0,1)")))
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("eta {eta} must be positive")))
    }
}

fn check_passes(k: usize) -> Result<()> {
    if k >= 2 {
        Ok(())
    } else {
        Err(Error::invalid(format!("need at least 2 stochastic passes, got {k}")))
    }
}

#[derive(Debug, Clone)]
pub struct PseudoLabelMap {
    /// 0/1 labels with the shape of the probabilities.
    pub labels: Tensor,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct UncertaintyMap {
    /// Population standard deviation over passes.
    pub u: Tensor,
    pub mean_probs: Tensor,
    pub k: usize,
}

/// `1[p ≥ γ]` elementwise; ties are positive.
pub fn threshold_pseudolabels(probs: &Tensor, gamma: f64) -> Result<PseudoLabelMap> {
    check_gamma(gamma)?;
    let labels = probs.ge(gamma)?.to_dtype(probs.dtype())?;
    Ok(PseudoLabelMap { labels, gamma })
}

/// `1[u < η]` elementwise, as 0/1 values in the dtype of `u`.
pub fn uncertainty_mask(u: &Tensor, eta: f64) -> Result<Tensor> {
    check_eta(eta)?;
    Ok(u.lt(eta)?.to_dtype(u.dtype())?)
}

/// Mean and population standard deviation of a set of probability maps.
pub fn uncertainty_from_passes(passes: &[Tensor]) -> Result<UncertaintyMap> {
    check_passes(passes.len())?;
    let dtype = passes[0].dtype();
    // Offsets from the first pass make agreeing passes give exactly zero.
    let stacked = Tensor::stack(passes, 0)?.to_dtype(DType::F64)?;
    let base = stacked.narrow(0, 0, 1)?;
    let offsets = stacked.broadcast_sub(&base)?;
    let mean_offset = offsets.mean_keepdim(0)?;
    let var = offsets.broadcast_sub(&mean_offset)?.sqr()?.mean(0)?;
    Ok(UncertaintyMap {
        u: var.sqrt()?.to_dtype(dtype)?,
        mean_probs: (base + mean_offset)?.squeeze(0)?.to_dtype(dtype)?,
        k: passes.len(),
    })
}

/// K stochastic passes with dropout active. Backbone features are computed
/// once in inference mode; only the dropout-bearing head is resampled.
pub fn mc_dropout_uncertainty(model: &SegModel, batch: &Tensor, k: usize, rng: &mut ModelRng) -> Result<UncertaintyMap> {
    check_passes(k)?;
    let (_, _, h, w) = batch.dims4()?;
    let features = model.features(batch, false)?.detach();
    let passes = (0..k)
        .map(|_| Ok(candle_nn::ops::sigmoid(&model.head(&features, (h, w), Some(rng))?)?))
        .collect::<Result<Vec<_>>>()?;
    uncertainty_from_passes(&passes)
}

/// Per-image pseudolabel state frozen from the source model.
#[derive(Debug, Clone)]
pub struct PseudoLabelEntry {
    /// `2×H×W` 0/1 labels.
    pub labels: Tensor,
    /// `2×H×W` uncertainty.
    pub u: Tensor,
    /// `2×H×W` deterministic source probabilities.
    pub probs: Tensor,
    /// `2×H×W` mean of the stochastic passes.
    pub mean_probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    pub config: PseudoLabelConfig,
    pub entries: BTreeMap<String, PseudoLabelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    gamma: f64,
    eta: f64,
    mc_passes: usize,
    channel_convention: String,
    ids: Vec<String>,
}

impl PseudoLabelSet {
    pub fn get(&self, id: &str) -> Result<&PseudoLabelEntry> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no pseudolabels for image '{id}'")))
    }

    /// Stacks labels, uncertainty and source probabilities for `ids` into
    /// `B×2×H×W` tensors.
    pub fn batch(&self, ids: &[&str], device: &Device) -> Result<(Tensor, Tensor, Tensor)> {
        let mut labels = Vec::with_capacity(ids.len());
        let mut u = Vec::with_capacity(ids.len());
        let mut probs = Vec::with_capacity(ids.len());
        for id in ids {
            let e = self.get(id)?;
            labels.push(e.labels.clone());
            u.push(e.u.clone());
            probs.push(e.probs.clone());
        }
        let stack = |v: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::stack(&v, 0)?.to_device(device)?) };
        Ok((stack(labels)?, stack(u)?, stack(probs)?))
    }

    /// Fraction of pixels per class passing the uncertainty filter.
    pub fn kept_fraction(&self) -> Result<[f64; 2]> {
        let mut kept = [0.0; 2];
        let mut total = 0.0;
        for e in self.entries.values() {
            let m = uncertainty_mask(&e.u, self.config.eta)?.to_dtype(DType::F64)?;
            let per: Vec<f64> = m.sum((1, 2))?.to_vec1()?;
            kept[0] += per[0];
            kept[1] += per[1];
            total += (m.dim(1)? * m.dim(2)?) as f64;
        }
        if total == 0.0 {
            return Ok([0.0; 2]);
        }
        Ok([kept[0] / total, kept[1] / total])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CacheMeta {
            gamma: self.config.gamma,
            eta: self.config.eta,
            mc_passes: self.config.mc_passes,
            channel_convention: CHANNEL_CONVENTION.into(),
            ids: self.entries.keys().cloned().collect(),
        };
        let mut tensors = Vec::with_capacity(self.entries.len() * 4);
        for (id, e) in &self.entries {
            tensors.push((format!("{id}/labels"), e.labels.clone()));
            tensors.push((format!("{id}/u"), e.u.clone()));
            tensors.push((format!("{id}/probs"), e.probs.clone()));
            tensors.push((format!("{id}/mean_probs"), e.mean_probs.clone()));
        }
        tensor_io::write(path, CACHE_KIND, &meta, &tensors)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let file = tensor_io::read(path)?;
        if file.kind != CACHE_KIND {
            return Err(Error::Checkpoint(format!("file holds '{}', not a pseudolabel cache", file.kind)));
        }
        let meta: CacheMeta = serde_json::from_value(file.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("malformed pseudolabel cache header: {e}")))?;
        if meta.channel_convention != CHANNEL_CONVENTION {
            return Err(Error::Checkpoint(format!(
                "cache channel convention '{}' differs from '{CHANNEL_CONVENTION}'",
                meta.channel_convention
            )));
        }
        let mut entries = BTreeMap::new();
        for id in meta.ids {
            let entry = PseudoLabelEntry {
                labels: file.tensor(&format!("{id}/labels"), device)?,
                u: file.tensor(&format!("{id}/u"), device)?,
                probs: file.tensor(&format!("{id}/probs"), device)?,
                mean_probs: file.tensor(&format!("{id}/mean_probs"), device)?,
            };
            entries.insert(id, entry);
        }
        let config = PseudoLabelConfig {
            gamma: meta.gamma,
            eta: meta.eta,
            mc_passes: meta.mc_passes,
            ..Default::default()
        };
        Ok(Self { config, entries })
    }
}

/// Runs the source model over a target split: deterministic probabilities,
/// thresholded labels, and MC dropout uncertainty per image.
pub fn generate_pseudolabels(
    model: &SegModel,
    split: &UnlabeledSplit,
    cfg: &PseudoLabelConfig,
    seed: u64,
) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = BTreeMap::new();
    for chunk in split.images.chunks(cfg.batch_size) {
        let images: Vec<_> = chunk.iter().map(|im| &im.image).collect();
        let x = images_to_tensor(&images, model.device())?;
        // detached so stored maps do not keep the forward graph alive
        let probs = model.forward(&x, None)?.probs.detach().to_dtype(DType::F32)?;
        let labels = threshold_pseudolabels(&probs, cfg.gamma)?.labels;
        let unc = mc_dropout_uncertainty(model, &x, cfg.mc_passes, &mut rng)?;
        let mean_probs = unc.mean_probs.detach().to_dtype(DType::F32)?;
        let u = unc.u.detach().to_dtype(DType::F32)?;
        for (i, im) in chunk.iter().enumerate() {
            let entry = PseudoLabelEntry {
                labels: labels.get(i)?,
                u: u.get(i)?,
                probs: probs.get(i)?,
                mean_probs: mean_probs.get(i)?,
            };
            entries.insert(im.id.clone(), entry);
        }
    }
    Ok(PseudoLabelSet {
        config: cfg.clone(),
        entries,
    })
}
