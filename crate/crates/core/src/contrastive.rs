//! Saliency-informed cup/disc embeddings and the losses that push them apart.
//!
//! Sign convention: cosine similarity enters the objective as `+λ·cos`
//! (minimised), every divergence enters as `−λ·div` (maximised).

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    Cosine,
    Kl,
    Js,
    Mmd,
    Euclidean,
}

impl SimilarityMetric {
    pub const ALL: [SimilarityMetric; 5] = [
        SimilarityMetric::Cosine,
        SimilarityMetric::Kl,
        SimilarityMetric::Js,
        SimilarityMetric::Mmd,
        SimilarityMetric::Euclidean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityMetric::Cosine => "cosine",
            SimilarityMetric::Kl => "kl",
            SimilarityMetric::Js => "js",
            SimilarityMetric::Mmd => "mmd",
            SimilarityMetric::Euclidean => "euclidean",
        }
    }

    /// +1 for similarities (minimised), −1 for divergences (maximised).
    pub fn sign(self) -> f64 {
        match self {
            SimilarityMetric::Cosine => 1.0,
            _ => -1.0,
        }
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown similarity metric '{s}' (expected cosine, kl, js, mmd or euclidean)")))
    }
}

/// Where the cosine is taken: per pixel then averaged, or once per image on
/// globally average-pooled embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CosineReduction {
    #[default]
    Pixel,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub metric: SimilarityMetric,
    pub reduction: CosineReduction,
    pub epsilon: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            metric: SimilarityMetric::Cosine,
            reduction: CosineReduction::Pixel,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimilarityLoss {
    /// Scalar value of the metric itself (unsigned).
    pub value: Tensor,
    pub metric: SimilarityMetric,
}

impl SimilarityLoss {
    /// Contribution to the objective before weighting: `sign · value`.
    pub fn objective(&self) -> Result<Tensor> {
        Ok((&self.value * self.metric.sign())?)
    }

    pub fn scalar(&self) -> Result<f64> {
        Ok(self.value.to_dtype(DType::F64)?.to_scalar()?)
    }
}

/// `(e + e_GC^cup, e + e_GC^disc)` with the `B×Hf×Wf` maps broadcast over
/// channels.
pub fn class_embeddings(e: &Tensor, gc_cup: &Tensor, gc_disc: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, _, h, w) = e.dims4()?;
    for (name, gc) in [("cup", gc_cup), ("disc", gc_disc)] {
        if gc.dims() != [b, h, w] {
            return Err(Error::invalid(format!(
                "{name} saliency shape {:?} does not match features {:?}",
                gc.dims(),
                e.dims()
            )));
        }
    }
    let add = |gc: &Tensor| -> Result<Tensor> { Ok(e.broadcast_add(&gc.to_dtype(e.dtype())?.unsqueeze(1)?)?) };
    Ok((add(gc_cup)?, add(gc_disc)?))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("embedding shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    a.dims4()?;
    Ok(())
}

/// Cosine along `dim` with the product of norms floored at `eps`. The floor is
/// applied to the squared product so zero vectors have finite gradients.
fn cosine_along(a: &Tensor, b: &Tensor, dim: usize, eps: f64) -> Result<Tensor> {
    let dot = a.mul(b)?.sum(dim)?;
    let sa = a.sqr()?.sum(dim)?;
    let sb = b.sqr()?.sum(dim)?;
    let denom = sa.mul(&sb)?.maximum(eps * eps)?.sqrt()?;
    Ok(dot.div(&denom)?)
}

/// Mean over batch and pixels of the per-pixel channel cosine.
pub fn cosine_similarity_loss(a: &Tensor, b: &Tensor, eps: f64) -> Result<SimilarityLoss> {
    same_shape(a, b)?;
    if eps <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    Ok(SimilarityLoss {
        value: cosine_along(a, b, 1, eps)?.mean_all()?,
        metric: SimilarityMetric::Cosine,
    })
}

/// Cosine between spatially averaged embeddings, averaged over the batch.
pub fn image_cosine_similarity_loss(a: &Tensor, b: &Tensor, eps: f64) -> Result<SimilarityLoss> {
    same_shape(a, b)?;
    if eps <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let ga = a.mean((2, 3))?;
    let gb = b.mean((2, 3))?;
    Ok(SimilarityLoss {
        value: cosine_along(&ga, &gb, 1, eps)?.mean_all()?,
        metric: SimilarityMetric::Cosine,
    })
}

/// Maximum number of points per side in the MMD estimate.
pub const MMD_MAX_POINTS: usize = 512;
const EUCLID_EPS: f64 = 1e-12;

/// Divergence between the two embeddings. KL and JS compare per-pixel
/// softmax distributions over channels (per-pixel values are floored at
/// zero against rounding); MMD treats pixel vectors as samples
/// under a Gaussian kernel; Euclidean is the mean per-pixel L2 distance.
pub fn divergence_loss(a: &Tensor, b: &Tensor, metric: SimilarityMetric) -> Result<SimilarityLoss> {
    same_shape(a, b)?;
    let value = match metric {
        SimilarityMetric::Cosine => {
            return Err(Error::invalid("cosine is a similarity; use cosine_similarity_loss"));
        }
        SimilarityMetric::Kl => {
            let la = candle_nn::ops::log_softmax(a, 1)?;
            let lb = candle_nn::ops::log_softmax(b, 1)?;
            la.exp()?.mul(&(la - lb)?)?.sum(1)?.relu()?.mean_all()?
        }
        SimilarityMetric::Js => {
            let la = candle_nn::ops::log_softmax(a, 1)?;
            let lb = candle_nn::ops::log_softmax(b, 1)?;
            let (pa, pb) = (la.exp()?, lb.exp()?);
            // log of the mixture, as max + log-mean-exp so equal inputs give exact zeros
            let mx = la.maximum(&lb)?.detach();
            let lse = ((&la - &mx)?.exp()? + (&lb - &mx)?.exp()?)?.log()?;
            let lm = (mx + (lse - std::f64::consts::LN_2)?)?;
            let ka = pa.mul(&(la - &lm)?)?.sum(1)?;
            let kb = pb.mul(&(lb - &lm)?)?.sum(1)?;
            ((ka + kb)? * 0.5)?.relu()?.mean_all()?
        }
        SimilarityMetric::Mmd => mmd_squared(a, b)?,
        SimilarityMetric::Euclidean => {
            let s = (a - b)?.sqr()?.sum(1)?;
            ((s + EUCLID_EPS)?.sqrt()? - EUCLID_EPS.sqrt())?.mean_all()?
        }
    };
    Ok(SimilarityLoss { value, metric })
}

/// Pixel vectors `N×K` from `B×K×H×W`, taking every `stride`-th pixel so at
/// most `MMD_MAX_POINTS` remain.
pub fn mmd_samples(x: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = x.dims4()?;
    let n = b * h * w;
    let points = x.permute((0, 2, 3, 1))?.reshape((n, k))?;
    let stride = n.div_ceil(MMD_MAX_POINTS);
    if stride == 1 {
        return Ok(points);
    }
    let idx: Vec<u32> = (0..n).step_by(stride).map(|i| i as u32).collect();
    let idx = Tensor::new(idx.as_slice(), x.device())?;
    Ok(points.index_select(&idx, 0)?)
}

fn sq_dists(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let xx = x.sqr()?.sum_keepdim(1)?;
    let yy = y.sqr()?.sum_keepdim(1)?.t()?;
    let xy = x.matmul(&y.t()?)?;
    Ok(xx.broadcast_add(&yy)?.sub(&(xy * 2.0)?)?.relu()?)
}

/// Median pairwise distance over the pooled samples, with 1 as the fallback
/// when every point coincides.
pub fn median_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64> {
    let z = Tensor::cat(&[x.detach(), y.detach()], 0)?.to_dtype(DType::F64)?;
    let d: Vec<Vec<f64>> = sq_dists(&z, &z)?.to_vec2()?;
    let mut vals: Vec<f64> = Vec::with_capacity(d.len() * d.len() / 2);
    for (i, row) in d.iter().enumerate() {
        vals.extend(row[i + 1..].iter().map(|v| v.sqrt()));
    }
    if vals.is_empty() {
        return Ok(1.0);
    }
    let mid = vals.len() / 2;
    let (_, m, _) = vals.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Ok(if *m > 0.0 { *m } else { 1.0 })
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel whose bandwidth is
/// the median heuristic, held constant for differentiation.
fn mmd_squared(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let x = mmd_samples(a)?;
    let y = mmd_samples(b)?;
    let sigma = median_bandwidth(&x, &y)?;
    let gamma = -1.0 / (2.0 * sigma * sigma);
    let k = |p: &Tensor, q: &Tensor| -> Result<Tensor> { Ok((sq_dists(p, q)? * gamma)?.exp()?.mean_all()?) };
    let kxx = k(&x, &x)?;
    let kyy = k(&y, &y)?;
    let kxy = k(&x, &y)?;
    Ok(((kxx + kyy)? - (kxy * 2.0)?)?)
}

/// Metric value for the configured metric and reduction.
pub fn similarity_loss(a: &Tensor, b: &Tensor, cfg: &ContrastiveConfig) -> Result<SimilarityLoss> {
    match (cfg.metric, cfg.reduction) {
        (SimilarityMetric::Cosine, CosineReduction::Pixel) => cosine_similarity_loss(a, b, cfg.epsilon),
        (SimilarityMetric::Cosine, CosineReduction::Image) => image_cosine_similarity_loss(a, b, cfg.epsilon),
        (m, _) => divergence_loss(a, b, m),
    }
}
