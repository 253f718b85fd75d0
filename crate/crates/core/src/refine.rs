//! Prototype-based pseudolabel denoising and the masked segmentation loss.
//!
//! Everything here works on one class at a time: features modulated by that
//! class's saliency, object/background prototypes from that class's
//! pseudolabels, and a keep-mask for that class's channel.

use std::io::Write;

use candle_core::{DType, Tensor};
use serde::Serialize;

use crate::pseudolabel::uncertainty_mask;
use crate::{ClassId, Error, Result};

/// Probability clamp used inside the logarithms of the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// `e · e_GC` with the `B×H×W` saliency broadcast over feature channels.
pub fn modulate_features(e: &Tensor, e_gc: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = e.dims4()?;
    if e_gc.dims() != [b, h, w] {
        return Err(Error::invalid(format!(
            "saliency shape {:?} does not match features {:?}",
            e_gc.dims(),
            e.dims()
        )));
    }
    Ok(e.broadcast_mul(&e_gc.to_dtype(e.dtype())?.unsqueeze(1)?)?)
}

#[derive(Debug, Clone)]
pub struct Prototypes {
    pub class: ClassId,
    /// `Kf` object prototype.
    pub z_ob: Tensor,
    /// `Kf` background prototype.
    pub z_bg: Tensor,
    pub valid_ob: bool,
    pub valid_bg: bool,
}

impl Prototypes {
    pub fn valid(&self) -> bool {
        self.valid_ob && self.valid_bg
    }
}

fn check_grid(name: &str, t: &Tensor, b: usize, h: usize, w: usize) -> Result<()> {
    if t.dims() != [b, h, w] {
        return Err(Error::invalid(format!("{name} has shape {:?}, expected [{b}, {h}, {w}]", t.dims())));
    }
    Ok(())
}

/// Weighted prototype `Σ e' w / Σ w` over batch and pixels, with `None` when
/// the weights sum to zero.
fn weighted_mean(e_prime: &Tensor, weights: &Tensor) -> Result<Option<Tensor>> {
    let denom: f64 = weights.sum_all()?.to_scalar()?;
    if denom <= 0.0 {
        return Ok(None);
    }
    let num = e_prime.broadcast_mul(&weights.unsqueeze(1)?)?.sum((0, 2, 3))?;
    Ok(Some((num / denom)?))
}

/// Object and background prototypes. Reliable object pixels
/// (`ŷ=1`, `u<η`) are weighted by `p`, reliable background pixels by `1−p`.
/// `labels`, `reliable` and `probs` are `B×H×W` for this class.
pub fn compute_prototypes(
    e_prime: &Tensor,
    labels: &Tensor,
    reliable: &Tensor,
    probs: &Tensor,
    class: ClassId,
) -> Result<Prototypes> {
    let (b, k, h, w) = e_prime.dims4()?;
    check_grid("labels", labels, b, h, w)?;
    check_grid("reliable mask", reliable, b, h, w)?;
    check_grid("probs", probs, b, h, w)?;
    let dtype = e_prime.dtype();
    let e = e_prime.detach().to_dtype(DType::F64)?;
    let y = labels.detach().to_dtype(DType::F64)?;
    let r = reliable.detach().to_dtype(DType::F64)?;
    let p = probs.detach().to_dtype(DType::F64)?;
    let b_ob = y.mul(&r)?;
    let b_bg = (1.0 - &y)?.mul(&r)?;
    let z_ob = weighted_mean(&e, &b_ob.mul(&p)?)?;
    let z_bg = weighted_mean(&e, &b_bg.mul(&(1.0 - &p)?)?)?;
    let zeros = Tensor::zeros(k, dtype, e_prime.device())?;
    Ok(Prototypes {
        class,
        valid_ob: z_ob.is_some(),
        valid_bg: z_bg.is_some(),
        z_ob: z_ob.map_or(Ok(zeros.clone()), |z| z.to_dtype(dtype))?,
        z_bg: z_bg.map_or(Ok(zeros), |z| z.to_dtype(dtype))?,
    })
}

/// Per-pixel Euclidean distances of `e'` to both prototypes, `B×H×W` each.
pub fn feature_distances(e_prime: &Tensor, protos: &Prototypes) -> Result<(Tensor, Tensor)> {
    if !protos.valid() {
        return Err(Error::ContractViolation(format!(
            "{} prototypes are not valid (object: {}, background: {})",
            protos.class, protos.valid_ob, protos.valid_bg
        )));
    }
    let (_, k, _, _) = e_prime.dims4()?;
    let dist = |z: &Tensor| -> Result<Tensor> {
        let z = z.to_dtype(e_prime.dtype())?.reshape((1, k, 1, 1))?;
        Ok(e_prime.broadcast_sub(&z)?.sqr()?.sum(1)?.sqrt()?)
    };
    Ok((dist(&protos.z_ob)?, dist(&protos.z_bg)?))
}

/// Keep-mask from a 0/1 reliability mask: reliable positives closer to the
/// object prototype and reliable negatives closer to the background one.
/// Ties are dropped.
pub fn refined_mask_from_reliable(reliable: &Tensor, labels: &Tensor, d_ob: &Tensor, d_bg: &Tensor) -> Result<Tensor> {
    let dtype = reliable.dtype();
    let r = reliable.to_dtype(DType::F64)?;
    let y = labels.to_dtype(DType::F64)?;
    let closer_ob = d_ob.lt(d_bg)?.to_dtype(DType::F64)?;
    let closer_bg = d_ob.gt(d_bg)?.to_dtype(DType::F64)?;
    let keep = (y.mul(&closer_ob)? + (1.0 - &y)?.mul(&closer_bg)?)?;
    Ok(r.mul(&keep)?.to_dtype(dtype)?)
}

/// `1[u<η][ŷ=1][d_ob<d_bg] + 1[u<η][ŷ=0][d_ob>d_bg]`.
pub fn refined_mask(u: &Tensor, eta: f64, labels: &Tensor, d_ob: &Tensor, d_bg: &Tensor) -> Result<Tensor> {
    refined_mask_from_reliable(&uncertainty_mask(u, eta)?, labels, d_ob, d_bg)
}

/// Mean binary cross-entropy over pixels where `mask` is 1. Probabilities are
/// clamped to `[1e-7, 1−1e-7]`. An empty mask gives a zero loss that is still
/// attached to `probs`.
pub fn masked_ce_loss(probs: &Tensor, labels: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if probs.dims() != labels.dims() || probs.dims() != mask.dims() {
        return Err(Error::invalid(format!(
            "loss inputs disagree: probs {:?}, labels {:?}, mask {:?}",
            probs.dims(),
            labels.dims(),
            mask.dims()
        )));
    }
    let dtype = probs.dtype();
    let y = labels.detach().to_dtype(dtype)?;
    let m = mask.detach().to_dtype(dtype)?;
    let p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let ce = (y.mul(&p.log()?)? + (1.0 - &y)?.mul(&(1.0 - &p)?.log()?)?)?.neg()?;
    let kept: f64 = m.to_dtype(DType::F64)?.sum_all()?.to_scalar()?;
    let total = ce.mul(&m)?.sum_all()?;
    if kept == 0.0 {
        return Ok((total * 0.0)?);
    }
    Ok((total / kept)?)
}

#[derive(Debug, Clone)]
pub struct ClassRefinement {
    pub prototypes: Prototypes,
    /// `B×H×W` keep-mask.
    pub mask: Tensor,
    /// True when a prototype was missing and the uncertainty mask was used.
    pub fell_back: bool,
    pub d_ob: Option<Tensor>,
    pub d_bg: Option<Tensor>,
}

/// Full per-class refinement. `features` and `e_gc` must already be at the
/// label resolution; `labels`, `u` and `probs` are this class's `B×H×W`
/// channels.
pub fn refine_class(
    features: &Tensor,
    e_gc: &Tensor,
    labels: &Tensor,
    u: &Tensor,
    eta: f64,
    probs: &Tensor,
    class: ClassId,
) -> Result<ClassRefinement> {
    let e_prime = modulate_features(&features.detach(), &e_gc.detach())?;
    let reliable = uncertainty_mask(u, eta)?;
    let prototypes = compute_prototypes(&e_prime, labels, &reliable, probs, class)?;
    if !prototypes.valid() {
        return Ok(ClassRefinement {
            prototypes,
            mask: reliable,
            fell_back: true,
            d_ob: None,
            d_bg: None,
        });
    }
    let (d_ob, d_bg) = feature_distances(&e_prime, &prototypes)?;
    let mask = refined_mask_from_reliable(&reliable, labels, &d_ob, &d_bg)?;
    Ok(ClassRefinement {
        prototypes,
        mask,
        fell_back: false,
        d_ob: Some(d_ob),
        d_bg: Some(d_bg),
    })
}

/// One JSON line of refinement diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct RefineDebugRecord {
    pub epoch: usize,
    pub batch: usize,
    pub class: ClassId,
    pub valid_ob: bool,
    pub valid_bg: bool,
    pub z_ob: Vec<f32>,
    pub z_bg: Vec<f32>,
    pub reliable_fraction: f64,
    pub kept_fraction: f64,
    pub d_ob_histogram: Vec<usize>,
    pub d_bg_histogram: Vec<usize>,
    pub histogram_max: f64,
}

const HIST_BINS: usize = 10;

fn histogram(values: &[f64], max: f64) -> Vec<usize> {
    let mut bins = vec![0; HIST_BINS];
    for &v in values {
        let i = if max > 0.0 { ((v / max) * HIST_BINS as f64) as usize } else { 0 };
        bins[i.min(HIST_BINS - 1)] += 1;
    }
    bins
}

impl RefineDebugRecord {
    pub fn new(epoch: usize, batch: usize, refinement: &ClassRefinement, reliable: &Tensor) -> Result<Self> {
        let frac = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.mean_all()?.to_scalar()?) };
        let flat = |t: &Option<Tensor>| -> Result<Vec<f64>> {
            match t {
                Some(t) => Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?),
                None => Ok(Vec::new()),
            }
        };
        let d_ob = flat(&refinement.d_ob)?;
        let d_bg = flat(&refinement.d_bg)?;
        let max = d_ob.iter().chain(&d_bg).cloned().fold(0.0, f64::max);
        let p = &refinement.prototypes;
        Ok(Self {
            epoch,
            batch,
            class: p.class,
            valid_ob: p.valid_ob,
            valid_bg: p.valid_bg,
            z_ob: p.z_ob.to_dtype(DType::F32)?.to_vec1()?,
            z_bg: p.z_bg.to_dtype(DType::F32)?.to_vec1()?,
            reliable_fraction: frac(reliable)?,
            kept_fraction: frac(&refinement.mask)?,
            d_ob_histogram: histogram(&d_ob, max),
            d_bg_histogram: histogram(&d_bg, max),
            histogram_max: max,
        })
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}
