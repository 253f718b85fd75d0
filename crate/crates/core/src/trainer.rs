//! Target-domain adaptation loop and the metric ablation harness.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{class_embeddings, similarity_loss, ContrastiveConfig, SimilarityMetric};
use crate::data::{images_to_tensor, weak_augment, AugmentConfig, DatasetSplit, UnlabeledSplit};
use crate::metrics::{evaluate, EvalConfig, MetricsReport};
use crate::nn::ops::resize_bilinear;
use crate::nn::SegModel;
use crate::pseudolabel::{generate_pseudolabels, uncertainty_mask, PseudoLabelConfig, PseudoLabelSet};
use crate::refine::{masked_ce_loss, refine_class, RefineDebugRecord};
use crate::saliency::both_saliency;
use crate::{ClassId, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub gamma: f64,
    pub eta: f64,
    pub mc_passes: usize,
    pub dropout_rate: f32,
    /// Weight of the contrastive term.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub contrastive: ContrastiveConfig,
    pub seed: u64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Recompute pseudolabels and uncertainty from the current model at the
    /// start of every epoch after the first.
    pub refresh_pseudolabels: bool,
    /// Replace both saliency maps by ones (regression reference).
    pub unit_saliency: bool,
    /// Directory for `last.ckpt` and `best.ckpt`, written at each epoch end.
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON-lines file receiving per-batch refinement diagnostics.
    pub debug_dump: Option<PathBuf>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let p = PseudoLabelConfig::default();
        Self {
            gamma: p.gamma,
            eta: p.eta,
            mc_passes: p.mc_passes,
            dropout_rate: 0.5,
            lambda: 1.0,
            epochs: 20,
            batch_size: 8,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.99,
            contrastive: ContrastiveConfig::default(),
            seed: 0,
            augment: true,
            augmentation: AugmentConfig::default(),
            refresh_pseudolabels: false,
            unit_saliency: false,
            checkpoint_dir: None,
            debug_dump: None,
        }
    }
}

impl AdaptConfig {
    pub fn pseudolabel_config(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            gamma: self.gamma,
            eta: self.eta,
            mc_passes: self.mc_passes,
            batch_size: self.batch_size.max(1),
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.pseudolabel_config().validate()?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda {} must be a finite non-negative number", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0,1)"));
        }
        if !(self.contrastive.epsilon > 0.0) {
            return Err(Error::invalid("contrastive epsilon must be positive"));
        }
        Ok(())
    }

    fn pseudolabel_seed(&self, epoch: usize) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)
    }
}

/// `L_seg + λ·L_sim`, where `l_sim` already carries the metric's sign.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn total_loss(l_seg: &Tensor, l_sim: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda {lambda} must be non-negative")));
    }
    Ok((l_seg + (l_sim * lambda)?)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over batches, weighted by batch size.
    pub l_seg: f64,
    /// Unsigned metric value.
    pub l_sim: f64,
    pub l_total: f64,
    /// Fraction of pixels kept by the refined mask, cup then disc.
    pub kept_fraction: [f64; 2],
    /// Batches per class where a prototype was missing.
    pub fallback_batches: [usize; 2],
    pub wall_time_secs: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch
            && self.l_seg.to_bits() == o.l_seg.to_bits()
            && self.l_sim.to_bits() == o.l_sim.to_bits()
            && self.l_total.to_bits() == o.l_total.to_bits()
            && self.kept_fraction.map(f64::to_bits) == o.kept_fraction.map(f64::to_bits)
            && self.fallback_batches == o.fallback_batches
    }
}

/// Equality ignores wall-clock fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptReport {
    pub metric: SimilarityMetric,
    pub lambda: f64,
    pub seed: u64,
    pub n_images: usize,
    /// Fraction of pixels passing the uncertainty filter, cup then disc.
    pub reliable_fraction: [f64; 2],
    pub epochs: Vec<EpochRecord>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub wall_time_secs: f64,
}

impl PartialEq for AdaptReport {
    fn eq(&self, o: &Self) -> bool {
        self.metric == o.metric
            && self.lambda.to_bits() == o.lambda.to_bits()
            && self.seed == o.seed
            && self.n_images == o.n_images
            && self.reliable_fraction.map(f64::to_bits) == o.reliable_fraction.map(f64::to_bits)
            && self.epochs == o.epochs
            && self.last_checkpoint == o.last_checkpoint
            && self.best_checkpoint == o.best_checkpoint
    }
}

impl AdaptReport {
    /// One JSON object per epoch.
    pub fn write_epoch_records(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar()?)
}

fn channel(t: &Tensor, class: ClassId) -> Result<Tensor> {
    Ok(t.narrow(1, class.channel(), 1)?.squeeze(1)?)
}

fn upsample_map(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Ok(resize_bilinear(&map.unsqueeze(1)?, h, w)?.squeeze(1)?)
}

struct BatchOutcome {
    l_seg: f64,
    l_sim: f64,
    l_total: f64,
    kept: [f64; 2],
    fell_back: [bool; 2],
}

struct Adapter<'a> {
    cfg: &'a AdaptConfig,
    model: SegModel,
    opt: AdamW,
    rng: ChaCha8Rng,
    debug: Option<BufWriter<File>>,
}

impl Adapter<'_> {
    fn step(&mut self, split: &UnlabeledSplit, ids: &[usize], pseudo: &PseudoLabelSet, epoch: usize, batch_no: usize) -> Result<BatchOutcome> {
        let cfg = self.cfg;
        let images: Vec<_> = ids
            .iter()
            .map(|&i| {
                let im = &split.images[i].image;
                if cfg.augment {
                    weak_augment(im, &cfg.augmentation, &mut self.rng)
                } else {
                    im.clone()
                }
            })
            .collect();
        let refs: Vec<_> = images.iter().collect();
        let x = images_to_tensor(&refs, self.model.device())?;
        let (_, _, h, w) = x.dims4()?;
        let out = self.model.forward_train(&x, &mut self.rng)?;

        let saliency = if cfg.unit_saliency {
            let (b, _, hf, wf) = out.features.dims4()?;
            let ones = Tensor::ones((b, hf, wf), out.features.dtype(), out.features.device())?;
            [ones.clone(), ones]
        } else {
            let [cup, disc] = both_saliency(&self.model, &out.features, (h, w))?;
            [cup.e_gc, disc.e_gc]
        };

        let id_strs: Vec<&str> = ids.iter().map(|&i| split.images[i].id.as_str()).collect();
        let (labels, u, _) = pseudo.batch(&id_strs, self.model.device())?;
        let labels = labels.to_dtype(out.probs.dtype())?;
        let u = u.to_dtype(out.probs.dtype())?;
        let probs_now = out.probs.detach();
        let features_up = resize_bilinear(&out.features.detach(), h, w)?;

        let mut masks = Vec::with_capacity(2);
        let mut kept = [0.0; 2];
        let mut fell_back = [false; 2];
        for class in ClassId::ALL {
            let c = class.channel();
            let gc_up = upsample_map(&saliency[c], h, w)?;
            let u_c = channel(&u, class)?;
            let r = refine_class(
                &features_up,
                &gc_up,
                &channel(&labels, class)?,
                &u_c,
                pseudo.config.eta,
                &channel(&probs_now, class)?,
                class,
            )?;
            kept[c] = scalar(&r.mask.mean_all()?)?;
            fell_back[c] = r.fell_back;
            if let Some(out) = self.debug.as_mut() {
                let reliable = uncertainty_mask(&u_c, pseudo.config.eta)?;
                RefineDebugRecord::new(epoch, batch_no, &r, &reliable)?.write_jsonl(out)?;
            }
            masks.push(r.mask);
        }
        let mask = Tensor::stack(&masks, 1)?;
        let l_seg = masked_ce_loss(&out.probs, &labels, &mask)?;

        let (e_cup, e_disc) = class_embeddings(&out.features, &saliency[0], &saliency[1])?;
        let sim = similarity_loss(&e_cup, &e_disc, &cfg.contrastive)?;
        let total = total_loss(&l_seg, &sim.objective()?, cfg.lambda)?;

        let outcome = BatchOutcome {
            l_seg: scalar(&l_seg)?,
            l_sim: sim.scalar()?,
            l_total: scalar(&total)?,
            kept,
            fell_back,
        };
        if !(outcome.l_seg.is_finite() && outcome.l_sim.is_finite() && outcome.l_total.is_finite()) {
            let logits = out.logits.to_dtype(DType::F64)?.flatten_all()?;
            let (lo, hi) = (scalar(&logits.min(0)?)?, scalar(&logits.max(0)?)?);
            let feats = out.features.to_dtype(DType::F64)?.abs()?.flatten_all()?;
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {epoch} batch {batch_no} (images {id_strs:?}): \
                 L_seg={}, L_sim={}, L_total={}, logits in [{lo}, {hi}], max |feature|={}, kept cup={}, disc={}",
                outcome.l_seg,
                outcome.l_sim,
                outcome.l_total,
                scalar(&feats.max(0)?)?,
                kept[0],
                kept[1]
            )));
        }
        self.opt.backward_step(&total)?;
        Ok(outcome)
    }
}

/// Adapts a copy of `source` to the unlabeled target images. Pseudolabels and
/// uncertainty come from `source` before any update; features, saliency and
/// prototypes come from the evolving model at every batch.
pub fn adapt(source: &SegModel, split: &UnlabeledSplit, cfg: &AdaptConfig) -> Result<(SegModel, AdaptReport)> {
    cfg.validate()?;
    if split.is_empty() {
        return Err(Error::invalid(format!("target split '{}' is empty", split.domain_name)));
    }
    let mut model = source.try_clone()?;
    model.set_dropout_rate(cfg.dropout_rate)?;
    let pseudo = generate_pseudolabels(&model, split, &cfg.pseudolabel_config(), cfg.pseudolabel_seed(0))?;
    adapt_with_pseudolabels(model, split, cfg, pseudo)
}

/// Same as [`adapt`] with precomputed (for example cached) pseudolabels.
/// `model` is trained in place and returned.
pub fn adapt_with_pseudolabels(
    model: SegModel,
    split: &UnlabeledSplit,
    cfg: &AdaptConfig,
    mut pseudo: PseudoLabelSet,
) -> Result<(SegModel, AdaptReport)> {
    cfg.validate()?;
    if split.is_empty() {
        return Err(Error::invalid(format!("target split '{}' is empty", split.domain_name)));
    }
    for im in &split.images {
        pseudo.get(&im.id)?;
    }
    pseudo.config.eta = cfg.eta;
    let start = Instant::now();
    let mut model = model;
    model.set_dropout_rate(cfg.dropout_rate)?;
    let opt = AdamW::new(
        model.trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let debug = match &cfg.debug_dump {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut report = AdaptReport {
        metric: cfg.contrastive.metric,
        lambda: cfg.lambda,
        seed: cfg.seed,
        n_images: split.len(),
        reliable_fraction: pseudo.kept_fraction()?,
        epochs: Vec::with_capacity(cfg.epochs),
        last_checkpoint: None,
        best_checkpoint: None,
        wall_time_secs: 0.0,
    };
    let mut ad = Adapter {
        cfg,
        model,
        opt,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        debug,
    };
    let mut order: Vec<usize> = (0..split.len()).collect();
    let mut best = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        if cfg.refresh_pseudolabels && epoch > 0 {
            pseudo = generate_pseudolabels(&ad.model, split, &cfg.pseudolabel_config(), cfg.pseudolabel_seed(epoch))?;
        }
        order.shuffle(&mut ad.rng);
        let mut rec = EpochRecord {
            epoch,
            l_seg: 0.0,
            l_sim: 0.0,
            l_total: 0.0,
            kept_fraction: [0.0; 2],
            fallback_batches: [0; 2],
            wall_time_secs: 0.0,
        };
        for (batch_no, ids) in order.chunks(cfg.batch_size).enumerate() {
            let o = ad.step(split, ids, &pseudo, epoch, batch_no)?;
            let wgt = ids.len() as f64 / split.len() as f64;
            rec.l_seg += o.l_seg * wgt;
            rec.l_sim += o.l_sim * wgt;
            rec.l_total += o.l_total * wgt;
            for c in 0..2 {
                rec.kept_fraction[c] += o.kept[c] * wgt;
                rec.fallback_batches[c] += o.fell_back[c] as usize;
            }
        }
        rec.wall_time_secs = t0.elapsed().as_secs_f64();
        log::info!(
            "adapt epoch {}/{}: L_seg {:.5} L_sim {:.5} L_total {:.5} kept cup {:.3} disc {:.3}",
            epoch + 1,
            cfg.epochs,
            rec.l_seg,
            rec.l_sim,
            rec.l_total,
            rec.kept_fraction[0],
            rec.kept_fraction[1]
        );
        if let Some(dir) = &cfg.checkpoint_dir {
            let last = dir.join("last.ckpt");
            ad.model.save_checkpoint(&last)?;
            report.last_checkpoint = Some(last);
            if rec.l_total < best {
                best = rec.l_total;
                let path = dir.join("best.ckpt");
                ad.model.save_checkpoint(&path)?;
                report.best_checkpoint = Some(path);
            }
        }
        report.epochs.push(rec);
    }
    if let Some(mut d) = ad.debug.take() {
        d.flush()?;
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((ad.model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub metric: SimilarityMetric,
    /// Dice in percent, cup then disc.
    pub dice: [f64; 2],
    pub asd: [Option<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub domain: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rows of metric, cup Dice, cup ASD, disc Dice, disc ASD.
    pub fn to_text(&self) -> String {
        let asd = |a: Option<f64>| a.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"));
        let mut s = format!(
            "{:<10} {:>9} {:>9} {:>10} {:>10}\n",
            "metric", "cup_dice", "cup_asd", "disc_dice", "disc_asd"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>9.2} {:>9} {:>10.2} {:>10}\n",
                r.metric.as_str(),
                r.dice[0],
                asd(r.asd[0]),
                r.dice[1],
                asd(r.asd[1])
            ));
        }
        s
    }
}

/// Runs [`adapt`] once per metric with the same seed and evaluates each
/// adapted model on `test`.
pub fn ablate(
    source: &SegModel,
    target: &UnlabeledSplit,
    test: &DatasetSplit,
    cfg: &AdaptConfig,
    metrics: &[SimilarityMetric],
    eval: &EvalConfig,
) -> Result<(AblationReport, Vec<(AdaptReport, MetricsReport)>)> {
    if metrics.is_empty() {
        return Err(Error::invalid("ablation needs at least one metric"));
    }
    let mut rows = Vec::with_capacity(metrics.len());
    let mut details = Vec::with_capacity(metrics.len());
    for &metric in metrics {
        let mut c = cfg.clone();
        c.contrastive.metric = metric;
        if let Some(dir) = &cfg.checkpoint_dir {
            c.checkpoint_dir = Some(dir.join(metric.as_str()));
        }
        if let Some(p) = &cfg.debug_dump {
            c.debug_dump = Some(p.with_extension(format!("{}.jsonl", metric.as_str())));
        }
        let (model, report) = adapt(source, target, &c)?;
        let m = evaluate(&model, test, eval)?;
        rows.push(AblationRow {
            metric,
            dice: m.mean_dice,
            asd: m.mean_asd,
        });
        details.push((report, m));
    }
    Ok((
        AblationReport {
            domain: test.domain_name.clone(),
            seed: cfg.seed,
            rows,
        },
        details,
    ))
}
