use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Device;
use chrono::Utc;
use gradcl::contrastive::SimilarityMetric;
use gradcl::data::{
    generate_synthetic_domain, load_dataset, write_synthetic_dir, DatasetSplit, LoadOptions, MaskRequirement, SplitKind,
};
use gradcl::metrics::evaluate;
use gradcl::nn::{train_source, SegModel};
use gradcl::trainer::{ablate, adapt, AdaptConfig};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::overlay::{export_overlay, list_images};
use crate::{AblateArgs, AdaptArgs, AdaptOverrides, Cli, Command, Common, EvalArgs, OverlayArgs, SynthArgs, TrainArgs};

pub const CONFIG_FILE: &str = "config.toml";

pub fn run(cli: Cli) -> CliResult<()> {
    let device = select_device(&cli.device)?;
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::TrainSource(a) => train(a, &device),
        Command::Adapt(a) => adapt_cmd(a, &device),
        Command::Evaluate(a) => evaluate_cmd(a, &device),
        Command::Ablate(a) => ablate_cmd(a, &device),
        Command::Overlay(a) => overlay_cmd(a, &device),
    }
}

fn select_device(name: &str) -> CliResult<Device> {
    match name.trim().to_ascii_lowercase().as_str() {
        "cpu" | "" => Ok(Device::Cpu),
        other => Err(CliError::Usage(format!("device '{other}' is not supported (only cpu)"))),
    }
}

fn base_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(l) = common.layout {
        cfg.data.layout = l;
    }
    if let Some(r) = common.roi_size {
        cfg.data.roi_size = r;
    }
    Ok(cfg)
}

fn apply_adapt_overrides(cfg: &mut AdaptConfig, o: &AdaptOverrides) {
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = o.$field { cfg.$field = v; })* };
    }
    set!(lambda, epochs, seed, gamma, eta, mc_passes, lr, batch_size);
    if o.refresh_pseudolabels {
        cfg.refresh_pseudolabels = true;
    }
    if o.no_augment {
        cfg.augment = false;
    }
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn load_split(cfg: &RunConfig, dir: &Path, split: SplitKind, masks: MaskRequirement) -> CliResult<DatasetSplit> {
    let split = load_dataset(dir, cfg.data.layout, split, LoadOptions::new(cfg.data.roi_size, masks))?;
    if split.is_empty() {
        return Err(CliError::Data(format!("{}: no images", dir.display())));
    }
    Ok(split)
}

fn load_model(path: &Path, device: &Device) -> CliResult<SegModel> {
    Ok(SegModel::load_checkpoint(path, device)?)
}

fn synth_data(a: SynthArgs) -> CliResult<()> {
    let started = Utc::now();
    let mut cfg = base_config(&a.common)?;
    let s = &mut cfg.synth;
    if let Some(v) = a.name {
        s.name = v;
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { s.$field = v; })* };
    }
    set!(split, seed, n_samples, image_size, intensity_shift, contrast_scale, blur_sigma, noise_sigma);
    s.validate()?;

    if a.out.is_dir() && std::fs::read_dir(&a.out)?.next().is_some() {
        if !a.force {
            return Err(CliError::Data(format!(
                "{} is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
        for sub in ["images", "masks"] {
            let p = a.out.join(sub);
            if p.is_dir() {
                std::fs::remove_dir_all(&p)?;
            }
        }
    }
    prepare_out(&a.out)?;

    let split = generate_synthetic_domain(&cfg.synth)?;
    let written = write_synthetic_dir(&split, &a.out)?;
    cfg.save(&a.out.join(CONFIG_FILE))?;
    let mut m = RunManifest::new("synth-data", &cfg, cfg.synth.seed, "cpu", started);
    m.outputs = written;
    m.outputs.push(a.out.join(CONFIG_FILE));
    m.finish(&a.out)?;
    log::info!("wrote {} samples to {}", split.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, device: &Device) -> CliResult<()> {
    let started = Utc::now();
    let mut cfg = base_config(&a.common)?;
    if let Some(v) = a.architecture {
        cfg.model.architecture = v;
    }
    if let Some(v) = a.base_channels {
        cfg.model.base_channels = v;
    }
    let s = &mut cfg.source;
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { s.$field = v; })* };
    }
    set!(epochs, batch_size, lr, seed);
    if a.no_augment {
        s.augment = false;
    }
    cfg.model.validate()?;

    let split = load_split(&cfg, &a.data, SplitKind::Train, MaskRequirement::Required)?;
    prepare_out(&a.out)?;
    let mut model = SegModel::new(cfg.model.clone(), cfg.source.seed, device)?;
    let report = train_source(&mut model, &split, &cfg.source)?;

    let ckpt = a.out.join("source.ckpt");
    model.save_checkpoint(&ckpt)?;
    let curve = a.out.join("loss_curve.jsonl");
    let mut w = BufWriter::new(File::create(&curve)?);
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        writeln!(w, "{}", json!({"epoch": i + 1, "bce": loss}))?;
    }
    w.flush()?;
    let report_path = a.out.join("train_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    cfg.save(&a.out.join(CONFIG_FILE))?;

    let mut m = RunManifest::new("train-source", &cfg, cfg.source.seed, "cpu", started);
    m.add_input(&a.data)?;
    m.outputs = vec![ckpt, curve, report_path, a.out.join(CONFIG_FILE)];
    m.finish(&a.out)?;
    log::info!(
        "source BCE {:.4} -> {:.4} over {} epochs",
        report.initial_bce,
        report.final_bce,
        report.epoch_losses.len()
    );
    Ok(())
}

fn adapt_cmd(a: AdaptArgs, device: &Device) -> CliResult<()> {
    let started = Utc::now();
    let mut cfg = base_config(&a.common)?;
    apply_adapt_overrides(&mut cfg.adapt, &a.adapt);
    if let Some(m) = a.metric {
        cfg.adapt.contrastive.metric = m;
    }
    cfg.adapt.debug_dump = a.debug_dump.clone();
    cfg.adapt.checkpoint_dir = Some(a.out.join("checkpoints"));
    cfg.adapt.validate()?;

    let source = load_model(&a.source, device)?;
    let target = load_split(&cfg, &a.target, SplitKind::Train, MaskRequirement::Ignore)?.strip_labels();
    prepare_out(&a.out)?;
    let (model, report) = adapt(&source, &target, &cfg.adapt)?;

    let ckpt = a.out.join("adapted.ckpt");
    model.save_checkpoint(&ckpt)?;
    let epochs = a.out.join("epochs.jsonl");
    report.write_epoch_records(&epochs)?;
    let report_path = a.out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    cfg.save(&a.out.join(CONFIG_FILE))?;

    let mut m = RunManifest::new("adapt", &cfg, cfg.adapt.seed, "cpu", started);
    m.add_input(&a.source)?;
    m.add_input(&a.target)?;
    m.outputs = vec![ckpt, epochs, report_path, a.out.join(CONFIG_FILE)];
    m.outputs.extend(report.last_checkpoint.iter().cloned());
    m.outputs.extend(report.best_checkpoint.iter().cloned());
    m.outputs.extend(cfg.adapt.debug_dump.iter().cloned());
    m.finish(&a.out)?;
    log::info!("adapted {} images for {} epochs", report.n_images, report.epochs.len());
    Ok(())
}

fn evaluate_cmd(a: EvalArgs, device: &Device) -> CliResult<()> {
    let started = Utc::now();
    let mut cfg = base_config(&a.common)?;
    if let Some(t) = a.threshold {
        cfg.eval.threshold = t;
    }
    if a.no_postprocess {
        cfg.eval.postprocess = false;
    }
    if !(0.0..=1.0).contains(&cfg.eval.threshold) {
        return Err(CliError::Usage(format!("threshold {} outside [0, 1]", cfg.eval.threshold)));
    }
    let model = load_model(&a.checkpoint, device)?;
    let split = load_split(&cfg, &a.data, a.split, MaskRequirement::Required)?;
    prepare_out(&a.out)?;
    let report = evaluate(&model, &split, &cfg.eval)?;

    let json_path = a.out.join("metrics.json");
    std::fs::write(&json_path, report.to_json()?)?;
    let text = report.to_text();
    let txt_path = a.out.join("metrics.txt");
    std::fs::write(&txt_path, &text)?;
    cfg.save(&a.out.join(CONFIG_FILE))?;
    print!("{text}");

    let mut m = RunManifest::new("evaluate", &cfg, 0, "cpu", started);
    m.add_input(&a.checkpoint)?;
    m.add_input(&a.data)?;
    m.outputs = vec![json_path, txt_path, a.out.join(CONFIG_FILE)];
    m.finish(&a.out)?;
    Ok(())
}

fn ablate_cmd(a: AblateArgs, device: &Device) -> CliResult<()> {
    let started = Utc::now();
    let mut cfg = base_config(&a.common)?;
    apply_adapt_overrides(&mut cfg.adapt, &a.adapt);
    cfg.adapt.checkpoint_dir = None;
    cfg.adapt.validate()?;
    let metrics: Vec<SimilarityMetric> = if a.metrics.is_empty() {
        SimilarityMetric::ALL.to_vec()
    } else {
        a.metrics.clone()
    };

    let source = load_model(&a.source, device)?;
    let target = load_split(&cfg, &a.target, SplitKind::Train, MaskRequirement::Ignore)?.strip_labels();
    let test = load_split(&cfg, &a.test, SplitKind::Test, MaskRequirement::Required)?;
    prepare_out(&a.out)?;
    let (report, details) = ablate(&source, &target, &test, &cfg.adapt, &metrics, &cfg.eval)?;

    let json_path = a.out.join("ablation.json");
    std::fs::write(&json_path, report.to_json()?)?;
    let text = report.to_text();
    let txt_path = a.out.join("ablation.txt");
    std::fs::write(&txt_path, &text)?;
    let mut outputs: Vec<PathBuf> = vec![json_path, txt_path];
    for ((adapt_report, _), metric) in details.iter().zip(&metrics) {
        let p = a.out.join(format!("epochs_{}.jsonl", metric.as_str()));
        adapt_report.write_epoch_records(&p)?;
        outputs.push(p);
    }
    cfg.save(&a.out.join(CONFIG_FILE))?;
    outputs.push(a.out.join(CONFIG_FILE));
    print!("{text}");

    let mut m = RunManifest::new("ablate", &cfg, cfg.adapt.seed, "cpu", started);
    m.add_input(&a.source)?;
    m.add_input(&a.target)?;
    m.add_input(&a.test)?;
    m.outputs = outputs;
    m.finish(&a.out)?;
    Ok(())
}

fn overlay_cmd(a: OverlayArgs, device: &Device) -> CliResult<()> {
    let started = Utc::now();
    let mut cfg = base_config(&a.common)?;
    if let Some(t) = a.threshold {
        cfg.eval.threshold = t;
    }
    let model = load_model(&a.checkpoint, device)?;
    let images = list_images(&a.input)?;
    prepare_out(&a.out)?;
    let mut outputs = Vec::new();
    for path in &images {
        outputs.extend(export_overlay(&model, path, cfg.data.roi_size, &cfg.eval, &a.out)?);
    }
    cfg.save(&a.out.join(CONFIG_FILE))?;
    outputs.push(a.out.join(CONFIG_FILE));

    let mut m = RunManifest::new("overlay", &cfg, 0, "cpu", started);
    m.add_input(&a.checkpoint)?;
    m.add_input(&a.input)?;
    m.outputs = outputs;
    m.finish(&a.out)?;
    log::info!("wrote overlays for {} images to {}", images.len(), a.out.display());
    Ok(())
}
