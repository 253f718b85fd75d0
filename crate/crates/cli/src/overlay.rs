//! Segmentation overlays and Grad-CAM heatmap export.

use std::path::{Path, PathBuf};

use gradcl::data::{crop_roi, images_to_tensor};
use gradcl::metrics::{boundary_pixels, threshold_masks, EvalConfig};
use gradcl::nn::ops::resize_bilinear;
use gradcl::nn::SegModel;
use gradcl::saliency::{both_saliency, save_heatmap_png};
use gradcl::ClassId;
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{CliError, CliResult};

pub const CUP_COLOR: Rgb<u8> = Rgb([0, 0, 255]);
pub const DISC_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// The file itself, or the image files directly inside a directory, sorted.
pub fn list_images(input: &Path) -> CliResult<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(CliError::Data(format!("{}: no such file or directory", input.display())));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(input)? {
        let p = entry?.path();
        if p.is_file() && is_image(&p) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no images found", input.display())));
    }
    Ok(files)
}

/// `H×W×3` RGB in `[0, 1]`.
pub fn read_rgb(path: &Path) -> CliResult<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// The image with the disc contour in green and the cup contour in blue on top.
pub fn render_overlay(image: &Array3<f32>, masks: &[Array2<u8>; 2]) -> RgbImage {
    let (h, w, _) = image.dim();
    let mut out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    for (class, color) in [(ClassId::Disc, DISC_COLOR), (ClassId::Cup, CUP_COLOR)] {
        for (y, x) in boundary_pixels(masks[class.channel()].view()) {
            out.put_pixel(x as u32, y as u32, color);
        }
    }
    out
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

/// Writes `<id>_overlay.png`, `<id>_cup_heatmap.png` and `<id>_disc_heatmap.png`
/// for one image, centre-cropped to `roi_size`.
pub fn export_overlay(
    model: &SegModel,
    image_path: &Path,
    roi_size: usize,
    eval: &EvalConfig,
    out_dir: &Path,
) -> CliResult<Vec<PathBuf>> {
    let full = read_rgb(image_path)?;
    let image = crop_roi(&full, None, roi_size)?;
    let (h, w, _) = image.dim();
    let x = images_to_tensor(&[&image], model.device())?;
    let fwd = model.forward(&x, None)?;
    let masks = threshold_masks(&fwd.probs.get(0)?, eval)?;

    let id = stem(image_path);
    let overlay = out_dir.join(format!("{id}_overlay.png"));
    render_overlay(&image, &masks).save(&overlay)?;
    let mut written = vec![overlay];

    let maps = both_saliency(model, &fwd.features, (h, w))?;
    for (class, map) in ClassId::ALL.into_iter().zip(maps) {
        let up = resize_bilinear(&map.e_gc, h, w)?.get(0)?;
        let path = out_dir.join(format!("{id}_{}_heatmap.png", class.name()));
        save_heatmap_png(&up, &path)?;
        written.push(path);
    }
    Ok(written)
}
