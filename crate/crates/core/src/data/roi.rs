use ndarray::{s, Array3};

use crate::{Error, Result};

/// A square crop window `[top, top+size) × [left, left+size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl RoiWindow {
    pub fn apply<T: Clone>(&self, array: &Array3<T>) -> Array3<T> {
        array
            .slice(s![self.top..self.top + self.size, self.left..self.left + self.size, ..])
            .to_owned()
    }
}

/// Window of side `size` centred on `center` (row, col), clamped to the image.
/// Without a centre the image centre is used.
pub fn roi_window(height: usize, width: usize, center: Option<(usize, usize)>, size: usize) -> Result<RoiWindow> {
    if size == 0 || size > height.min(width) {
        return Err(Error::invalid(format!(
            "ROI size {size} does not fit a {height}x{width} image"
        )));
    }
    let (cy, cx) = center.unwrap_or((height / 2, width / 2));
    let place = |c: usize, extent: usize| c.saturating_sub(size / 2).min(extent - size);
    Ok(RoiWindow {
        top: place(cy, height),
        left: place(cx, width),
        size,
    })
}

pub fn crop_roi(image: &Array3<f32>, center: Option<(usize, usize)>, size: usize) -> Result<Array3<f32>> {
    let (h, w, _) = image.dim();
    Ok(roi_window(h, w, center, size)?.apply(image))
}
