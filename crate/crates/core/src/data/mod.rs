//! Fundus datasets: in-memory samples, ROI cropping, synthetic domains, weak
//! augmentation and on-disk loading.

mod augment;
mod loader;
mod roi;
mod sample;
mod synthetic;

pub use augment::{weak_augment, weak_augment_traced, AugmentConfig, AugmentTrace, EraseRect};
pub use loader::{load_dataset, write_synthetic_dir, DatasetLayout, LoadOptions, MaskRequirement};
pub use roi::{crop_roi, roi_window, RoiWindow};
pub use sample::{
    images_to_tensor, masks_to_tensor, DatasetSplit, FundusSample, SplitKind, UnlabeledImage,
    UnlabeledSplit,
};
pub use synthetic::{generate_synthetic_domain, SyntheticDomainSpec};
