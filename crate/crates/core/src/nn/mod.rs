//! Segmentation backbones, checkpoints and source-model training.

mod deeplab;
mod layers;
mod model;
pub mod ops;
mod tinyunet;

pub use deeplab::DeepLabV3Plus;
pub use layers::ParamStore;
pub use model::{
    bce_with_logits, train_source, ArchitectureId, ForwardResult, ModelConfig, ModelRng, SegModel, SourceTrainConfig,
    SourceTrainReport, CHECKPOINT_KIND,
};
pub use tinyunet::{TinyUnet, TinyUnetConfig};
