//! Layers, the segmentation backbone, and its optimizer.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod layers;
mod model;
mod norm;
mod param;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, CheckpointMeta, SourceStats, FORMAT_VERSION};
pub use layers::{kaiming_gain, Conv2d, ConvBlock, LEAKY_SLOPE};
pub use model::{ForwardHooks, ModelConfig, SegModel};
pub use norm::{NormKind, NormLayer, BN_MOMENTUM, NORM_EPS};
pub use param::{select_trainable, Ctx, LayerStats, Mode, Module, Param, ParamGroup, RunningUpdate, TrainPolicy};
