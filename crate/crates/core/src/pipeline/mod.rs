//! Model assembly, two-phase training, window cropping and sequence inference.

mod crop;
mod model;
mod track;
mod train;

pub use crop::{crop_image, crop_regions, image_to_tensor, CropGeom, CropParams};
pub use model::{
    count_params, AdapterConfig, AdapterLayer, ModelConfig, ParamCounts, PatrackModel, StreamTrace, TrainMode,
};
pub use track::{track_all, track_sequence, FrameContext, ModelPredictor, OraclePredictor, Predictor, StreamMode};
pub use train::{make_sample, pretrain_rgb, train, train_step, EpochStats, Sample, TrainConfig};
