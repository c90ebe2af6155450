//! The detector stack: a convolutional feature encoder, per-landmark feature
//! pooling, a row-wise detector-weight predictor, and a 1x1 detector head
//! decoded to pixel coordinates.

mod checkpoint;
mod config;
mod net;

pub use checkpoint::{
    load_matrix, load_paramset, matrix_bytes, paramset_bytes, paramset_from_bytes, save_matrix,
    save_paramset,
};
pub use config::ModelConfig;
pub use net::{
    detect, detector_heatmaps, encode, heatmap_loss, init_detector_rows, init_encoder,
    init_predictor, pool_landmark_features, predict_detectors,
};
