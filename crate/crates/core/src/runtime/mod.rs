//! Online tracking: search cropping, motion filtering and the reliability
//! gated update loop.

mod crop;
mod kalman;
mod tracker;

pub use crop::{crop_square, CropMapping};
pub use kalman::{kalman_predict, kalman_step, kalman_update, KalmanConfig, KalmanState, PSD_TOL};
pub use tracker::{
    crop_search, init, step, Assessment, FrameReport, Localization, SearchContext, TrackerConfig, TrackerModel,
    TrackerState, UncTrackModel, Variant, RECOVERY_SCALE,
};
