//! Training, evaluation, the four-variant comparison and overlay rendering.

mod compare;
mod eval;
mod overlay;
mod train;

pub use compare::{compare, median, CompareConfig, CompareRow, CompareTable, DetectorCost};
pub use eval::{check_compatible, evaluate, Metrics, Predictor, TrainedModel};
pub use overlay::{encode_ppm, overlay_rgb, predict_overlay, GLYPH_COLOR, GLYPH_ORIGIN};
pub use train::{
    default_log_path, format_log, train, train_on, EpochRecord, TrainConfig, TrainOutcome,
};
