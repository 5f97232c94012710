//! Datasets, preprocessing, training, inference, file formats and the
//! four-variant ablation driver.

mod ablate;
mod modelfile;
mod preprocess;
mod series;
mod train;

pub use ablate::{
    run_ablation, write_report_csv, write_reports, AblationCell, AblationConfig, AblationResult, Checkpoint, SeedCell,
    REPORT_HEADER,
};
pub use modelfile::{
    decode_model, encode_model, load_detector, load_model, load_registration, save_detector, save_model,
    save_registration, SavedModel, MODEL_MAGIC, MODEL_VERSION,
};
pub use preprocess::{crop_or_pad, normalize, preprocess, stats, Normalization, Preprocessed};
pub use series::{phantom_series, read_manifest, read_raw, read_series, write_raw, write_series, Manifest, Series, SeriesStore, Split};
pub use train::{
    augment, lr_schedule, register, shift_image, train, AugmentConfig, EpochLog, TrainConfig, TrainOutcome,
};

/// Cosine annealing from `max` at step 0 to `min` at step `total − 1`.
pub fn cosine_lr(step: usize, total: usize, max: f64, min: f64) -> f64 {
    if total <= 1 {
        return max;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * t).cos())
}
