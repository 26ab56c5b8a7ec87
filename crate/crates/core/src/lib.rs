//! Neural heat fields: single-hidden-layer sinusoidal fields whose
//! components decay as `exp(-|ν|² κ t)`, so that evaluating at time `t` is
//! Gaussian low-pass filtering of the `t = 0` signal at no extra cost.

pub mod bank;
pub mod error;
pub mod field;
pub mod fit;
pub mod format;
pub mod image_io;
pub mod oracle;
pub mod sampling;

pub use bank::{attenuation, cutoff_frequency, init_wave_bank, kappa_for, BankConfig, KappaMode};
pub use error::{Error, Result};
pub use field::{thermal_activation, EvalPoint, FieldParams, FieldView, HeatField, ParamGrads, Trainable, WaveBank};
pub use fit::{
    adam_step, cosine_lr, fit_global_field, fit_local_grid, global_kappa, global_objective, init_global_field,
    init_local_grid, mae_loss, refine_global_field, refine_local_grid, tv_loss, FitConfig, FitRecord, FitReport,
    FitState, LocalTarget, Objective, ParamLayout,
};
pub use format::{load_field, load_grid, save_field, save_grid, FieldFile, FieldFlags, GridFile};
pub use image_io::ImageBuffer;
pub use sampling::{
    gradient_map, pixel_grid, rasterize, rasterize_local_grid, scale_to_time, Domain, GradientMode,
    LocalFieldGrid, SamplingSpec,
};
