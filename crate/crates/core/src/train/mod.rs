//! Training loop, evaluation, guided/unguided comparison and activation
//! rendering.

mod config;
mod eval;
mod trainer;

pub use config::TrainConfig;
pub use eval::{
    activation_heat, compare_guided_unguided, evaluate, heat_color, render_activation,
    score_dataset, CompareOutcome, CompareReport, BLUR_KERNEL, BLUR_SIGMA, OVERLAY_OPACITY,
};
pub use trainer::{
    assemble_batch, build_objective, cue_masks, dataset_loss, guidance_mask, train, train_from,
    Batch, EpochRecord, LossParts, Objective, TrainHistory, TrainOutcome, Trainer,
};
