//! Training objectives (classification, guidance, total) and the
//! evaluation metrics used to compare guided and unguided models.

mod loss;
mod metrics;

pub use loss::{classification_loss, guidance_loss, total_loss, PROB_CLAMP};
pub use metrics::{
    air, air_by_subset, auroc, operating_point, roc_curve, Counts, EvalSample, MetricsReport,
    OperatingPoint,
};
