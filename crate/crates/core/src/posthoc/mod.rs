//! Post hoc statistics and confidence scores.

pub mod gamma;
mod scores;
mod stats;

pub use scores::{
    chi2_confidence, classifier_logits, mc_dropout_mi, score_batch, softmax_score, ScoreKind, ScoreRecord, DEFAULT_MC_SAMPLES,
};
pub use stats::{cosine_score, fit_class_stats, mahalanobis, ClassConditionalStats, ClassStats, Shrinkage};
