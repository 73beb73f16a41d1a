//! Evaluation: mask resampling to label resolution, confusion matrices,
//! precision/recall/F1, Cohen's κ, AUROC, AUPRC and report export.

mod evaluate;
mod scores;

pub use evaluate::{
    arousal_epoch_labels, evaluate, evaluate_pooled, hypnogram_tsv, pr_tsv,
    resample_prediction_masks, roc_tsv, stage_sample_agreement, write_text, ArousalSampleReport,
    EvalOptions, EvalReport, Pooled, Prediction, RecordScores, ResampledPrediction,
    StageClassReport, StageReport,
};
pub use scores::{
    auprc, auroc, binary_scores, class_scores, classification_scores, cohens_kappa,
    confusion_matrix, f1_score, pr_curve, roc_curve, BinaryScores, ClassScores,
    ClassificationScores, ConfusionMatrix,
};
