//! Record files, preprocessing, label resampling, dataset splits and the
//! synthetic generator.

mod preprocess;
mod record;
mod split;
mod synth;

pub use preprocess::{
    dataset_input_len, downsample_arousal_labels, downsample_record_by2, downsample_signal_by2,
    pad_signal_pow2, prepare_record, standardize, upsample_stage_labels, ArousalRule,
    PrepareOptions, PreparedExample,
};
pub use record::{
    decode_record, encode_record, epochs_for, read_record, write_record, Record, EPOCH_SECONDS,
    RECORD_FORMAT_VERSION, RECORD_MAGIC, STAGE_NAMES, UNSCORED,
};
pub use split::{split_dataset, split_sizes, Split};
pub use synth::{
    arousal_rule_violations, generate_synthetic_record, record_rng, synth_dataset, Band,
    SynthConfig,
};
