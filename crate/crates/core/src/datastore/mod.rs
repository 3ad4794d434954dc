//! Cohort data model, on-disk formats, fold assignment and synthetic cohorts.

mod dgpf;
mod folds;
mod manifest;
mod synth;
mod types;

pub use dgpf::{
    decode_dgpf, dgpf_file_len, encode_dgpf, read_feature_file, write_feature_file, FeaturePayload,
    DGPF_MAGIC, DGPF_VERSION,
};
pub use folds::{assign_folds, fold_class_counts};
pub use manifest::{
    load_cohort, read_manifest_entries, read_probs_file, write_cohort, write_manifest_only,
    write_probs_file, CohortHeader, ManifestEntry, SurvivalJson, COHORT_HEADER_FILE,
};
pub use synth::{synth_cohort, synth_cohort_with_truth, SynthOutput, SynthSpec, SynthTruth};
pub use types::{
    Cohort, FoldSplit, Magnification, PatchEmbedding, SlideBag, SurvivalRecord, TaskKind,
};
