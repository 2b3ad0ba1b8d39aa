//! Synthetic fundus corpus, annotation records and consensus labelling,
//! preprocessing and augmentation.

mod annotation;
mod augment;
mod dataset;
mod preprocess;
mod synth;

pub use annotation::{
    append_annotation, check_finding, consensus, merge_annotations, read_annotations,
    write_annotations, Annotation, ConsensusLabel, ConsensusRule, Verdict, ANNOTATORS_PER_IMAGE,
    FINDINGS,
};
pub use augment::{augment, AugmentParams, AugmentPolicy, AugmentRanges};
pub use dataset::{
    load_dataset, read_manifest, write_cases, ConsensusCounts, Dataset, ManifestEntry, Sample,
    ANNOTATION_FILE, IMAGE_DIR, MANIFEST_FILE,
};
pub use preprocess::{
    foreground_box, preprocess, preprocess_tensor, resize_bilinear, rgb_to_tensor, tensor_to_rgb,
    CropBox, Preprocessed, BACKGROUND_LUMINANCE,
};
pub use synth::{
    case_seed, generate_case, generate_corpus, random_landmarks, AnnotatorModel, CaseSpec,
    CorpusSpec, SyntheticCase,
};
