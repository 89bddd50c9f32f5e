//! Room-type classification for real-estate listing photos.
//!
//! The pipeline: load a labeled manifest, balance classes by under-sampling,
//! split 9:1 into train and validation, train a convolutional classifier in
//! two stages (frozen backbone, then end to end), evaluate per-class
//! precision/recall/F1, and export a versioned bundle used for prediction.

pub mod bundle;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod infer;
pub mod label;
pub mod model;
pub mod synthetic;
pub mod train;

pub use candle_core;

pub use bundle::{export_bundle, load_bundle, ModelBundle, BUNDLE_VERSION};
pub use dataset::{
    load_manifest, map_raw_tag, split, undersample, write_manifest, ClassCounts, DatasetManifest, ImageRecord,
    SplitSpec, TagMap,
};
pub use error::{Error, Result};
pub use eval::{confusion, evaluate, per_class_metrics, ClassMetrics, ConfusionMatrix, EvalReport, OnUnreadable};
pub use infer::{preprocess, top_label, PredictionScores, PreprocessConfig};
pub use label::{ClassLabel, NUM_CLASSES};
pub use model::{build_classifier, ArchitectureConfig, BackboneKind, ModelHandle, Partition, Stage};
pub use train::{
    categorical_cross_entropy, rmsprop_step, run_two_stage, train_stage, ExampleSet, TrainReport, TrainingConfig,
};
