//! Desk-scale blood-smear classification pipeline.
//!
//! The crate is organised bottom-up:
//!
//! * [`image_core`] holds raster types, HSV conversion, masking and resizing.
//! * [`segmentation`] implements hue-band and Otsu segmentation for whole
//!   cells and nuclei.
//! * [`dataset`] scans class-per-directory corpora, performs the stratified
//!   train/val/test split and generates synthetic smear fixtures.
//! * [`metrics`] accumulates confusion matrices and derives accuracy,
//!   sensitivity, specificity, precision and F1.
//! * [`attention`] is an instrumented full/area attention kernel with exact
//!   multiply-accumulate accounting.
//! * [`trainer`] is a multinomial linear classifier trained by mini-batch SGD.
//! * [`pipeline`] wires the pieces into the workflows exposed by the CLI.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.
//! Results are identical either way.

pub mod attention;
pub mod dataset;
pub mod image_core;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod segmentation;
pub mod trainer;

pub use attention::{AttentionConfig, Axis, FeatureMap, FlopCount};
pub use dataset::{ClassLabel, SampleRecord, Split, SplitManifest};
pub use image_core::{BinaryMask, GrayImage, HsvPixel, RgbImage};
pub use metrics::{BinaryCounts, ConfusionMatrix, MetricsReport};
pub use segmentation::{HueBand, Polarity, SegMethod, SegTarget, SegTechnique, SegmentParams};
pub use trainer::{LossCurve, ModelParams, TrainConfig};
