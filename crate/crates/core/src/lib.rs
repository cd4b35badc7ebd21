//! Tooling for grounded chest X-ray report generation.
//!
//! - [`geometry`]: boxes, IoU, grid normalization and duplicate merging.
//! - [`codec`]: the grounded sentence format, its tolerant parser and prompts.
//! - [`ingest`]: DICOM/raw pixel windowing, annotation merging and
//!   training-record export.
//! - [`fusion`]: reference math for the dual-encoder token fusion and
//!   projection, with a finite-difference gradient check.
//! - [`metrics`]: localization accuracy, classification reports and text
//!   metrics.
//! - [`cli`]: the `groundcxr` command line.
//!
//! The `examples/` directory has one runnable program per capability.

pub mod cli;
pub mod codec;
pub mod fusion;
pub mod geometry;
pub mod ingest;
pub mod jsonl;
pub mod metrics;

pub use codec::{
    parse_diagnoses, parse_grounded_report, serialize_diagnoses, serialize_findings, strip_localization, DiagnosisSet,
    GlobalLabel, GroundedReport, LocalLabel, Stage,
};
pub use geometry::{dedup_findings, iou, normalize_box, Finding, ImageDims, NormBox, PixelBox};
