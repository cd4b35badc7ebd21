//! Dataset preparation: image decoding and windowing, annotation loading,
//! conflict filtering and export of per-stage training records.

pub mod dicom;
pub mod pixels;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    self, build_prompt, CodecError, DiagnosisSet, GlobalLabel, GroundedReport, LocalLabel, PromptTemplate, Stage,
};
use crate::geometry::{self, BoundsMode, Finding, GeometryError, ImageDims, PixelBox};
use crate::jsonl::DataError;
use crate::metrics::GroundTruth;

pub use dicom::{encode_dicom, read_dicom_tags};
pub use pixels::{encode_png, load_sidecar, normalize_pixels, Gray8, Photometric, RawImage, Sidecar};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("not a DICOM file (missing DICM marker)")]
    NotDicom,
    #[error("unsupported transfer syntax {0}")]
    UnsupportedTransferSyntax(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("png encoding failed: {0}")]
    Png(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// One row of the annotation table. Local labels carry a box; global labels
/// (including "No finding") leave the coordinates empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub image_id: String,
    #[serde(alias = "rad_id")]
    pub annotator_id: String,
    pub class_name: String,
    #[serde(default)]
    pub x_min: Option<f64>,
    #[serde(default)]
    pub y_min: Option<f64>,
    #[serde(default)]
    pub x_max: Option<f64>,
    #[serde(default)]
    pub y_max: Option<f64>,
}

/// Reads annotations from `.csv` or JSON lines (any other extension).
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<(usize, AnnotationRow)>, IngestError> {
    let path = path.as_ref();
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        return Ok(crate::jsonl::read_jsonl(path)?);
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, 0, e))?;
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        // header is line 1
        let line = i + 2;
        rows.push((line, row.map_err(|e| csv_error(path, line, e))?));
    }
    Ok(rows)
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> IngestError {
    DataError::Record { path: path.to_path_buf(), line, message: e.to_string() }.into()
}

/// An image entry of the study index written by preprocessing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyImage {
    pub study_id: String,
    pub image: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelFinding {
    pub label: LocalLabel,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorLabels {
    pub annotator_id: String,
    pub findings: Vec<PixelFinding>,
    pub global: BTreeSet<GlobalLabel>,
}

impl AnnotatorLabels {
    pub fn marked_no_finding(&self) -> bool {
        self.global.contains(&GlobalLabel::NoFinding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub image: String,
    pub dims: ImageDims,
    /// At least one annotator, ordered by annotator id.
    pub annotators: Vec<AnnotatorLabels>,
}

/// Something recoverable that was skipped while assembling or exporting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestWarning {
    pub study_id: String,
    pub message: String,
}

impl IngestWarning {
    fn new(study_id: &str, message: impl Into<String>) -> Self {
        let w = Self { study_id: study_id.to_string(), message: message.into() };
        warn!("{}: {}", w.study_id, w.message);
        w
    }
}

/// Join the image index with annotation rows into per-study records.
///
/// Unknown class names are a data error. Boxes with missing coordinates or
/// zero area, studies without annotations and annotations without an image
/// are skipped with a warning.
pub fn assemble_studies(
    images: &[StudyImage],
    rows: &[(usize, AnnotationRow)],
) -> Result<(Vec<StudyRecord>, Vec<IngestWarning>), IngestError> {
    let mut warnings = Vec::new();
    let mut by_image: BTreeMap<&str, BTreeMap<&str, AnnotatorLabels>> = BTreeMap::new();
    for (line, row) in rows {
        let annotator = by_image
            .entry(row.image_id.as_str())
            .or_default()
            .entry(row.annotator_id.as_str())
            .or_insert_with(|| AnnotatorLabels {
                annotator_id: row.annotator_id.clone(),
                findings: Vec::new(),
                global: BTreeSet::new(),
            });
        if let Ok(label) = row.class_name.parse::<GlobalLabel>() {
            annotator.global.insert(label);
            continue;
        }
        let label: LocalLabel = row.class_name.parse().map_err(|e: CodecError| {
            IngestError::Data(DataError::Record { path: "annotations".into(), line: *line, message: e.to_string() })
        })?;
        let coords = [row.x_min, row.y_min, row.x_max, row.y_max];
        let Some(c) = coords.iter().copied().collect::<Option<Vec<f64>>>() else {
            warnings.push(IngestWarning::new(&row.image_id, format!("line {line}: {label} without a box")));
            continue;
        };
        match PixelBox::new(c[0], c[1], c[2], c[3]) {
            Ok(bbox) => annotator.findings.push(PixelFinding { label, bbox }),
            Err(e) => warnings.push(IngestWarning::new(&row.image_id, format!("line {line}: {e}"))),
        }
    }

    let mut records = Vec::new();
    let known: BTreeSet<&str> = images.iter().map(|i| i.study_id.as_str()).collect();
    for image in images {
        let Some(annotators) = by_image.remove(image.study_id.as_str()) else {
            warnings.push(IngestWarning::new(&image.study_id, "no annotations"));
            continue;
        };
        let dims = ImageDims::new(image.width, image.height)?;
        records.push(StudyRecord {
            study_id: image.study_id.clone(),
            image: image.image.clone(),
            dims,
            annotators: annotators.into_values().collect(),
        });
    }
    for id in by_image.keys().filter(|id| !known.contains(*id)) {
        warnings.push(IngestWarning::new(id, "annotations reference an unknown image"));
    }
    records.sort_by(|a, b| a.study_id.cmp(&b.study_id));
    Ok((records, warnings))
}

/// A study conflicts when one annotator says "No finding" while another
/// drew at least one finding.
pub fn has_conflict(record: &StudyRecord) -> bool {
    let says_none = record.annotators.iter().any(AnnotatorLabels::marked_no_finding);
    let draws = record.annotators.iter().any(|a| !a.findings.is_empty());
    says_none && draws
}

/// Split records into `(kept, removed)`, preserving order in both.
pub fn filter_conflicts(records: Vec<StudyRecord>) -> (Vec<StudyRecord>, Vec<StudyRecord>) {
    records.into_iter().partition(|r| !has_conflict(r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub image: String,
    pub stage: Stage,
    pub prompt: String,
    pub target: String,
}

#[derive(Debug, Clone)]
pub struct ExportOptions {
    pub template: PromptTemplate,
    pub bounds: BoundsMode,
    pub dedup_threshold: f64,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            template: PromptTemplate::default(),
            bounds: BoundsMode::Reject,
            dedup_threshold: geometry::DEFAULT_DEDUP_THRESHOLD,
        }
    }
}

/// Union of all annotators' boxes on the grid, sorted, then deduplicated.
pub fn merged_findings(record: &StudyRecord, opts: &ExportOptions) -> Result<Vec<Finding>, GeometryError> {
    let mut all = Vec::new();
    for a in &record.annotators {
        for f in &a.findings {
            let bbox = geometry::normalize_box(&f.bbox, record.dims, opts.bounds)?;
            all.push(Finding::new(f.label, bbox));
        }
    }
    all.sort_by_key(|f| (f.label, f.bbox.coords()));
    geometry::dedup_findings(&all, opts.dedup_threshold)
}

/// Stage-1 ground truth; `None` when the study has neither localized
/// findings nor a unanimous "No finding".
pub fn grounded_target(record: &StudyRecord, opts: &ExportOptions) -> Result<Option<GroundedReport>, GeometryError> {
    let findings = merged_findings(record, opts)?;
    if !findings.is_empty() {
        return Ok(Some(GroundedReport::new(findings)));
    }
    let unanimous = record.annotators.iter().all(AnnotatorLabels::marked_no_finding);
    Ok(unanimous.then(GroundedReport::no_finding))
}

/// Stage-2 ground truth: union over annotators. "No finding" is dropped when
/// any annotator named a disease.
pub fn diagnosis_target(record: &StudyRecord) -> Option<DiagnosisSet> {
    let mut union: BTreeSet<GlobalLabel> = record.annotators.iter().flat_map(|a| a.global.iter().copied()).collect();
    if union.len() > 1 {
        union.remove(&GlobalLabel::NoFinding);
    }
    DiagnosisSet::new(union).ok()
}

fn export_one(record: &StudyRecord, stage: Stage, opts: &ExportOptions) -> Result<StageRecord, String> {
    let target = match stage {
        Stage::Grounding => match grounded_target(record, opts) {
            Ok(Some(report)) => codec::serialize_findings(&report),
            Ok(None) => return Err("no localized findings and no unanimous \"No finding\"".into()),
            Err(e) => return Err(e.to_string()),
        },
        Stage::Diagnosis => match diagnosis_target(record) {
            Some(d) => codec::serialize_diagnoses(&d),
            None => return Err("no global labels".into()),
        },
    };
    Ok(StageRecord {
        image: record.image.clone(),
        stage,
        prompt: build_prompt(stage, &opts.template),
        target,
    })
}

#[derive(Debug, Clone, Default)]
pub struct ExportOutcome {
    pub records: Vec<StageRecord>,
    pub skipped: Vec<IngestWarning>,
}

/// Build training records for one stage, ordered by study id.
///
/// Runs on the current rayon pool; output order does not depend on the
/// number of threads.
pub fn export_stage_records(records: &[StudyRecord], stage: Stage, opts: &ExportOptions) -> ExportOutcome {
    let mut sorted: Vec<&StudyRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.study_id.cmp(&b.study_id));
    let results: Vec<_> = sorted.par_iter().map(|r| (r.study_id.as_str(), export_one(r, stage, opts))).collect();
    let mut out = ExportOutcome::default();
    for (id, res) in results {
        match res {
            Ok(rec) => out.records.push(rec),
            Err(msg) => out.skipped.push(IngestWarning::new(id, msg)),
        }
    }
    out
}

/// Evaluation ground truth for each exportable study, ordered by study id.
/// Studies whose boxes fall outside the image are skipped.
pub fn ground_truth_records(records: &[StudyRecord], opts: &ExportOptions) -> (Vec<GroundTruth>, Vec<IngestWarning>) {
    let mut sorted: Vec<&StudyRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.study_id.cmp(&b.study_id));
    let results: Vec<_> = sorted
        .par_iter()
        .map(|r| {
            merged_findings(r, opts).map(|findings| GroundTruth {
                id: r.study_id.clone(),
                findings,
                global: diagnosis_target(r).map(BTreeSet::from).unwrap_or_default(),
            })
        })
        .collect();
    let mut warnings = Vec::new();
    let mut gts = Vec::new();
    for (r, res) in sorted.iter().zip(results) {
        match res {
            Ok(gt) => gts.push(gt),
            Err(e) => warnings.push(IngestWarning::new(&r.study_id, e.to_string())),
        }
    }
    (gts, warnings)
}
