//! Evaluation of model responses against ground truth.
//!
//! [`evaluate`] joins ground truth and predictions on study id and runs one of
//! three tasks: box localization (`loc`), diagnosis classification (`cls`),
//! or text similarity (`text`). Per-study work runs in parallel; every
//! reduction happens afterwards in ground-truth order, so reports are
//! byte-identical for any thread count.

pub mod classification;
pub mod localization;
pub mod text;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::codec::{
    parse_diagnoses, parse_grounded_report, serialize_diagnoses, serialize_findings, strip_localization, DiagnosisSet,
    GlobalLabel, GroundedReport, LocalLabel, ParseWarning, Stage,
};
use crate::geometry::Finding;
use crate::jsonl::{read_jsonl, DataError};

pub use classification::{classification_report, ClassLabel, ClassReport, Scores};
pub use localization::{accuracy_at_iou, accuracy_at_thresholds, greedy_match, Accuracy};
pub use text::{bleu, cider, meteor, rouge, text_scores, tokenize, TextScores};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.4, 0.5];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Domain(String),
    #[error("duplicate study id {id:?} in {source_name}")]
    DuplicateId { source_name: &'static str, id: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One ground-truth line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: String,
    #[serde(default)]
    pub findings: Vec<Finding>,
    #[serde(default)]
    pub global: BTreeSet<GlobalLabel>,
}

/// One raw model response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Loc,
    Cls,
    Text,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Loc => "loc",
            Task::Cls => "cls",
            Task::Text => "text",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loc" => Ok(Task::Loc),
            "cls" => Ok(Task::Cls),
            "text" => Ok(Task::Text),
            other => Err(format!("unknown task {other:?} (expected loc, cls or text)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub task: Task,
    thresholds: Vec<f64>,
    /// Which ground-truth sentence the text task compares against.
    pub text_reference: Stage,
}

impl EvalConfig {
    pub fn new(task: Task) -> Self {
        Self { task, thresholds: DEFAULT_THRESHOLDS.to_vec(), text_reference: Stage::Grounding }
    }

    /// Thresholds are sorted and deduplicated; each must lie in (0, 1).
    pub fn with_thresholds(mut self, mut thresholds: Vec<f64>) -> Result<Self, MetricsError> {
        if thresholds.is_empty() {
            return Err(MetricsError::Domain("at least one threshold is required".into()));
        }
        thresholds.iter().try_for_each(|&t| localization::validate_threshold(t))?;
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        self.thresholds = thresholds;
        Ok(self)
    }

    pub fn with_text_reference(mut self, stage: Stage) -> Self {
        self.text_reference = stage;
        self
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub studies: usize,
    pub conventions: Vec<String>,
    pub metrics: Map<String, Value>,
    pub per_class: Map<String, Value>,
    /// Counts per warning kind.
    pub warnings: BTreeMap<String, usize>,
}

const CONVENTIONS_LOC: &[&str] = &[
    "greedy one-to-one matching by descending IoU within each (study, label)",
    "a match counts when IoU > threshold (strict)",
    "denominator: ground-truth findings whose label appears in the prediction",
    "zero denominator reports 0 and sets empty_denominator",
];
const CONVENTIONS_CLS: &[&str] = &[
    "per-class counts from set membership per study",
    "zero division yields 0; macro average includes unsupported classes",
];
const CONVENTIONS_TEXT: &[&str] = &[
    "texts stripped of box groups and label tags before scoring",
    "tokens: lowercase, punctuation split off, whitespace split",
    "BLEU is corpus-level; ROUGE, METEOR and CIDEr-D are means over pairs",
    "METEOR uses exact and suffix-stem matches only",
];

fn index_ids<'a>(ids: impl Iterator<Item = &'a str>, source_name: &'static str) -> Result<HashMap<&'a str, usize>, MetricsError> {
    let mut seen = HashMap::new();
    for (i, id) in ids.enumerate() {
        if seen.insert(id, i).is_some() {
            return Err(MetricsError::DuplicateId { source_name, id: id.to_string() });
        }
    }
    Ok(seen)
}

fn tally(warnings: &mut BTreeMap<String, usize>, key: &str, n: usize) {
    if n > 0 {
        *warnings.entry(key.to_string()).or_default() += n;
    }
}

fn tally_parse(warnings: &mut BTreeMap<String, usize>, parsed: &[ParseWarning]) {
    for w in parsed {
        tally(warnings, w.kind.as_str(), 1);
    }
}

fn scores_value(s: &Scores) -> Value {
    json!({ "precision": s.precision, "recall": s.recall, "f1": s.f1, "support": s.support })
}

fn report_rows(report: &ClassReport) -> Map<String, Value> {
    report.rows.iter().map(|r| (r.name.clone(), scores_value(&r.scores))).collect()
}

/// Evaluate in-memory records. Ground-truth order fixes the output order.
pub fn evaluate(gts: &[GroundTruth], preds: &[Prediction], config: &EvalConfig) -> Result<EvalReport, MetricsError> {
    if gts.is_empty() {
        return Err(MetricsError::Domain("ground truth is empty".into()));
    }
    let gt_ids = index_ids(gts.iter().map(|g| g.id.as_str()), "ground truth")?;
    let pred_ids = index_ids(preds.iter().map(|p| p.id.as_str()), "predictions")?;

    let mut warnings = BTreeMap::new();
    let unknown = preds.iter().filter(|p| !gt_ids.contains_key(p.id.as_str())).count();
    tally(&mut warnings, "unknown_prediction_id", unknown);
    for p in preds.iter().filter(|p| !gt_ids.contains_key(p.id.as_str())) {
        log::debug!("prediction {:?} has no ground truth", p.id);
    }
    let responses: Vec<Option<&str>> =
        gts.iter().map(|g| pred_ids.get(g.id.as_str()).map(|&i| preds[i].text.as_str())).collect();
    let missing = responses.iter().filter(|r| r.is_none()).count();
    tally(&mut warnings, "missing_prediction", missing);

    let (metrics, per_class, conventions) = match config.task {
        Task::Loc => evaluate_loc(gts, &responses, config, &mut warnings)?,
        Task::Cls => evaluate_cls(gts, &responses, &mut warnings),
        Task::Text => evaluate_text(gts, &responses, config, &mut warnings),
    };
    Ok(EvalReport {
        task: config.task,
        studies: gts.len(),
        conventions: conventions.iter().map(|s| s.to_string()).collect(),
        metrics,
        per_class,
        warnings,
    })
}

type TaskOutput = (Map<String, Value>, Map<String, Value>, &'static [&'static str]);

fn evaluate_loc(
    gts: &[GroundTruth],
    responses: &[Option<&str>],
    config: &EvalConfig,
    warnings: &mut BTreeMap<String, usize>,
) -> Result<TaskOutput, MetricsError> {
    let per_study: Vec<_> = gts
        .par_iter()
        .zip(responses.par_iter())
        .map(|(gt, resp)| {
            let parsed = resp.map(parse_grounded_report);
            let empty = GroundedReport::default();
            let pred = parsed.as_ref().map_or(&empty, |p| &p.value);
            let matches = localization::study_matches(&gt.findings, &pred.findings);
            let truth: BTreeSet<LocalLabel> = gt.findings.iter().map(|f| f.label).collect();
            (matches, (truth, pred.labels()), parsed.map(|p| p.warnings).unwrap_or_default())
        })
        .collect();
    let mut studies = Vec::with_capacity(per_study.len());
    let mut label_pairs = Vec::with_capacity(per_study.len());
    for (m, sets, w) in per_study {
        tally_parse(warnings, &w);
        studies.push(m);
        label_pairs.push(sets);
    }
    let accuracies = localization::pool_accuracy(&studies, config.thresholds())?;
    let mut metrics = Map::new();
    for a in &accuracies {
        metrics.insert(format!("accuracy@{}", a.threshold), json!(a.value));
    }
    metrics.insert("eligible_findings".into(), json!(accuracies[0].eligible));
    metrics.insert("empty_denominator".into(), json!(accuracies[0].empty_denominator));
    metrics.insert("thresholds".into(), serde_json::to_value(&accuracies).expect("plain data"));
    let report = classification_report::<LocalLabel>(&label_pairs);
    Ok((metrics, report_rows(&report), CONVENTIONS_LOC))
}

fn evaluate_cls(gts: &[GroundTruth], responses: &[Option<&str>], warnings: &mut BTreeMap<String, usize>) -> TaskOutput {
    let per_study: Vec<_> = gts
        .par_iter()
        .zip(responses.par_iter())
        .map(|(gt, resp)| match resp {
            Some(text) => {
                let parsed = parse_diagnoses(text);
                ((gt.global.clone(), parsed.value), parsed.warnings)
            }
            None => ((gt.global.clone(), BTreeSet::new()), Vec::new()),
        })
        .collect();
    let mut pairs = Vec::with_capacity(per_study.len());
    for (p, w) in per_study {
        tally_parse(warnings, &w);
        pairs.push(p);
    }
    let report = classification_report::<GlobalLabel>(&pairs);
    let mut metrics = Map::new();
    for (name, s) in
        [("micro", report.micro()), ("macro", report.macro_avg()), ("weighted", report.weighted()), ("samples", report.samples())]
    {
        metrics.insert(format!("{name}_precision"), json!(s.precision));
        metrics.insert(format!("{name}_recall"), json!(s.recall));
        metrics.insert(format!("{name}_f1"), json!(s.f1));
    }
    (metrics, report_rows(&report), CONVENTIONS_CLS)
}

/// The ground-truth sentence for a study at the given stage.
pub fn reference_text(gt: &GroundTruth, stage: Stage) -> String {
    match stage {
        Stage::Grounding => serialize_findings(&GroundedReport::new(gt.findings.clone())),
        Stage::Diagnosis => DiagnosisSet::new(gt.global.iter().copied())
            .map(|d| serialize_diagnoses(&d))
            .unwrap_or_default(),
    }
}

fn evaluate_text(
    gts: &[GroundTruth],
    responses: &[Option<&str>],
    config: &EvalConfig,
    warnings: &mut BTreeMap<String, usize>,
) -> TaskOutput {
    let pairs: Vec<(String, String)> = gts
        .par_iter()
        .zip(responses.par_iter())
        .map(|(gt, resp)| {
            let cand = strip_localization(resp.unwrap_or(""), true);
            let reference = strip_localization(&reference_text(gt, config.text_reference), true);
            (cand, reference)
        })
        .collect();
    let scores = text_scores(&pairs);
    if scores.cider.degenerate_idf {
        log::warn!("CIDEr-D over fewer than two pairs: IDF weights are all zero");
        tally(warnings, "degenerate_idf", 1);
    }
    let mut metrics = Map::new();
    metrics.insert("rouge1".into(), json!(scores.rouge.rouge1));
    metrics.insert("rouge2".into(), json!(scores.rouge.rouge2));
    metrics.insert("rougeL".into(), json!(scores.rouge.rouge_l));
    metrics.insert("rougeLsum".into(), json!(scores.rouge.rouge_lsum));
    for (n, v) in scores.bleu.cumulative.iter().enumerate() {
        metrics.insert(format!("bleu{}", n + 1), json!(v));
    }
    metrics.insert("bleu_brevity_penalty".into(), json!(scores.bleu.brevity_penalty));
    metrics.insert("meteor".into(), json!(scores.meteor));
    metrics.insert("cider".into(), json!(scores.cider.score));
    (metrics, Map::new(), CONVENTIONS_TEXT)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>, MetricsError> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, g)| g).collect())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>, MetricsError> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, p)| p).collect())
}

/// File-level entry point: read both JSONL files and evaluate.
pub fn evaluate_run(gt_path: impl AsRef<Path>, pred_path: impl AsRef<Path>, config: &EvalConfig) -> Result<EvalReport, MetricsError> {
    let gts = read_ground_truth(gt_path)?;
    let preds = read_predictions(pred_path)?;
    evaluate(&gts, &preds, config)
}
