//! Accuracy at IoU thresholds with greedy one-to-one box matching.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::codec::LocalLabel;
use crate::geometry::{iou_or_zero, Finding, NormBox};

/// `(gt_index, pred_index, iou)` triples, best IoU first.
///
/// Ties are broken by GT index, then prediction index. Pairs with zero
/// overlap are never matched.
pub fn greedy_match(gt: &[NormBox], pred: &[NormBox]) -> Vec<(usize, usize, f64)> {
    let mut candidates = Vec::with_capacity(gt.len() * pred.len());
    for (g, gb) in gt.iter().enumerate() {
        for (p, pb) in pred.iter().enumerate() {
            let v = iou_or_zero(gb, pb);
            if v > 0.0 {
                candidates.push((g, p, v));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut out = Vec::new();
    for (g, p, v) in candidates {
        if !gt_used[g] && !pred_used[p] {
            gt_used[g] = true;
            pred_used[p] = true;
            out.push((g, p, v));
        }
    }
    out
}

/// One study's contribution: for each GT finding whose label the prediction
/// mentions, the IoU of its matched box (0 when left unmatched).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudyMatches {
    pub matched_ious: Vec<f64>,
}

impl StudyMatches {
    pub fn eligible(&self) -> usize {
        self.matched_ious.len()
    }

    pub fn correct_at(&self, threshold: f64) -> usize {
        self.matched_ious.iter().filter(|&&v| v > threshold).count()
    }
}

pub fn study_matches(gt: &[Finding], pred: &[Finding]) -> StudyMatches {
    let labels: BTreeSet<LocalLabel> = gt.iter().map(|f| f.label).collect();
    let mut matched_ious = Vec::new();
    for label in labels {
        let boxes = |fs: &[Finding]| -> Vec<NormBox> { fs.iter().filter(|f| f.label == label).map(|f| f.bbox).collect() };
        let (g, p) = (boxes(gt), boxes(pred));
        if p.is_empty() {
            continue;
        }
        let mut per_gt = vec![0.0; g.len()];
        for (gi, _, v) in greedy_match(&g, &p) {
            per_gt[gi] = v;
        }
        matched_ious.extend(per_gt);
    }
    StudyMatches { matched_ious }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub threshold: f64,
    pub correct: usize,
    pub eligible: usize,
    pub value: f64,
    /// No GT finding had its label predicted; `value` is 0 by convention.
    pub empty_denominator: bool,
}

pub fn validate_threshold(t: f64) -> Result<(), MetricsError> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(MetricsError::Domain(format!("IoU threshold {t} outside (0, 1)")))
    }
}

/// Pool per-study matches into one accuracy per threshold. Counts are
/// integers, so the result does not depend on summation order.
pub fn pool_accuracy(studies: &[StudyMatches], thresholds: &[f64]) -> Result<Vec<Accuracy>, MetricsError> {
    if studies.is_empty() {
        return Err(MetricsError::Domain("no studies to evaluate".into()));
    }
    thresholds.iter().try_for_each(|&t| validate_threshold(t))?;
    let eligible: usize = studies.iter().map(StudyMatches::eligible).sum();
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let correct: usize = studies.iter().map(|s| s.correct_at(threshold)).sum();
            let value = if eligible == 0 { 0.0 } else { correct as f64 / eligible as f64 };
            Accuracy { threshold, correct, eligible, value, empty_denominator: eligible == 0 }
        })
        .collect())
}

/// `pairs` are `(ground_truth, prediction)` finding lists per study.
pub fn accuracy_at_thresholds(
    pairs: &[(Vec<Finding>, Vec<Finding>)],
    thresholds: &[f64],
) -> Result<Vec<Accuracy>, MetricsError> {
    let studies: Vec<StudyMatches> = pairs.iter().map(|(g, p)| study_matches(g, p)).collect();
    pool_accuracy(&studies, thresholds)
}

pub fn accuracy_at_iou(pairs: &[(Vec<Finding>, Vec<Finding>)], threshold: f64) -> Result<Accuracy, MetricsError> {
    Ok(accuracy_at_thresholds(pairs, &[threshold])?[0])
}
