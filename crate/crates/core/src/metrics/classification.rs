//! Multilabel precision/recall/F1 report with sklearn-style averages.
//!
//! Zero divisions evaluate to 0, so a class that is never predicted has
//! precision 0 and an empty sample contributes 0 to the samples average.

use std::collections::BTreeSet;
use std::fmt::{self, Display, Write as _};

use serde::{Deserialize, Serialize};

use crate::codec::{GlobalLabel, LocalLabel};

/// A closed label vocabulary with a fixed report order.
pub trait ClassLabel: Copy + Ord + Display + Send + Sync + 'static {
    fn classes() -> &'static [Self];
}

impl ClassLabel for LocalLabel {
    fn classes() -> &'static [Self] {
        LocalLabel::ALL
    }
}

impl ClassLabel for GlobalLabel {
    fn classes() -> &'static [Self] {
        GlobalLabel::ALL
    }
}

pub const AVERAGE_ROWS: [&str; 4] = ["micro avg", "macro avg", "weighted avg", "samples avg"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    fn scores(self) -> Scores {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Scores { precision, recall, f1: harmonic(precision, recall), support: self.tp + self.fn_ }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    #[serde(flatten)]
    pub scores: Scores,
}

/// Class rows in vocabulary order, then the four average rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub rows: Vec<ReportRow>,
    pub confusion: Vec<Confusion>,
}

impl ClassReport {
    pub fn row(&self, name: &str) -> Option<&Scores> {
        self.rows.iter().find(|r| r.name == name).map(|r| &r.scores)
    }

    fn average(&self, k: usize) -> &Scores {
        &self.rows[self.rows.len() - AVERAGE_ROWS.len() + k].scores
    }
    pub fn micro(&self) -> &Scores {
        self.average(0)
    }
    pub fn macro_avg(&self) -> &Scores {
        self.average(1)
    }
    pub fn weighted(&self) -> &Scores {
        self.average(2)
    }
    pub fn samples(&self) -> &Scores {
        self.average(3)
    }

    /// Plain-text table in the usual precision/recall/f1/support layout.
    pub fn render_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(12);
        let mut out = format!("{:>width$} {:>9} {:>9} {:>9} {:>9}\n\n", "", "precision", "recall", "f1-score", "support");
        let n_classes = self.rows.len() - AVERAGE_ROWS.len();
        for (i, r) in self.rows.iter().enumerate() {
            if i == n_classes {
                out.push('\n');
            }
            let s = &r.scores;
            let _ = writeln!(
                out,
                "{:>width$} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                r.name, s.precision, s.recall, s.f1, s.support
            );
        }
        out
    }
}

impl fmt::Display for ClassReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_table())
    }
}

/// `pairs` are `(truth, predicted)` label sets per sample.
pub fn classification_report<L: ClassLabel>(pairs: &[(BTreeSet<L>, BTreeSet<L>)]) -> ClassReport {
    let classes = L::classes();
    let mut confusion = vec![Confusion::default(); classes.len()];
    let mut sample_sums = [0.0f64; 3];
    for (truth, pred) in pairs {
        for (c, label) in classes.iter().enumerate() {
            match (truth.contains(label), pred.contains(label)) {
                (true, true) => confusion[c].tp += 1,
                (false, true) => confusion[c].fp += 1,
                (true, false) => confusion[c].fn_ += 1,
                (false, false) => {}
            }
        }
        let hits = truth.intersection(pred).count();
        let p = ratio(hits, pred.len());
        let r = ratio(hits, truth.len());
        sample_sums[0] += p;
        sample_sums[1] += r;
        sample_sums[2] += harmonic(p, r);
    }

    let per_class: Vec<Scores> = confusion.iter().map(|c| c.scores()).collect();
    let total_support: usize = per_class.iter().map(|s| s.support).sum();
    let pooled = confusion.iter().fold(Confusion::default(), |a, c| Confusion {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let micro = pooled.scores();

    let k = per_class.len() as f64;
    let macro_avg = Scores {
        precision: per_class.iter().map(|s| s.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|s| s.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|s| s.f1).sum::<f64>() / k,
        support: total_support,
    };
    let weighted_mean = |get: fn(&Scores) -> f64| {
        if total_support == 0 {
            0.0
        } else {
            per_class.iter().map(|s| get(s) * s.support as f64).sum::<f64>() / total_support as f64
        }
    };
    let weighted = Scores {
        precision: weighted_mean(|s| s.precision),
        recall: weighted_mean(|s| s.recall),
        f1: weighted_mean(|s| s.f1),
        support: total_support,
    };
    let n = pairs.len();
    let samples = Scores {
        precision: if n == 0 { 0.0 } else { sample_sums[0] / n as f64 },
        recall: if n == 0 { 0.0 } else { sample_sums[1] / n as f64 },
        f1: if n == 0 { 0.0 } else { sample_sums[2] / n as f64 },
        support: total_support,
    };

    let mut rows: Vec<ReportRow> =
        classes.iter().zip(&per_class).map(|(l, s)| ReportRow { name: l.to_string(), scores: *s }).collect();
    for (name, scores) in AVERAGE_ROWS.iter().zip([micro, macro_avg, weighted, samples]) {
        rows.push(ReportRow { name: name.to_string(), scores });
    }
    ClassReport { rows, confusion }
}
