//! Score grounded responses: accuracy at IoU thresholds plus the per-label
//! classification report.

use groundcxr::metrics::{evaluate, EvalConfig, GroundTruth, Prediction, Task};
use groundcxr::{Finding, LocalLabel, NormBox};

fn f(label: LocalLabel, c: [u8; 4]) -> Finding {
    Finding::new(label, NormBox::new(c[0], c[1], c[2], c[3]).expect("valid box"))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    use LocalLabel::*;
    let gts = vec![
        GroundTruth { id: "s1".into(), findings: vec![f(Cardiomegaly, [35, 50, 80, 66]), f(Calcification, [60, 21, 66, 29])], global: Default::default() },
        GroundTruth { id: "s2".into(), findings: vec![f(PleuralEffusion, [70, 60, 92, 85]), f(PleuralEffusion, [8, 62, 30, 86])], global: Default::default() },
        GroundTruth { id: "s3".into(), findings: vec![f(NoduleMass, [20, 30, 26, 36])], global: Default::default() },
    ];
    let preds = vec![
        // right heart box, wrong second label
        Prediction { id: "s1".into(), text: "Local diseases of this chest radiograph are <p>Cardiomegaly</p> {<38><48><82><65>},<p>Aortic enlargement</p> {<56><17><67><28>}.".into() },
        // one effusion found, the other side missed
        Prediction { id: "s2".into(), text: "Local diseases of this chest radiograph are <p>Pleural effusion</p> {<72><55><95><88>}.".into() },
        // no prediction for s3
    ];
    let report = evaluate(&gts, &preds, &EvalConfig::new(Task::Loc).with_thresholds(vec![0.3, 0.5, 0.7])?)?;
    for (k, v) in &report.metrics {
        if k.starts_with("accuracy@") || k == "eligible_findings" {
            println!("{k:<18} {v}");
        }
    }
    println!("warnings: {:?}", report.warnings);
    println!("\n{}", serde_json::to_string_pretty(&report.per_class["micro avg"])?);
    Ok(())
}
