//! Merge overlapping boxes drawn by several annotators into one per cluster.

use groundcxr::geometry::{dedup_findings, iou, normalize_box, BoundsMode, DEFAULT_DEDUP_THRESHOLD};
use groundcxr::{Finding, ImageDims, LocalLabel, PixelBox};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = ImageDims::new(2048, 2500)?;
    // three readers outline the same heart, a fourth box is a separate nodule
    let drawn = [
        (LocalLabel::Cardiomegaly, [700.0, 1300.0, 1650.0, 1700.0]),
        (LocalLabel::Cardiomegaly, [720.0, 1280.0, 1600.0, 1690.0]),
        (LocalLabel::Cardiomegaly, [690.0, 1320.0, 1640.0, 1720.0]),
        (LocalLabel::NoduleMass, [300.0, 600.0, 380.0, 690.0]),
        (LocalLabel::NoduleMass, [1500.0, 500.0, 1580.0, 580.0]),
    ];
    let mut findings = Vec::new();
    for (label, [x0, y0, x1, y1]) in drawn {
        let px = PixelBox::new(x0, y0, x1, y1)?;
        let grid = normalize_box(&px, dims, BoundsMode::Reject)?;
        println!("{:<14} {:?} -> {:?}", label.name(), [x0, y0, x1, y1], grid.coords());
        findings.push(Finding::new(label, grid));
    }
    println!("IoU of first two hearts: {:.3}", iou(&findings[0].bbox, &findings[1].bbox)?);

    let kept = dedup_findings(&findings, DEFAULT_DEDUP_THRESHOLD)?;
    println!("\n{} boxes -> {} after dedup at IoU > {DEFAULT_DEDUP_THRESHOLD}", findings.len(), kept.len());
    for f in &kept {
        println!("  {:<14} {:?}", f.label.name(), f.bbox.coords());
    }
    Ok(())
}
