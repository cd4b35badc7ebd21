//! Turn multi-annotator labels into stage-1 and stage-2 training records.

use groundcxr::ingest::{
    assemble_studies, export_stage_records, filter_conflicts, AnnotationRow, ExportOptions, StudyImage,
};
use groundcxr::jsonl::to_jsonl;
use groundcxr::Stage;

fn row(image: &str, annotator: &str, class: &str, b: Option<[f64; 4]>) -> AnnotationRow {
    AnnotationRow {
        image_id: image.into(),
        annotator_id: annotator.into(),
        class_name: class.into(),
        x_min: b.map(|b| b[0]),
        y_min: b.map(|b| b[1]),
        x_max: b.map(|b| b[2]),
        y_max: b.map(|b| b[3]),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let images = vec![
        StudyImage { study_id: "s1".into(), image: "s1.png".into(), width: 1000, height: 1000 },
        StudyImage { study_id: "s2".into(), image: "s2.png".into(), width: 1000, height: 1000 },
        StudyImage { study_id: "s3".into(), image: "s3.png".into(), width: 1000, height: 1000 },
    ];
    let rows: Vec<(usize, AnnotationRow)> = [
        row("s1", "R1", "Cardiomegaly", Some([380.0, 500.0, 800.0, 650.0])),
        row("s1", "R2", "Cardiomegaly", Some([390.0, 490.0, 790.0, 660.0])),
        row("s1", "R2", "Aortic enlargement", Some([520.0, 250.0, 640.0, 360.0])),
        row("s1", "R1", "Other disease", None),
        row("s2", "R1", "No finding", None),
        row("s2", "R3", "No finding", None),
        row("s3", "R1", "No finding", None),
        row("s3", "R2", "Nodule/Mass", Some([100.0, 100.0, 150.0, 160.0])),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, r)| (i + 2, r))
    .collect();

    let (records, warnings) = assemble_studies(&images, &rows)?;
    let (kept, removed) = filter_conflicts(records);
    println!("{} studies kept, {} removed as conflicting, {} warnings\n", kept.len(), removed.len(), warnings.len());

    let opts = ExportOptions::default();
    for stage in [Stage::Grounding, Stage::Diagnosis] {
        let out = export_stage_records(&kept, stage, &opts);
        print!("{}", to_jsonl(&out.records));
    }
    Ok(())
}
