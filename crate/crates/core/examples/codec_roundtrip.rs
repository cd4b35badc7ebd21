//! Serialize grounded findings, parse a noisy model response, and strip
//! boxes for text scoring.
//!
//! cargo run --example codec_roundtrip -- "<model response>"

use groundcxr::codec::{build_prompt, PromptTemplate};
use groundcxr::{
    parse_diagnoses, parse_grounded_report, serialize_diagnoses, serialize_findings, strip_localization, DiagnosisSet,
    Finding, GlobalLabel, GroundedReport, LocalLabel, NormBox, Stage,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let report = GroundedReport::new(vec![
        Finding::new(LocalLabel::Cardiomegaly, NormBox::new(36, 52, 80, 66)?),
        Finding::new(LocalLabel::PleuralEffusion, NormBox::new(70, 60, 92, 85)?),
    ]);
    let sentence = serialize_findings(&report);
    println!("prompt:  {}", build_prompt(Stage::Grounding, &PromptTemplate::default()));
    println!("target:  {sentence}");
    assert_eq!(parse_grounded_report(&sentence).value, report);

    let diagnoses = DiagnosisSet::new([GlobalLabel::Pneumonia, GlobalLabel::Copd])?;
    let global = serialize_diagnoses(&diagnoses);
    println!("stage 2: {global}");
    assert_eq!(&parse_diagnoses(&global).value, diagnoses.labels());

    let noisy = std::env::args().nth(1).unwrap_or_else(|| {
        "Local diseases are <p>cardiomegaly</p> {<36><52><80><66>}, <p>Pleural effusion {<70><60><92><185>}, <p>Heart</p> {<1><2><3>}."
            .to_string()
    });
    let parsed = parse_grounded_report(&noisy);
    println!("\nparsed {} finding(s) from {noisy:?}", parsed.value.findings.len());
    for f in &parsed.value.findings {
        println!("  {:<20} {:?}", f.label.name(), f.bbox.coords());
    }
    for w in &parsed.warnings {
        println!("  warning {:<20} at {:>3}: {}", w.kind.as_str(), w.offset, w.fragment);
    }
    println!("\nstripped: {}", strip_localization(&sentence, true));
    Ok(())
}
