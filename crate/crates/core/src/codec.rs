//! Text formats exchanged with the language model.
//!
//! Stage 1 targets interleave finding labels with grid boxes:
//!
//! ```text
//! Local diseases of this chest radiograph are <p>Cardiomegaly</p> {<38><48><85><65>}.
//! ```
//!
//! Stage 2 targets list whole-image diagnoses:
//!
//! ```text
//! Global diseases of this chest radiograph are Lung tumor, Pneumonia, Tuberculosis.
//! ```
//!
//! Serialization is byte-exact. Parsing is a tolerant scanner: model output
//! is free text, so malformed fragments become [`ParseWarning`]s and never
//! errors. See `docs/grammar.md` for the grammar.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Finding, NormBox, GRID_MAX};

pub const LOCAL_PREFIX: &str = "Local diseases of this chest radiograph are ";
pub const GLOBAL_PREFIX: &str = "Global diseases of this chest radiograph are ";
pub const NO_FINDINGS_SENTENCE: &str = "The chest radiograph shows no findings.";

pub const STAGE1_INSTRUCTION: &str = "Please describe the critical findings along with their localized bounding boxes \
in the radiological image of a chest as much detail as possible. If there are no findings, state that the chest \
radiograph shows no findings.";

pub const STAGE2_INSTRUCTION: &str = "Given the provided chest X-ray image, which of the following diagnoses are \
present (select all that apply): COPD, Lung Tumor, Pneumonia, Tuberculosis, Other Disease, or No Finding?";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unknown local label {0:?}")]
    UnknownLocalLabel(String),
    #[error("unknown global label {0:?}")]
    UnknownGlobalLabel(String),
    #[error("unknown identifier token {0:?}; expected [identify], [vqa] or [grounding]")]
    UnknownIdentifier(String),
    #[error("diagnosis set is empty")]
    EmptyDiagnoses,
    #[error("\"No finding\" cannot be combined with other diagnoses")]
    NoFindingNotExclusive,
    #[error("stage must be 1 or 2, got {0}")]
    Stage(u8),
}

/// Lowercase, trim and collapse whitespace; also drops spaces around `/`.
fn fold_label(s: &str) -> String {
    let joined = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    joined.replace(" /", "/").replace("/ ", "/")
}

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident, $err:ident, [$($variant:ident => $text:literal),+ $(,)?]) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Canonical spelling.
            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = CodecError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let folded = fold_label(s);
                Self::ALL
                    .iter()
                    .copied()
                    .find(|l| fold_label(l.name()) == folded)
                    .ok_or_else(|| CodecError::$err(s.to_string()))
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

label_enum!(
    /// The 22 localized findings.
    LocalLabel, UnknownLocalLabel, [
    AorticEnlargement => "Aortic enlargement",
    Atelectasis => "Atelectasis",
    Calcification => "Calcification",
    Cardiomegaly => "Cardiomegaly",
    ClavicleFracture => "Clavicle fracture",
    Consolidation => "Consolidation",
    Edema => "Edema",
    Emphysema => "Emphysema",
    EnlargedPa => "Enlarged PA",
    Ild => "ILD",
    Infiltration => "Infiltration",
    LungOpacity => "Lung Opacity",
    LungCavity => "Lung cavity",
    LungCyst => "Lung cyst",
    MediastinalShift => "Mediastinal shift",
    NoduleMass => "Nodule/Mass",
    PleuralEffusion => "Pleural effusion",
    PleuralThickening => "Pleural thickening",
    Pneumothorax => "Pneumothorax",
    PulmonaryFibrosis => "Pulmonary fibrosis",
    RibFracture => "Rib fracture",
    OtherLesion => "Other lesion",
]);

label_enum!(
    /// The 6 whole-image diagnoses.
    GlobalLabel, UnknownGlobalLabel, [
    Copd => "COPD",
    LungTumor => "Lung tumor",
    Pneumonia => "Pneumonia",
    Tuberculosis => "Tuberculosis",
    OtherDisease => "Other disease",
    NoFinding => "No finding",
]);

/// Findings of one study, in order. Empty means "no findings".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedReport {
    pub findings: Vec<Finding>,
}

impl GroundedReport {
    pub fn new(findings: Vec<Finding>) -> Self {
        Self { findings }
    }

    pub fn no_finding() -> Self {
        Self::default()
    }

    pub fn is_no_finding(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn labels(&self) -> BTreeSet<LocalLabel> {
        self.findings.iter().map(|f| f.label).collect()
    }
}

/// A non-empty set of diagnoses where "No finding" stands alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeSet<GlobalLabel>", into = "BTreeSet<GlobalLabel>")]
pub struct DiagnosisSet(BTreeSet<GlobalLabel>);

impl DiagnosisSet {
    pub fn new(labels: impl IntoIterator<Item = GlobalLabel>) -> Result<Self, CodecError> {
        let labels: BTreeSet<_> = labels.into_iter().collect();
        if labels.is_empty() {
            return Err(CodecError::EmptyDiagnoses);
        }
        if labels.contains(&GlobalLabel::NoFinding) && labels.len() > 1 {
            return Err(CodecError::NoFindingNotExclusive);
        }
        Ok(Self(labels))
    }

    pub fn no_finding() -> Self {
        Self([GlobalLabel::NoFinding].into())
    }

    pub fn labels(&self) -> &BTreeSet<GlobalLabel> {
        &self.0
    }
}

impl TryFrom<BTreeSet<GlobalLabel>> for DiagnosisSet {
    type Error = CodecError;
    fn try_from(s: BTreeSet<GlobalLabel>) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<DiagnosisSet> for BTreeSet<GlobalLabel> {
    fn from(d: DiagnosisSet) -> Self {
        d.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    /// `{…}` group that is not exactly four `<int>` tokens.
    MalformedBox,
    /// Label group with no box after it.
    MissingBox,
    /// `<p>` without a closing `</p>`.
    UnterminatedLabel,
    /// Label text outside the vocabulary.
    UnknownLabel,
    /// Coordinate above 100, clamped.
    CoordinateClamped,
    /// Box with min > max after clamping.
    InvertedBox,
    /// Box with no label in front of it.
    OrphanBox,
    /// Nothing recognizable in the text at all.
    NoContent,
    /// "No finding" together with other diagnoses.
    ConflictingNoFinding,
}

impl WarningKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WarningKind::MalformedBox => "malformed_box",
            WarningKind::MissingBox => "missing_box",
            WarningKind::UnterminatedLabel => "unterminated_label",
            WarningKind::UnknownLabel => "unknown_label",
            WarningKind::CoordinateClamped => "coordinate_clamped",
            WarningKind::InvertedBox => "inverted_box",
            WarningKind::OrphanBox => "orphan_box",
            WarningKind::NoContent => "no_content",
            WarningKind::ConflictingNoFinding => "conflicting_no_finding",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub kind: WarningKind,
    /// Byte offset of the fragment in the input.
    pub offset: usize,
    pub fragment: String,
}

impl ParseWarning {
    fn new(kind: WarningKind, offset: usize, fragment: &str) -> Self {
        const MAX: usize = 80;
        let fragment = match fragment.char_indices().nth(MAX) {
            Some((cut, _)) => format!("{}…", &fragment[..cut]),
            None => fragment.to_string(),
        };
        Self { kind, offset, fragment }
    }
}

/// A parse result together with what the scanner had to skip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<ParseWarning>,
}

fn write_box(out: &mut String, b: &NormBox) {
    let [x0, y0, x1, y1] = b.coords();
    out.push_str(&format!("{{<{x0}><{y0}><{x1}><{y1}>}}"));
}

/// Render a report as a stage-1 sentence.
pub fn serialize_findings(report: &GroundedReport) -> String {
    if report.is_no_finding() {
        return NO_FINDINGS_SENTENCE.to_string();
    }
    let mut out = String::from(LOCAL_PREFIX);
    for (i, f) in report.findings.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("<p>");
        out.push_str(f.label.name());
        out.push_str("</p> ");
        write_box(&mut out, &f.bbox);
    }
    out.push('.');
    out
}

/// Render a diagnosis set as a stage-2 sentence, labels in canonical order.
pub fn serialize_diagnoses(d: &DiagnosisSet) -> String {
    let names: Vec<_> = d.labels().iter().map(|l| l.name()).collect();
    format!("{GLOBAL_PREFIX}{}.", names.join(", "))
}

enum BoxScan {
    Ok([u64; 4]),
    Malformed,
}

/// Reads `{<int><int><int><int>}` starting at `s[0] == '{'`. Returns the parse
/// and the number of bytes consumed.
fn scan_box(s: &str) -> (BoxScan, usize) {
    debug_assert!(s.starts_with('{'));
    let close = s.find('}');
    let stray = s[1..].find(['{', '\n']).map(|i| i + 1);
    let end = match (close, stray) {
        (Some(c), Some(o)) if o < c => return (BoxScan::Malformed, o),
        (Some(c), _) => c,
        (None, _) => return (BoxScan::Malformed, stray.unwrap_or(s.len())),
    };
    let inner = &s[1..end];
    let mut values = Vec::with_capacity(4);
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let Some(body) = rest.strip_prefix('<') else {
            return (BoxScan::Malformed, end + 1);
        };
        let Some(gt) = body.find('>') else {
            return (BoxScan::Malformed, end + 1);
        };
        let token = body[..gt].trim();
        if token.is_empty() || !token.bytes().all(|b| b.is_ascii_digit()) {
            return (BoxScan::Malformed, end + 1);
        }
        values.push(token.parse::<u64>().unwrap_or(u64::MAX));
        rest = body[gt + 1..].trim_start();
    }
    match <[u64; 4]>::try_from(values) {
        Ok(v) => (BoxScan::Ok(v), end + 1),
        Err(_) => (BoxScan::Malformed, end + 1),
    }
}

/// Scan model output for `<p>LABEL</p> {<x0><y0><x1><y1>}` pairs.
///
/// Never fails. Unknown labels, malformed or missing boxes and stray boxes are
/// dropped with a warning; coordinates above 100 are clamped with a warning.
pub fn parse_grounded_report(text: &str) -> Parsed<GroundedReport> {
    let mut findings = Vec::new();
    let mut warnings = Vec::new();
    let mut saw_structure = false;
    let mut pos = 0;

    while pos < text.len() {
        let rest = &text[pos..];
        let next_p = rest.find("<p>");
        let next_box = rest.find('{');
        let (at, is_label) = match (next_p, next_box) {
            (None, None) => break,
            (Some(p), Some(b)) if b < p => (b, false),
            (Some(p), _) => (p, true),
            (None, Some(b)) => (b, false),
        };
        saw_structure = true;
        let start = pos + at;

        if !is_label {
            let (_, used) = scan_box(&text[start..]);
            warnings.push(ParseWarning::new(WarningKind::OrphanBox, start, &text[start..start + used]));
            pos = start + used.max(1);
            continue;
        }

        let label_start = start + 3;
        let Some(close) = text[label_start..].find("</p>") else {
            warnings.push(ParseWarning::new(WarningKind::UnterminatedLabel, start, &text[start..]));
            break;
        };
        let raw_label = &text[label_start..label_start + close];
        if raw_label.contains("<p>") {
            // nested opener: the first one was never closed
            let inner = label_start + raw_label.find("<p>").expect("checked");
            warnings.push(ParseWarning::new(WarningKind::UnterminatedLabel, start, &text[start..inner]));
            pos = inner;
            continue;
        }
        let after_label = label_start + close + 4;
        let tail = &text[after_label..];
        let trimmed = tail.trim_start();
        let box_at = after_label + (tail.len() - trimmed.len());

        if !trimmed.starts_with('{') {
            warnings.push(ParseWarning::new(WarningKind::MissingBox, start, &text[start..after_label]));
            pos = after_label;
            continue;
        }
        let (scan, used) = scan_box(trimmed);
        let fragment_end = box_at + used;
        pos = fragment_end.max(after_label + 1);
        let fragment = &text[start..fragment_end];

        let coords = match scan {
            BoxScan::Ok(v) => v,
            BoxScan::Malformed => {
                warnings.push(ParseWarning::new(WarningKind::MalformedBox, start, fragment));
                continue;
            }
        };
        let label = match raw_label.parse::<LocalLabel>() {
            Ok(l) => l,
            Err(_) => {
                warnings.push(ParseWarning::new(WarningKind::UnknownLabel, start, fragment));
                continue;
            }
        };
        if coords.iter().any(|&c| c > u64::from(GRID_MAX)) {
            warnings.push(ParseWarning::new(WarningKind::CoordinateClamped, start, fragment));
        }
        let [x0, y0, x1, y1] = coords.map(|c| c.min(u64::from(GRID_MAX)) as u8);
        match NormBox::new(x0, y0, x1, y1) {
            Ok(b) => findings.push(Finding::new(label, b)),
            Err(_) => warnings.push(ParseWarning::new(WarningKind::InvertedBox, start, fragment)),
        }
    }

    if !saw_structure && !mentions_no_findings(text) {
        warnings.push(ParseWarning::new(WarningKind::NoContent, 0, text));
    }
    Parsed { value: GroundedReport { findings }, warnings }
}

fn mentions_no_findings(text: &str) -> bool {
    let lower = text.to_lowercase();
    lower.contains("no finding") || lower.contains("no critical finding")
}

static DIAGNOSIS_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    let mut names: Vec<&str> = GlobalLabel::ALL.iter().map(|l| l.name()).collect();
    // alternation is leftmost-first, so longer names go first
    names.sort_by_key(|n| std::cmp::Reverse(n.len()));
    let alts: Vec<String> = names
        .iter()
        .map(|n| n.split(' ').map(regex::escape).collect::<Vec<_>>().join(r"\s+"))
        .collect();
    // a trailing plural "s" is tolerated ("no findings")
    Regex::new(&format!(r"(?i)\b(?:{})s?\b", alts.join("|"))).expect("static pattern")
});

/// Collect every diagnosis mentioned anywhere in the text.
///
/// The result may be empty or violate the "No finding" exclusivity of
/// [`DiagnosisSet`]; both cases carry a warning.
pub fn parse_diagnoses(text: &str) -> Parsed<BTreeSet<GlobalLabel>> {
    let labels: BTreeSet<GlobalLabel> = DIAGNOSIS_PATTERN
        .find_iter(text)
        .filter_map(|m| {
            let s = m.as_str();
            s.parse().ok().or_else(|| s.strip_suffix(['s', 'S'])?.parse().ok())
        })
        .collect();
    let mut warnings = Vec::new();
    if labels.is_empty() {
        warnings.push(ParseWarning::new(WarningKind::NoContent, 0, text));
    } else if labels.contains(&GlobalLabel::NoFinding) && labels.len() > 1 {
        warnings.push(ParseWarning::new(WarningKind::ConflictingNoFinding, 0, text));
    }
    Parsed { value: labels, warnings }
}

static BOX_GROUP: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{\s*(?:<\s*\d+\s*>\s*){4}\}").expect("static pattern"));
static LABEL_TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"</?p>").expect("static pattern"));
static SPACES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[ \t]+").expect("static pattern"));
static SPACE_BEFORE_PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r" +([,.])").expect("static pattern"));
static COMMA_RUNS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r",(?:\s*,)+").expect("static pattern"));
static COMMA_PERIOD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r",\s*\.").expect("static pattern"));

/// Remove box groups (and optionally `<p>` tags) so that text metrics only
/// see the wording. Text with nothing to remove is returned unchanged.
pub fn strip_localization(text: &str, strip_tags: bool) -> String {
    let mut out = BOX_GROUP.replace_all(text, "").into_owned();
    if strip_tags {
        out = LABEL_TAG.replace_all(&out, "").into_owned();
    }
    if out == text {
        return out;
    }
    let out = SPACES.replace_all(&out, " ");
    let out = SPACE_BEFORE_PUNCT.replace_all(&out, "$1");
    let out = COMMA_RUNS.replace_all(&out, ",");
    let out = COMMA_PERIOD.replace_all(&out, ".");
    out.trim().trim_start_matches(',').trim_start().to_string()
}

/// Task-routing token placed between the image and the instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IdentifierToken {
    #[serde(rename = "[identify]")]
    Identify,
    #[serde(rename = "[vqa]")]
    Vqa,
    #[serde(rename = "[grounding]")]
    Grounding,
}

impl IdentifierToken {
    pub fn as_str(self) -> &'static str {
        match self {
            IdentifierToken::Identify => "[identify]",
            IdentifierToken::Vqa => "[vqa]",
            IdentifierToken::Grounding => "[grounding]",
        }
    }
}

impl FromStr for IdentifierToken {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "[identify]" => Ok(Self::Identify),
            "[vqa]" => Ok(Self::Vqa),
            "[grounding]" => Ok(Self::Grounding),
            other => Err(CodecError::UnknownIdentifier(other.to_string())),
        }
    }
}

/// Training stage: grounded findings (1) or diagnosis (2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Grounding,
    Diagnosis,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Grounding => 1,
            Stage::Diagnosis => 2,
        }
    }

    pub fn default_identifier(self) -> IdentifierToken {
        match self {
            Stage::Grounding => IdentifierToken::Identify,
            Stage::Diagnosis => IdentifierToken::Vqa,
        }
    }

    pub fn instruction(self) -> &'static str {
        match self {
            Stage::Grounding => STAGE1_INSTRUCTION,
            Stage::Diagnosis => STAGE2_INSTRUCTION,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = CodecError;
    fn try_from(n: u8) -> Result<Self, Self::Error> {
        match n {
            1 => Ok(Stage::Grounding),
            2 => Ok(Stage::Diagnosis),
            other => Err(CodecError::Stage(other)),
        }
    }
}

impl Serialize for Stage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.number())
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Stage::try_from(u8::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Image delimiters plus optional overrides for the identifier and instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub image_open: String,
    pub image_close: String,
    /// Stand-in for the projected image tokens.
    pub image_placeholder: String,
    pub identifier: Option<IdentifierToken>,
    pub instruction: Option<String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            image_open: "<Img>".into(),
            image_close: "</Img>".into(),
            image_placeholder: "<ImageFeature>".into(),
            identifier: None,
            instruction: None,
        }
    }
}

impl PromptTemplate {
    pub fn with_identifier(mut self, token: &str) -> Result<Self, CodecError> {
        self.identifier = Some(token.parse()?);
        Ok(self)
    }
}

/// `<Img><ImageFeature></Img> [identify] <instruction>` for the given stage.
pub fn build_prompt(stage: Stage, template: &PromptTemplate) -> String {
    let token = template.identifier.unwrap_or_else(|| stage.default_identifier());
    let instruction = template.instruction.as_deref().unwrap_or_else(|| stage.instruction());
    format!(
        "{}{}{} {} {}",
        template.image_open,
        template.image_placeholder,
        template.image_close,
        token.as_str(),
        instruction
    )
}
