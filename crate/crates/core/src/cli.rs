//! The `groundcxr` command line.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error. Per-item warnings are
//! logged at `-v` and summarized as counts on stderr at the end of a run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;

use crate::codec::{self, IdentifierToken, PromptTemplate, Stage};
use crate::fusion::{
    self, check_gradient_seeded, decode_matrix, decode_vector, fused_forward, EmbeddingMatrix, GroupMode,
    ProjectionWeights, Provenance,
};
use crate::geometry::{BoundsMode, DEFAULT_DEDUP_THRESHOLD};
use crate::ingest::{self, ExportOptions, StudyImage};
use crate::jsonl::{self, DataError};
use crate::metrics::{self, EvalConfig, Task, DEFAULT_THRESHOLDS};

#[derive(Debug, Parser)]
#[command(name = "groundcxr", version, about = "Grounded chest X-ray dataset and evaluation tooling")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log per-item warnings (-v) or debug detail (-vv).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// TOML file with default settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Window DICOM or raw-sidecar images into 8-bit PNGs plus a study index.
    Preprocess(PreprocessArgs),
    /// Export stage-1 or stage-2 training records from annotations.
    BuildDataset(BuildArgs),
    /// Score model responses against ground truth.
    Eval(EvalArgs),
    /// Run the fusion/projection shape trace and gradient check.
    FusionCheck(FusionArgs),
    /// Parse one model response (or stdin lines) and show what was recovered.
    Parse(ParseArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// `.dcm` files, `.json` sidecars, or directories containing them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Study index output (default: <out-dir>/studies.jsonl).
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    /// Identifier token: [identify], [vqa] or [grounding].
    #[arg(long)]
    pub identifier: Option<String>,
    #[arg(long)]
    pub image_open: Option<String>,
    #[arg(long)]
    pub image_close: Option<String>,
    #[arg(long)]
    pub image_placeholder: Option<String>,
    /// Replace the stage instruction.
    #[arg(long)]
    pub instruction: Option<String>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long, value_parser = parse_stage)]
    pub stage: Stage,
    /// VinDr-style CSV or JSONL annotation rows.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Study index written by `preprocess`.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write evaluation ground truth.
    #[arg(long)]
    pub gt_out: Option<PathBuf>,
    /// Clamp out-of-image boxes instead of skipping the study.
    #[arg(long)]
    pub clamp: bool,
    /// Keep studies where one annotator says "No finding" and another draws boxes.
    #[arg(long)]
    pub keep_conflicts: bool,
    #[arg(long)]
    pub dedup_threshold: Option<f64>,
    #[command(flatten)]
    pub template: TemplateArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub task: Task,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Comma-separated IoU thresholds in (0, 1).
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Reference sentence for the text task.
    #[arg(long, value_parser = parse_stage, default_value = "1")]
    pub text_stage: Stage,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FusionArgs {
    #[arg(long, default_value_t = 196)]
    pub p1: usize,
    #[arg(long, default_value_t = 49)]
    pub p2: usize,
    /// Language-model width.
    #[arg(long, default_value_t = fusion::DEFAULT_LM_DIM)]
    pub dim: usize,
    /// Hidden width (default: same as --dim).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Encoder outputs in the binary matrix format (overrides --p1/--p2).
    #[arg(long, requires = "z2")]
    pub z1: Option<PathBuf>,
    #[arg(long, requires = "z1")]
    pub z2: Option<PathBuf>,
    /// Directory holding w1.bin, b1.bin, w2.bin, b2.bin.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Zero-pad instead of rejecting token counts not divisible by five.
    #[arg(long)]
    pub pad: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Random gradient-check instances.
    #[arg(long, default_value_t = 1)]
    pub instances: usize,
    /// Gradient-check instance size: grouped rows, hidden width, output width.
    #[arg(long, default_value_t = 2)]
    pub check_rows: usize,
    #[arg(long, default_value_t = 3)]
    pub check_hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub check_dim: usize,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// Response text; reads stdin line by line when omitted.
    pub text: Option<String>,
    #[arg(long, value_parser = parse_stage, default_value = "1")]
    pub stage: Stage,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    let n: u8 = s.parse().map_err(|_| format!("stage must be 1 or 2, got {s:?}"))?;
    Stage::try_from(n).map_err(|e| e.to_string())
}

/// Optional settings file; every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub jobs: Option<usize>,
    pub thresholds: Option<Vec<f64>>,
    pub identifier: Option<String>,
    pub image_open: Option<String>,
    pub image_close: Option<String>,
    pub image_placeholder: Option<String>,
    pub stage1_instruction: Option<String>,
    pub stage2_instruction: Option<String>,
    pub clamp: Option<bool>,
    pub keep_conflicts: Option<bool>,
    pub dedup_threshold: Option<f64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(DataError::io(path, e).to_string()))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),+) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )+};
}
data_errors!(DataError, ingest::IngestError, fusion::FusionError, io::Error);

impl From<metrics::MetricsError> for CliError {
    fn from(e: metrics::MetricsError) -> Self {
        match e {
            metrics::MetricsError::Domain(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

type Warnings = BTreeMap<String, usize>;

fn bump(w: &mut Warnings, key: &str, n: usize) {
    if n > 0 {
        *w.entry(key.to_string()).or_default() += n;
    }
}

/// Run with the process's stdout; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    let mut out = stdout.lock();
    run_with(args, &mut out)
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => LevelFilter::Error,
        1 => LevelFilter::Warn,
        2 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    log::set_max_level(level);

    let mut warnings = Warnings::new();
    let result = dispatch(&cli, out, &mut warnings);
    if !warnings.is_empty() {
        let summary: Vec<String> = warnings.iter().map(|(k, n)| format!("{k}={n}")).collect();
        eprintln!("warnings: {}", summary.join(", "));
    }
    match result {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("usage error: {m}"),
                CliError::Data(m) => eprintln!("error: {m}"),
            }
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, warnings: &mut Warnings) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let jobs = cli.jobs.or(config.jobs).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    // stdout handles are not Send; collect output and write it once done
    let mut buf = Vec::new();
    let result = pool.install(|| {
        let sink: &mut dyn Write = &mut buf;
        match &cli.command {
            Command::Preprocess(a) => preprocess(a, cli.json, sink, warnings),
            Command::BuildDataset(a) => build_dataset(a, &config, cli.json, sink, warnings),
            Command::Eval(a) => eval(a, &config, cli.json, sink, warnings),
            Command::FusionCheck(a) => fusion_check(a, sink),
            Command::Parse(a) => parse(a, cli.json, sink, warnings),
        }
    });
    out.write_all(&buf)?;
    result
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found = Vec::new();
            for entry in fs::read_dir(input).map_err(|e| DataError::io(input, e))? {
                let path = entry.map_err(|e| DataError::io(input, e))?.path();
                let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
                if matches!(ext.as_deref(), Some("dcm" | "json")) {
                    found.push(path);
                }
            }
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

fn preprocess_one(path: &Path, out_dir: &Path) -> Result<StudyImage, ingest::IngestError> {
    let is_sidecar = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let (study_id, raw) = if is_sidecar {
        ingest::load_sidecar(path)?
    } else {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        (stem, ingest::read_dicom_tags(&bytes)?)
    };
    let gray = ingest::normalize_pixels(&raw);
    let png = ingest::encode_png(&gray)?;
    let image = format!("{study_id}.png");
    jsonl::write_atomic(out_dir.join(&image), &png)?;
    Ok(StudyImage { study_id, image, width: gray.dims.width, height: gray.dims.height })
}

fn preprocess(a: &PreprocessArgs, as_json: bool, out: &mut dyn Write, warnings: &mut Warnings) -> Result<(), CliError> {
    let files = collect_inputs(&a.inputs)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| DataError::io(&a.out_dir, e))?;
    let results: Vec<_> = files.par_iter().map(|p| preprocess_one(p, &a.out_dir)).collect();
    let mut studies = Vec::new();
    for (path, res) in files.iter().zip(results) {
        match res {
            Ok(s) => studies.push(s),
            Err(e) => {
                log::warn!("{}: {e}", path.display());
                bump(warnings, "skipped_image", 1);
            }
        }
    }
    studies.sort_by(|x, y| x.study_id.cmp(&y.study_id));
    if let Some(w) = studies.windows(2).find(|w| w[0].study_id == w[1].study_id) {
        return Err(CliError::Data(format!("two inputs map to study id {:?}", w[0].study_id)));
    }
    let index = a.index.clone().unwrap_or_else(|| a.out_dir.join("studies.jsonl"));
    jsonl::write_jsonl(&index, &studies)?;
    let summary = json!({ "images": studies.len(), "skipped": files.len() - studies.len(), "index": index });
    emit(out, as_json, &summary, || format!("wrote {} images, index {}", studies.len(), index.display()))
}

fn template(a: &TemplateArgs, config: &ConfigFile, stage: Stage) -> Result<PromptTemplate, CliError> {
    let mut t = PromptTemplate::default();
    if let Some(v) = a.image_open.clone().or_else(|| config.image_open.clone()) {
        t.image_open = v;
    }
    if let Some(v) = a.image_close.clone().or_else(|| config.image_close.clone()) {
        t.image_close = v;
    }
    if let Some(v) = a.image_placeholder.clone().or_else(|| config.image_placeholder.clone()) {
        t.image_placeholder = v;
    }
    if let Some(id) = a.identifier.as_deref().or(config.identifier.as_deref()) {
        t.identifier = Some(id.parse::<IdentifierToken>().map_err(|e| CliError::Usage(e.to_string()))?);
    }
    let configured = match stage {
        Stage::Grounding => config.stage1_instruction.clone(),
        Stage::Diagnosis => config.stage2_instruction.clone(),
    };
    t.instruction = a.instruction.clone().or(configured);
    Ok(t)
}

fn build_dataset(
    a: &BuildArgs,
    config: &ConfigFile,
    as_json: bool,
    out: &mut dyn Write,
    warnings: &mut Warnings,
) -> Result<(), CliError> {
    let dedup_threshold = a.dedup_threshold.or(config.dedup_threshold).unwrap_or(DEFAULT_DEDUP_THRESHOLD);
    if !(0.0..=1.0).contains(&dedup_threshold) {
        return Err(CliError::Usage(format!("dedup threshold {dedup_threshold} outside [0, 1]")));
    }
    let clamp = a.clamp || config.clamp.unwrap_or(false);
    let opts = ExportOptions {
        template: template(&a.template, config, a.stage)?,
        bounds: if clamp { BoundsMode::Clamp } else { BoundsMode::Reject },
        dedup_threshold,
    };
    let images: Vec<StudyImage> = jsonl::read_jsonl(&a.images)?.into_iter().map(|(_, s)| s).collect();
    let rows = ingest::read_annotations(&a.annotations)?;
    let (records, assembly) = ingest::assemble_studies(&images, &rows)?;
    bump(warnings, "annotation", assembly.len());
    let records = if a.keep_conflicts || config.keep_conflicts.unwrap_or(false) {
        records
    } else {
        let (kept, removed) = ingest::filter_conflicts(records);
        for r in &removed {
            log::warn!("{}: conflicting annotators, removed", r.study_id);
        }
        bump(warnings, "conflict_removed", removed.len());
        kept
    };
    let outcome = ingest::export_stage_records(&records, a.stage, &opts);
    bump(warnings, "study_skipped", outcome.skipped.len());
    jsonl::write_jsonl(&a.out, &outcome.records)?;
    if let Some(gt_out) = &a.gt_out {
        let (gts, skipped) = ingest::ground_truth_records(&records, &opts);
        bump(warnings, "gt_skipped", skipped.len());
        jsonl::write_jsonl(gt_out, &gts)?;
    }
    let summary = json!({
        "stage": a.stage,
        "records": outcome.records.len(),
        "skipped": outcome.skipped.len(),
        "out": a.out,
    });
    emit(out, as_json, &summary, || format!("wrote {} stage-{} records to {}", outcome.records.len(), a.stage.number(), a.out.display()))
}

fn eval(a: &EvalArgs, config: &ConfigFile, as_json: bool, out: &mut dyn Write, warnings: &mut Warnings) -> Result<(), CliError> {
    let thresholds = a.thresholds.clone().or_else(|| config.thresholds.clone()).unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
    let eval_config = EvalConfig::new(a.task).with_thresholds(thresholds)?.with_text_reference(a.text_stage);
    let report = metrics::evaluate_run(&a.gt, &a.pred, &eval_config)?;
    for (k, n) in &report.warnings {
        bump(warnings, k, *n);
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    if let Some(path) = &a.out {
        jsonl::write_atomic(path, text.as_bytes())?;
    }
    if as_json {
        out.write_all(text.as_bytes())?;
    } else {
        writeln!(out, "task {} over {} studies", report.task, report.studies)?;
        for (k, v) in &report.metrics {
            if let Some(x) = v.as_f64() {
                writeln!(out, "{k:>22}  {x:.4}")?;
            }
        }
    }
    Ok(())
}

fn load_weights(dir: &Path) -> Result<ProjectionWeights, CliError> {
    let read = |name: &str| -> Result<Vec<u8>, CliError> {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| DataError::io(&p, e).into())
    };
    Ok(ProjectionWeights::new(
        decode_matrix(&read("w1.bin")?)?,
        decode_vector(&read("b1.bin")?)?,
        decode_matrix(&read("w2.bin")?)?,
        decode_vector(&read("b2.bin")?)?,
    )?)
}

fn load_embedding(path: &Path, provenance: Provenance) -> Result<EmbeddingMatrix, CliError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    Ok(EmbeddingMatrix::new(decode_matrix(&bytes)?, provenance)?)
}

fn fusion_check(a: &FusionArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (z1, z2) = match (&a.z1, &a.z2) {
        (Some(p1), Some(p2)) => (load_embedding(p1, Provenance::Encoder1)?, load_embedding(p2, Provenance::Encoder2)?),
        _ => (
            EmbeddingMatrix::seeded(a.p1, Provenance::Encoder1, a.seed),
            EmbeddingMatrix::seeded(a.p2, Provenance::Encoder2, a.seed.wrapping_add(1)),
        ),
    };
    let weights = match &a.weights {
        Some(dir) => load_weights(dir)?,
        None => ProjectionWeights::seeded(a.hidden.unwrap_or(a.dim), a.dim, a.seed.wrapping_add(2)),
    };
    let mode = if a.pad { GroupMode::PadZeros } else { GroupMode::Strict };
    let (v, trace) = fused_forward(&z1, &z2, &weights, mode)?;

    let checks: Vec<_> = (0..a.instances as u64)
        .into_par_iter()
        .map(|i| {
            let seed = a.seed.wrapping_add(1000 + i);
            let w = ProjectionWeights::seeded(a.check_hidden, a.check_dim, seed);
            let z = EmbeddingMatrix::seeded(a.check_rows * fusion::GROUP_SIZE, Provenance::Fused, seed);
            let q = fusion::group_tokens(&z, GroupMode::Strict)?;
            check_gradient_seeded(&w, &q, a.epsilon, seed)
        })
        .collect::<Result<_, _>>()?;
    let worst = checks.iter().map(|c: &fusion::GradientCheck| c.max_relative_error).fold(0.0, f64::max);
    let report = json!({
        "trace": trace,
        "output_finite": v.iter().all(|x| x.is_finite()),
        "gradient": {
            "epsilon": a.epsilon,
            "instances": checks.len(),
            "max_relative_error": worst,
            "per_instance": checks.iter().map(|c| c.max_relative_error).collect::<Vec<_>>(),
        },
    });
    writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(())
}

fn parse(a: &ParseArgs, as_json: bool, out: &mut dyn Write, warnings: &mut Warnings) -> Result<(), CliError> {
    let lines: Vec<String> = match &a.text {
        Some(t) => vec![t.clone()],
        None => io::stdin().lock().lines().collect::<Result<_, _>>()?,
    };
    for line in &lines {
        let (value, found) = match a.stage {
            Stage::Grounding => {
                let p = codec::parse_grounded_report(line);
                (json!({ "findings": p.value.findings }), p.warnings)
            }
            Stage::Diagnosis => {
                let p = codec::parse_diagnoses(line);
                (json!({ "diagnoses": p.value }), p.warnings)
            }
        };
        for w in &found {
            bump(warnings, w.kind.as_str(), 1);
        }
        if as_json {
            let mut doc = value;
            doc["warnings"] = json!(found);
            writeln!(out, "{}", serde_json::to_string(&doc).expect("plain data"))?;
        } else {
            match a.stage {
                Stage::Grounding => {
                    for f in value["findings"].as_array().into_iter().flatten() {
                        writeln!(out, "{}\t{}", f["label"].as_str().unwrap_or_default(), f["box"])?;
                    }
                }
                Stage::Diagnosis => {
                    for d in value["diagnoses"].as_array().into_iter().flatten() {
                        writeln!(out, "{}", d.as_str().unwrap_or_default())?;
                    }
                }
            }
            for w in &found {
                writeln!(out, "warning: {} at byte {}: {}", w.kind.as_str(), w.offset, w.fragment)?;
            }
        }
    }
    Ok(())
}

fn emit(out: &mut dyn Write, as_json: bool, doc: &serde_json::Value, human: impl FnOnce() -> String) -> Result<(), CliError> {
    if as_json {
        writeln!(out, "{}", serde_json::to_string(doc).expect("plain data"))?;
    } else {
        writeln!(out, "{}", human())?;
    }
    Ok(())
}
