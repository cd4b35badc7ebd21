//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criterion 6 cannot pass as written: METEOR of identical texts is
//! 1 - 0.5/m^3, and corpus-level BLEU is not monotone in n. The check is run
//! faithfully and its failure is expected; any other failure, or criterion 6
//! unexpectedly passing, fails this target.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use groundcxr::codec::{parse_diagnoses, parse_grounded_report, serialize_diagnoses, serialize_findings};
use groundcxr::fusion::{check_gradient_seeded, fused_forward, group_tokens, EmbeddingMatrix, GroupMode, ProjectionWeights, Provenance};
use groundcxr::geometry::{dedup_findings, iou};
use groundcxr::ingest::{encode_dicom, normalize_pixels, Photometric, RawImage, StageRecord};
use groundcxr::metrics::classification::AVERAGE_ROWS;
use groundcxr::metrics::localization::accuracy_at_thresholds;
use groundcxr::metrics::text::{bleu, meteor, meteor_pair, rouge_n_pair, tokenize};
use groundcxr::metrics::{classification_report, evaluate, reference_text, EvalConfig, GroundTruth, Prediction, Task};
use groundcxr::{DiagnosisSet, Finding, GlobalLabel, GroundedReport, ImageDims, LocalLabel, NormBox, PixelBox, Stage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const EXPECTED_RED: &[u32] = &[6];

const CODEC_LIMIT: Duration = Duration::from_secs(1);
const IOU_LIMIT: Duration = Duration::from_secs(10);
const FUSION_LIMIT: Duration = Duration::from_secs(30);
const ROBUSTNESS_LIMIT: Duration = Duration::from_secs(60);

const IOU_TOL: f64 = 1e-9;
const GRADIENT_TOL: f64 = 1e-5;
const GRADIENT_EPSILON: f64 = 1e-5;
const REPORT_TOL: f64 = 1e-12;
const HAND_TOL: f64 = 1e-4;
const FIXED_POINT_TOL: f64 = 1e-12;
const CIDER_FLOOR: f64 = 9.0;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

fn nb(c: [u8; 4]) -> NormBox {
    NormBox::new(c[0], c[1], c[2], c[3]).unwrap()
}

fn finding(label: LocalLabel, c: [u8; 4]) -> Finding {
    Finding::new(label, nb(c))
}

// 1

fn codec_fidelity() -> Outcome {
    use LocalLabel::{AorticEnlargement as Ae, Calcification as Ca, Cardiomegaly as Cm};
    let start = Instant::now();
    let cases: [(&str, Vec<Finding>); 4] = [
        (
            "Local diseases of this chest radiograph are <p>Aortic enlargement</p> {<56><17><67><28>},<p>Cardiomegaly</p> {<38><48><85><65>}.",
            vec![finding(Ae, [56, 17, 67, 28]), finding(Cm, [38, 48, 85, 65])],
        ),
        (
            "Local diseases of this chest radiograph are <p>Calcification</p> {<60><21><66><29>},<p>Cardiomegaly</p> {<35><50><86><67>}.",
            vec![finding(Ca, [60, 21, 66, 29]), finding(Cm, [35, 50, 86, 67])],
        ),
        (
            "Local diseases of this chest radiograph are <p>Aortic enlargement</p> {<48><25><60><36>},<p>Cardiomegaly</p> {<42><51><74><62>}.",
            vec![finding(Ae, [48, 25, 60, 36]), finding(Cm, [42, 51, 74, 62])],
        ),
        (
            "Local diseases of this chest radiograph are <p>Cardiomegaly</p> {<38><48><75><65>},<p>Aortic enlargement</p> {<39><27><64><48>}.",
            vec![finding(Cm, [38, 48, 75, 65]), finding(Ae, [39, 27, 64, 48])],
        ),
    ];
    let mut boxes = 0;
    for (text, expected) in &cases {
        let parsed = parse_grounded_report(text);
        ensure(parsed.warnings.is_empty(), || format!("warnings {:?}", parsed.warnings))?;
        ensure(&parsed.value.findings == expected, || format!("parsed {:?}", parsed.value.findings))?;
        let again = serialize_findings(&GroundedReport::new(expected.clone()));
        ensure(again == *text, || format!("re-serialized {again:?}"))?;
        boxes += parsed.value.findings.len();
    }
    ensure(boxes == 8, || format!("{boxes} boxes"))?;
    within(start.elapsed(), CODEC_LIMIT)?;
    Ok(format!("4 strings, {boxes} boxes, byte-exact, {:?}", start.elapsed()))
}

// 2

fn raster_iou(a: [u32; 4], b: [u32; 4]) -> f64 {
    let (mut both, mut either) = (0u64, 0u64);
    for y in a[1].min(b[1])..a[3].max(b[3]) {
        for x in a[0].min(b[0])..a[2].max(b[2]) {
            let ia = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
            let ib = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
            both += u64::from(ia && ib);
            either += u64::from(ia || ib);
        }
    }
    both as f64 / either as f64
}

fn geometry_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let random_box = |rng: &mut ChaCha8Rng| {
        let (x0, y0) = (rng.random_range(0..200u32), rng.random_range(0..200u32));
        [x0, y0, rng.random_range(x0 + 1..=200), rng.random_range(y0 + 1..=200)]
    };
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let pa = PixelBox::new(a[0].into(), a[1].into(), a[2].into(), a[3].into()).unwrap();
        let pb = PixelBox::new(b[0].into(), b[1].into(), b[2].into(), b[3].into()).unwrap();
        let v = iou(&pa, &pb).map_err(|e| e.to_string())?;
        worst = worst.max((v - raster_iou(a, b)).abs());
    }
    ensure(worst < IOU_TOL, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), IOU_LIMIT)?;
    Ok(format!("10000 pairs, max deviation {worst:e}, {:?}", start.elapsed()))
}

// 3

fn dedup_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let threshold = groundcxr::geometry::DEFAULT_DEDUP_THRESHOLD;
    for case in 0..1000 {
        let n = rng.random_range(0..12);
        let fs: Vec<Finding> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0..70u8), rng.random_range(0..70u8));
                let c = [x, y, x + rng.random_range(5..30u8), y + rng.random_range(5..30u8)];
                finding(LocalLabel::ALL[rng.random_range(0..3)], c)
            })
            .collect();
        let once = dedup_findings(&fs, threshold).map_err(|e| e.to_string())?;
        let twice = dedup_findings(&once, threshold).map_err(|e| e.to_string())?;
        ensure(twice == once, || format!("case {case}: not idempotent"))?;
        ensure(once.iter().all(|f| fs.contains(f)), || format!("case {case}: not a subset"))?;
        let labels: BTreeSet<LocalLabel> = fs.iter().map(|f| f.label).collect();
        ensure(once.iter().map(|f| f.label).collect::<BTreeSet<_>>() == labels, || format!("case {case}: label lost"))?;
        for l in labels {
            let only: Vec<Finding> = fs.iter().filter(|f| f.label == l).copied().collect();
            let alone = dedup_findings(&only, threshold).map_err(|e| e.to_string())?;
            let got: Vec<Finding> = once.iter().filter(|f| f.label == l).copied().collect();
            ensure(alone == got, || format!("case {case}: labels interact"))?;
        }
    }
    let cluster = [
        finding(LocalLabel::Cardiomegaly, [38, 48, 85, 65]),
        finding(LocalLabel::Cardiomegaly, [39, 49, 84, 66]),
        finding(LocalLabel::Cardiomegaly, [37, 47, 86, 64]),
    ];
    let survivors = dedup_findings(&cluster, threshold).map_err(|e| e.to_string())?;
    ensure(survivors.len() == 1, || format!("three-box fixture kept {}", survivors.len()))?;
    Ok("1000 random sets; three overlapping boxes collapse to 1".into())
}

// 4

/// Window transform written out longhand, independent of the library.
fn reference_window(pixels: &[u16], photometric: Photometric, window: Option<(f64, f64)>) -> Vec<u8> {
    let flip = if photometric == Photometric::Monochrome1 { -1.0 } else { 1.0 };
    let as_f: Vec<f64> = pixels.iter().map(|&p| f64::from(p)).collect();
    let (offset, scale) = match window {
        Some((c, w)) => (c, w),
        None => {
            let mean = as_f.iter().sum::<f64>() / as_f.len() as f64;
            let max = as_f.iter().cloned().fold(f64::MIN, f64::max);
            let min = as_f.iter().cloned().fold(f64::MAX, f64::min);
            (mean, max - min)
        }
    };
    as_f.iter()
        .map(|&p| {
            let n = (p - offset) / scale;
            let n = n.clamp(-1.0, 1.0);
            (n * flip * 127.5 + 127.5) as u8
        })
        .collect()
}

fn preprocessing() -> Outcome {
    let one = |p: u16, photometric, c, w| {
        let raw = RawImage::new(vec![p], ImageDims::new(1, 1).unwrap(), 16, photometric, Some(c), Some(w)).unwrap();
        normalize_pixels(&raw).data[0]
    };
    let hand = [
        one(1000, Photometric::Monochrome2, 1000.0, 400.0),
        one(1400, Photometric::Monochrome2, 1000.0, 400.0),
        one(1400, Photometric::Monochrome1, 1000.0, 400.0),
    ];
    ensure(hand == [127, 255, 0], || format!("hand cases {hand:?}"))?;

    let (w, h) = (512u32, 128u32);
    let gradient: Vec<u16> = (0..w * h).map(|i| ((i % w) * 128 + (i / w) * 3) as u16).collect();
    let mut checked = 0;
    for photometric in [Photometric::Monochrome1, Photometric::Monochrome2] {
        for window in [None, Some((30000.0, 20000.0)), Some((12345.5, 777.25))] {
            let raw = RawImage::new(gradient.clone(), ImageDims::new(w, h).unwrap(), 16, photometric, window.map(|x| x.0), window.map(|x| x.1))
                .map_err(|e| e.to_string())?;
            let got = normalize_pixels(&raw).data;
            let want = reference_window(&gradient, photometric, window);
            let diff = got.iter().zip(&want).filter(|(a, b)| a != b).count();
            ensure(diff == 0, || format!("{} window {window:?}: {diff} pixels differ", photometric.as_str()))?;
            checked += got.len();
        }
    }
    Ok(format!("127/255/0; {checked} gradient pixels identical over 6 configurations"))
}

// 5

fn fusion_shapes() -> Outcome {
    let start = Instant::now();
    let z1 = EmbeddingMatrix::seeded(196, Provenance::Encoder1, 51);
    let z2 = EmbeddingMatrix::seeded(49, Provenance::Encoder2, 52);
    let w = ProjectionWeights::seeded(4096, 4096, 53);
    let (v, _) = fused_forward(&z1, &z2, &w, GroupMode::Strict).map_err(|e| e.to_string())?;
    ensure(v.dim() == (49, 4096), || format!("output {:?}", v.dim()))?;
    drop(w);

    for p in [1, 4, 6, 244, 246] {
        let z = EmbeddingMatrix::seeded(p, Provenance::Fused, 5);
        ensure(group_tokens(&z, GroupMode::Strict).is_err(), || format!("strict accepted P={p}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let (m, hidden, d) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=4));
        let q = group_tokens(&EmbeddingMatrix::seeded(5 * m, Provenance::Fused, 1000 + i), GroupMode::Strict).map_err(|e| e.to_string())?;
        let w = ProjectionWeights::seeded(hidden, d, 2000 + i);
        let check = check_gradient_seeded(&w, &q, GRADIENT_EPSILON, 3000 + i).map_err(|e| e.to_string())?;
        worst = worst.max(check.max_relative_error);
    }
    ensure(worst < GRADIENT_TOL, || format!("gradient relative error {worst:e}"))?;
    within(start.elapsed(), FUSION_LIMIT)?;
    Ok(format!("49x4096 output; strict rejects P mod 5 != 0; worst gradient error {worst:e}; {:?}", start.elapsed()))
}

// 6

fn fixed_point_corpus() -> Vec<GroundTruth> {
    use GlobalLabel::*;
    use LocalLabel::*;
    let globals: [&[GlobalLabel]; 10] = [
        &[Copd],
        &[LungTumor, Pneumonia],
        &[Tuberculosis],
        &[OtherDisease],
        &[NoFinding],
        &[Pneumonia],
        &[Copd, Tuberculosis],
        &[LungTumor],
        &[OtherDisease, Pneumonia],
        &[NoFinding],
    ];
    let locals: [&[(LocalLabel, [u8; 4])]; 10] = [
        &[(Cardiomegaly, [38, 48, 85, 65])],
        &[(AorticEnlargement, [56, 17, 67, 28]), (NoduleMass, [20, 30, 28, 40])],
        &[(PleuralEffusion, [10, 60, 30, 90]), (PleuralThickening, [12, 10, 30, 20])],
        &[(Calcification, [60, 21, 66, 29])],
        &[],
        &[(Consolidation, [55, 40, 80, 70]), (Infiltration, [20, 45, 40, 70])],
        &[(Emphysema, [15, 15, 45, 60]), (LungOpacity, [60, 50, 85, 80])],
        &[(NoduleMass, [70, 30, 78, 38]), (Atelectasis, [22, 70, 40, 82])],
        &[(Ild, [18, 20, 44, 80]), (Cardiomegaly, [36, 50, 84, 66])],
        &[],
    ];
    (0..10)
        .map(|i| GroundTruth {
            id: format!("fp{i}"),
            findings: locals[i].iter().map(|&(l, c)| finding(l, c)).collect(),
            global: globals[i].iter().copied().collect(),
        })
        .collect()
}

fn number(report: &groundcxr::metrics::EvalReport, key: &str) -> f64 {
    report.metrics.get(key).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

/// Corpus-level BLEU-n exceeds BLEU-(n-1) somewhere; returns the first violation.
fn bleu_violation(pairs: &[(String, String)]) -> Option<(usize, f64, f64)> {
    let cumulative = bleu(pairs, 4).cumulative;
    (1..cumulative.len()).find(|&n| cumulative[n] > cumulative[n - 1]).map(|n| (n + 1, cumulative[n - 1], cumulative[n]))
}

fn fuzz_corpus(rng: &mut ChaCha8Rng) -> Vec<(String, String)> {
    const VOCAB: &[&str] = &["a", "b", "c", "d", "e", "opacity", "left", "lung", ",", "."];
    let sentence = |rng: &mut ChaCha8Rng, len: usize| (0..len).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>();
    (0..rng.random_range(1..=6))
        .map(|_| {
            let len = rng.random_range(1..=12);
            let reference = sentence(rng, len);
            let candidate = if rng.random_bool(0.5) {
                let len = rng.random_range(0..=12);
                sentence(rng, len)
            } else {
                let mut c = reference.clone();
                for _ in 0..rng.random_range(0..=3) {
                    match rng.random_range(0..3) {
                        0 if !c.is_empty() => {
                            let i = rng.random_range(0..c.len());
                            c.remove(i);
                        }
                        1 => {
                            let i = rng.random_range(0..=c.len());
                            c.insert(i, VOCAB.choose(rng).unwrap());
                        }
                        _ if !c.is_empty() => {
                            let i = rng.random_range(0..c.len());
                            c[i] = VOCAB.choose(rng).unwrap();
                        }
                        _ => {}
                    }
                }
                c
            };
            (candidate.join(" "), reference.join(" "))
        })
        .collect()
}

fn metric_fixed_points() -> Outcome {
    let gts = fixed_point_corpus();
    let mut failures = Vec::new();
    let mut notes = Vec::new();

    let preds: Vec<Prediction> = gts
        .iter()
        .map(|g| Prediction { id: g.id.clone(), text: reference_text(g, Stage::Grounding) })
        .collect();
    let loc = evaluate(&gts, &preds, &EvalConfig::new(Task::Loc)).map_err(|e| e.to_string())?;
    for t in ["0.3", "0.4", "0.5"] {
        let v = number(&loc, &format!("accuracy@{t}"));
        if (v - 1.0).abs() > FIXED_POINT_TOL {
            failures.push(format!("accuracy@{t}={v}"));
        }
    }

    let cls_preds: Vec<Prediction> = gts
        .iter()
        .map(|g| Prediction { id: g.id.clone(), text: reference_text(g, Stage::Diagnosis) })
        .collect();
    let cls = evaluate(&gts, &cls_preds, &EvalConfig::new(Task::Cls)).map_err(|e| e.to_string())?;
    for avg in ["micro", "macro", "weighted", "samples"] {
        for m in ["precision", "recall", "f1"] {
            let v = number(&cls, &format!("{avg}_{m}"));
            if (v - 1.0).abs() > FIXED_POINT_TOL {
                failures.push(format!("{avg}_{m}={v}"));
            }
        }
    }

    let text = evaluate(&gts, &preds, &EvalConfig::new(Task::Text)).map_err(|e| e.to_string())?;
    for key in ["rouge1", "rouge2", "rougeL", "rougeLsum", "bleu1", "bleu2", "bleu3", "bleu4", "meteor"] {
        let v = number(&text, key);
        if (v - 1.0).abs() > FIXED_POINT_TOL {
            failures.push(format!("{key}={v:.6}"));
        }
    }
    let cider = number(&text, "cider");
    if cider.is_nan() || cider <= CIDER_FLOOR {
        failures.push(format!("cider={cider}"));
    }
    notes.push(format!("cider={cider:.4}"));

    // identical texts reach the METEOR fragmentation floor, not 1
    let same = "a b c".to_string();
    let m = meteor_pair(&same, &same);
    let floor = 1.0 - 0.5 / 27.0;
    if (m - floor).abs() > FIXED_POINT_TOL {
        failures.push(format!("meteor identical 3-token pair {m} != {floor}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for run in 0..100 {
        let studies: Vec<(Vec<Finding>, Vec<Finding>)> = (0..rng.random_range(1..6))
            .map(|_| {
                let side = |rng: &mut ChaCha8Rng| -> Vec<Finding> {
                    (0..rng.random_range(0..5))
                        .map(|_| {
                            let (x, y) = (rng.random_range(0..60u8), rng.random_range(0..60u8));
                            let c = [x, y, x + rng.random_range(3..40u8), y + rng.random_range(3..40u8)];
                            finding(LocalLabel::ALL[rng.random_range(0..2)], c)
                        })
                        .collect()
                };
                (side(&mut rng), side(&mut rng))
            })
            .collect();
        let ts: Vec<f64> = (1..20).map(|i| f64::from(i) * 0.05).collect();
        let acc = accuracy_at_thresholds(&studies, &ts).map_err(|e| e.to_string())?;
        if acc.windows(2).any(|w| w[1].value > w[0].value) {
            failures.push(format!("accuracy rose with threshold on run {run}"));
        }
    }

    let mut violations = 0;
    let mut first = None;
    let corpora = 2000;
    for _ in 0..corpora {
        let pairs = fuzz_corpus(&mut rng);
        if let Some(v) = bleu_violation(&pairs) {
            violations += 1;
            first.get_or_insert((pairs, v));
        }
    }
    notes.push(format!("BLEU order violated on {violations}/{corpora} fuzzed corpora"));
    if let Some((pairs, (n, lower, higher))) = first {
        failures.push(format!("BLEU-{n}={higher:.4} > BLEU-{}={lower:.4} on {pairs:?}", n - 1));
    }

    // independent arithmetic for the pooled counterexample: p1 = 2/3, p2 = 1
    let pooled = vec![("x".to_string(), "y".to_string()), ("a b".to_string(), "a b".to_string())];
    let b = bleu(&pooled, 2);
    // 3 candidate tokens against 3 reference tokens: no brevity penalty
    let expect = [2.0f64 / 3.0, ((2.0f64 / 3.0).ln() / 2.0).exp()];
    let genuine = (b.cumulative[0] - expect[0]).abs() < FIXED_POINT_TOL
        && (b.cumulative[1] - expect[1]).abs() < FIXED_POINT_TOL
        && b.cumulative[1] > b.cumulative[0];
    notes.push(format!("pooled counterexample genuine={genuine}"));
    if !genuine {
        return Err(format!("BLEU counterexample did not reproduce: {:?}", b.cumulative));
    }

    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(format!("{} ({})", failures.join("; "), notes.join("; ")))
    }
}

// 7

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 { 0.0 } else { a as f64 / b as f64 }
}

/// Brute-force averages: [micro, macro, weighted, samples] x [p, r, f1].
fn oracle_averages(pairs: &[(BTreeSet<GlobalLabel>, BTreeSet<GlobalLabel>)]) -> [[f64; 3]; 4] {
    let classes = GlobalLabel::ALL;
    let mut per = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for c in classes {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for (t, p) in pairs {
            match (t.contains(c), p.contains(c)) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        per.push((p, r, f1(p, r), tp + fn_));
    }
    let k = classes.len() as f64;
    let (mp, mr) = (ratio(tp_all, tp_all + fp_all), ratio(tp_all, tp_all + fn_all));
    let macro_ = [per.iter().map(|x| x.0).sum::<f64>() / k, per.iter().map(|x| x.1).sum::<f64>() / k, per.iter().map(|x| x.2).sum::<f64>() / k];
    let total: usize = per.iter().map(|x| x.3).sum();
    let weigh = |f: fn(&(f64, f64, f64, usize)) -> f64| {
        if total == 0 { 0.0 } else { per.iter().map(|x| f(x) * x.3 as f64).sum::<f64>() / total as f64 }
    };
    let weighted = [weigh(|x| x.0), weigh(|x| x.1), weigh(|x| x.2)];
    let mut samples = [0.0; 3];
    for (t, p) in pairs {
        let inter = t.intersection(p).count();
        let (sp, sr) = (ratio(inter, p.len()), ratio(inter, t.len()));
        samples[0] += sp;
        samples[1] += sr;
        samples[2] += f1(sp, sr);
    }
    if !pairs.is_empty() {
        samples.iter_mut().for_each(|s| *s /= pairs.len() as f64);
    }
    [[mp, mr, f1(mp, mr)], macro_, weighted, samples]
}

fn classification_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let random_set = |rng: &mut ChaCha8Rng| -> BTreeSet<GlobalLabel> {
        GlobalLabel::ALL.iter().copied().filter(|_| rng.random_bool(0.35)).collect()
    };
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let pairs: Vec<_> = (0..rng.random_range(1..20)).map(|_| (random_set(&mut rng), random_set(&mut rng))).collect();
        let report = classification_report::<GlobalLabel>(&pairs);
        let want = oracle_averages(&pairs);
        let got = [report.micro(), report.macro_avg(), report.weighted(), report.samples()];
        for (g, w) in got.iter().zip(want) {
            for (a, b) in [g.precision, g.recall, g.f1].into_iter().zip(w) {
                worst = worst.max((a - b).abs());
            }
        }
        ensure(worst <= REPORT_TOL, || format!("case {case}: deviation {worst:e}"))?;
    }
    let report = classification_report::<GlobalLabel>(&[(BTreeSet::from([GlobalLabel::Copd]), BTreeSet::from([GlobalLabel::Copd]))]);
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    let mut layout: Vec<&str> = GlobalLabel::ALL.iter().map(|l| l.name()).collect();
    layout.extend(AVERAGE_ROWS);
    ensure(names == layout, || format!("rows {names:?}"))?;
    let table = report.render_table();
    ensure(layout.iter().all(|n| table.contains(n)), || "rendered table misses a row".into())?;
    Ok(format!("1000 instances, max deviation {worst:e}; 6 class rows + 4 averages"))
}

// 8

fn text_hand_fixtures() -> Outcome {
    let pair = |c: &str, r: &str| vec![(c.to_string(), r.to_string())];
    let b1 = bleu(&pair("the cat sat", "the cat sat on the mat"), 1).cumulative[0];
    let r1 = rouge_n_pair(&tokenize("the cat"), &tokenize("the cat sat"), 1);
    let m = meteor(&pair("a b c", "a b c"));
    let bleu_want = (-1.0f64).exp();
    let meteor_want = 1.0 - 0.5 * (1.0f64 / 3.0).powi(3);
    ensure((b1 - bleu_want).abs() < HAND_TOL, || format!("BLEU-1 {b1}"))?;
    ensure((r1.f1 - 0.8).abs() < HAND_TOL && (r1.precision - 1.0).abs() < HAND_TOL, || format!("ROUGE-1 {r1:?}"))?;
    ensure((m - meteor_want).abs() < HAND_TOL, || format!("METEOR {m}"))?;
    Ok(format!("BLEU-1 {b1:.4}, ROUGE-1 F {:.4}, METEOR {m:.4}", r1.f1))
}

// 9

fn garbage_line(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &[
        "<p>", "</p>", "{", "}", "<12>", "<999>", "<-3>", "<>", "Cardiomegaly", "Nodule/Mass", "No finding",
        "Local diseases of this chest radiograph are ", "Global diseases of this chest radiograph are ",
        "Pneumonia", "COPD", "tuberculosis", ",", ".", " ", "\u{feff}", "é", "🫁", "\t", "\\n", "<p><p>", "{<1><2><3>}",
    ];
    let mut s = String::new();
    for _ in 0..rng.random_range(0..30) {
        if rng.random_bool(0.15) {
            s.push(char::from_u32(rng.random_range(0x20..0x2FFF)).unwrap_or('?'));
        } else {
            s.push_str(PIECES.choose(rng).unwrap());
        }
    }
    s
}

fn in_unit(v: &Value) -> bool {
    v.as_f64().is_some_and(|x| (0.0..=1.0).contains(&x))
}

fn robustness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = fixed_point_corpus();
    let n = 10_000;
    let gts: Vec<GroundTruth> = (0..n)
        .map(|i| GroundTruth { id: format!("g{i}"), ..base[i % base.len()].clone() })
        .collect();
    let preds: Vec<Prediction> = gts.iter().map(|g| Prediction { id: g.id.clone(), text: garbage_line(&mut rng) }).collect();
    let mut tallied = 0;
    for task in [Task::Loc, Task::Cls, Task::Text] {
        let report = evaluate(&gts, &preds, &EvalConfig::new(task)).map_err(|e| format!("{task}: {e}"))?;
        for (k, v) in &report.metrics {
            let bounded = k != "cider" && k != "eligible_findings" && k != "empty_denominator" && k != "thresholds";
            if bounded {
                ensure(in_unit(v), || format!("{task} {k}={v}"))?;
            }
        }
        if task == Task::Text {
            ensure(report.metrics["cider"].as_f64().is_some_and(|c| c >= 0.0), || "cider negative".into())?;
        }
        tallied += report.warnings.values().sum::<usize>();
    }
    ensure(tallied > 0, || "no warnings tallied".into())?;
    within(start.elapsed(), ROBUSTNESS_LIMIT)?;
    Ok(format!("{n} lines x 3 tasks, {tallied} warnings tallied, {:?}", start.elapsed()))
}

// 10

fn write_fixture(dir: &Path) -> Result<(), String> {
    let io = |e: std::io::Error| e.to_string();
    let raw = dir.join("raw");
    fs::create_dir_all(&raw).map_err(io)?;
    let (w, h) = (200u32, 160u32);
    for (i, photometric) in [Photometric::Monochrome2, Photometric::Monochrome1, Photometric::Monochrome2].into_iter().enumerate() {
        let pixels = (0..w * h).map(|p| ((p % w) * 20 + (p / w) * 7 + i as u32 * 50) as u16).collect();
        let window = (i != 2).then_some((2000.0, 3000.0));
        let image = RawImage::new(pixels, ImageDims::new(w, h).unwrap(), 12, photometric, window.map(|x| x.0), window.map(|x| x.1))
            .map_err(|e| e.to_string())?;
        fs::write(raw.join(format!("study{i}.dcm")), encode_dicom(&image)).map_err(io)?;
    }
    for i in 3..5u32 {
        let bytes: Vec<u8> = (0..w * h).flat_map(|p| (((p * 13 + i) % 4096) as u16).to_le_bytes()).collect();
        fs::write(raw.join(format!("study{i}.raw")), bytes).map_err(io)?;
        let sidecar = serde_json::json!({
            "study_id": format!("study{i}"),
            "pixels_path": format!("study{i}.raw"),
            "width": w,
            "height": h,
            "photometric": "MONOCHROME2",
        });
        fs::write(raw.join(format!("study{i}.json")), sidecar.to_string()).map_err(io)?;
    }
    let csv = "\
image_id,rad_id,class_name,x_min,y_min,x_max,y_max
study0,R1,Cardiomegaly,76,77,170,104
study0,R2,Cardiomegaly,78,76,168,105
study0,R2,Aortic enlargement,112,27,134,45
study0,R1,COPD,,,,
study1,R1,No finding,,,,
study1,R3,No finding,,,,
study2,R1,Pleural effusion,20,90,60,150
study2,R1,Pneumonia,,,,
study2,R2,Tuberculosis,,,,
study3,R2,Nodule/Mass,140,40,156,56
study3,R2,Lung tumor,,,,
study4,R1,Infiltration,40,60,90,120
study4,R3,Lung Opacity,42,62,88,118
study4,R3,Other disease,,,,
";
    fs::write(dir.join("annotations.csv"), csv).map_err(io)
}

fn run_cli(args: &[String]) -> Result<(), String> {
    let mut sink = Vec::new();
    let code = groundcxr::cli::run_with(std::iter::once("groundcxr".to_string()).chain(args.iter().cloned()), &mut sink);
    ensure(code == 0, || format!("{args:?} exited {code}: {}", String::from_utf8_lossy(&sink)))
}

fn pipeline(dir: &Path, jobs: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let p = |name: &str| dir.join(name).display().to_string();
    let jobs = jobs.to_string();
    let cmd = |rest: &[&str]| {
        let mut args = vec!["--jobs".to_string(), jobs.clone()];
        args.extend(rest.iter().map(|s| s.to_string()));
        run_cli(&args)
    };
    cmd(&["preprocess", &p("raw"), "--out-dir", &p("png")])?;
    let index = p("png/studies.jsonl");
    for (stage, out, gt) in [("1", "stage1.jsonl", "gt1.jsonl"), ("2", "stage2.jsonl", "gt2.jsonl")] {
        cmd(&["build-dataset", "--stage", stage, "--annotations", &p("annotations.csv"), "--images", &index, "--out", &p(out), "--gt-out", &p(gt)])?;
    }
    let records: Vec<StageRecord> = read_jsonl(&dir.join("stage1.jsonl"))?;
    let preds: Vec<String> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let id = r.image.trim_end_matches(".png");
            let text = if i == 0 { r.target.replace("<1", "<2") } else { r.target.clone() };
            serde_json::json!({ "id": id, "text": text }).to_string() + "\n"
        })
        .collect();
    fs::write(dir.join("pred.jsonl"), preds.concat()).map_err(|e| e.to_string())?;
    for task in ["loc", "cls", "text"] {
        cmd(&["eval", "--task", task, "--gt", &p("gt1.jsonl"), "--pred", &p("pred.jsonl"), "--out", &p(&format!("eval_{task}.json"))])?;
    }
    let mut files = BTreeMap::new();
    for entry in walk(dir)? {
        if entry.extension().is_some_and(|e| e == "png" || e == "jsonl" || e == "json") && !entry.starts_with(dir.join("raw")) {
            let key = entry.strip_prefix(dir).unwrap().display().to_string();
            files.insert(key, fs::read(&entry).map_err(|e| e.to_string())?);
        }
    }
    Ok(files)
}

fn walk(dir: &Path) -> Result<Vec<std::path::PathBuf>, String> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.is_dir() { out.extend(walk(&path)?) } else { out.push(path) }
    }
    Ok(out)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, String> {
    Ok(groundcxr::jsonl::read_jsonl(path).map_err(|e| e.to_string())?.into_iter().map(|(_, v)| v).collect())
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for jobs in [1, 8] {
        // same absolute paths for both runs so path-bearing outputs are comparable
        let dir = tmp.path().join("work");
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
        }
        write_fixture(&dir)?;
        runs.push(pipeline(&dir, jobs)?);
    }
    let dir = tmp.path().join("work");
    let pngs = runs[0].keys().filter(|k| k.ends_with(".png")).count();
    ensure(pngs == 5, || format!("{pngs} images"))?;
    ensure(runs[0] == runs[1], || {
        let differing: Vec<&String> = runs[0].keys().filter(|k| runs[0].get(*k) != runs[1].get(*k)).collect();
        format!("outputs differ between --jobs 1 and 8: {differing:?}")
    })?;

    let stage1: Vec<StageRecord> = read_jsonl(&dir.join("stage1.jsonl"))?;
    let gt1: Vec<GroundTruth> = read_jsonl(&dir.join("gt1.jsonl"))?;
    let by_id: BTreeMap<&str, &GroundTruth> = gt1.iter().map(|g| (g.id.as_str(), g)).collect();
    ensure(!stage1.is_empty(), || "no stage-1 records".into())?;
    for r in &stage1 {
        let id = r.image.trim_end_matches(".png");
        let gt = by_id.get(id).ok_or_else(|| format!("{id} missing from ground truth"))?;
        let parsed = parse_grounded_report(&r.target);
        ensure(parsed.warnings.is_empty() && parsed.value.findings == gt.findings, || format!("{id}: stage-1 target {:?}", r.target))?;
    }
    let stage2: Vec<StageRecord> = read_jsonl(&dir.join("stage2.jsonl"))?;
    let gt2: Vec<GroundTruth> = read_jsonl(&dir.join("gt2.jsonl"))?;
    let by_id: BTreeMap<&str, &GroundTruth> = gt2.iter().map(|g| (g.id.as_str(), g)).collect();
    ensure(!stage2.is_empty(), || "no stage-2 records".into())?;
    for r in &stage2 {
        let id = r.image.trim_end_matches(".png");
        let gt = by_id.get(id).ok_or_else(|| format!("{id} missing from ground truth"))?;
        let parsed = parse_diagnoses(&r.target);
        ensure(parsed.warnings.is_empty() && parsed.value == gt.global, || format!("{id}: stage-2 target {:?}", r.target))?;
        let set = DiagnosisSet::new(gt.global.iter().copied()).map_err(|e| e.to_string())?;
        ensure(serialize_diagnoses(&set) == r.target, || format!("{id}: stage-2 target not canonical"))?;
    }
    let loc: Value = serde_json::from_slice(&runs[0]["eval_loc.json"]).map_err(|e| e.to_string())?;
    let acc = loc["metrics"]["accuracy@0.5"].as_f64().unwrap_or(f64::NAN);
    ensure((0.0..=1.0).contains(&acc), || format!("accuracy@0.5 {acc}"))?;
    Ok(format!(
        "5 studies, {} stage-1 / {} stage-2 records re-parse to sources; {} output files identical at --jobs 1 and 8; accuracy@0.5={acc:.3}",
        stage1.len(),
        stage2.len(),
        runs[0].len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "codec fidelity", codec_fidelity),
        (2, "geometry oracle equivalence", geometry_oracle),
        (3, "dedup properties", dedup_properties),
        (4, "preprocessing bit-exactness", preprocessing),
        (5, "fusion shape algebra", fusion_shapes),
        (6, "metric fixed points and monotonicity", metric_fixed_points),
        (7, "classification report oracle", classification_oracle),
        (8, "text metric hand fixtures", text_hand_fixtures),
        (9, "robustness", robustness),
        (10, "end-to-end pipeline", end_to_end),
    ];
    let mut red = Vec::new();
    for (n, name, check) in criteria {
        match check() {
            Ok(detail) => println!("criterion {n}: PASS {name}: {detail}"),
            Err(detail) => {
                let tag = if EXPECTED_RED.contains(&n) { " (expected)" } else { "" };
                println!("criterion {n}: FAIL{tag} {name}: {detail}");
                red.push(n);
            }
        }
    }
    let passed = criteria.len() - red.len();
    println!("acceptance: {passed}/{} passed; failing {red:?}; expected failing {EXPECTED_RED:?}", criteria.len());
    if red != EXPECTED_RED {
        std::process::exit(1);
    }
}
