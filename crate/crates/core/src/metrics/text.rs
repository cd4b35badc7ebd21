//! N-gram text metrics: BLEU, ROUGE, METEOR and CIDEr-D.
//!
//! All metrics share one tokenizer: lowercase, ASCII punctuation split into
//! its own tokens, whitespace split. Inputs are expected to have had their
//! box groups stripped already.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const BLEU_MAX_N: usize = 4;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;
pub const CIDER_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_punctuation() {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Matches clipped at the reference count.
fn clipped_overlap(cand: &HashMap<&[String], usize>, refs: &HashMap<&[String], usize>) -> usize {
    cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    /// Cumulative BLEU-1 ..= BLEU-n.
    pub cumulative: Vec<f64>,
    /// Modified n-gram precisions p_1 ..= p_n.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

/// Corpus-level BLEU without smoothing.
///
/// Clipped n-gram matches and totals are pooled over all pairs; the brevity
/// penalty uses pooled lengths. A zero precision zeroes every cumulative
/// score that includes it.
pub fn bleu(pairs: &[(String, String)], max_n: usize) -> BleuScores {
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0, 0);
    for (cand, reference) in pairs {
        let c = tokenize(cand);
        let r = tokenize(reference);
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            matches[n - 1] += clipped_overlap(&cc, &rc);
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut cumulative = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    for (k, &p) in precisions.iter().enumerate() {
        log_sum += if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        let score = if log_sum.is_finite() { bp * (log_sum / (k + 1) as f64).exp() } else { 0.0 };
        cumulative.push(score);
    }
    BleuScores { cumulative, precisions, brevity_penalty: bp, candidate_length: cand_len, reference_length: ref_len }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_hits(hits: usize, cand_total: usize, ref_total: usize) -> Self {
        let precision = if cand_total == 0 { 0.0 } else { hits as f64 / cand_total as f64 };
        let recall = if ref_total == 0 { 0.0 } else { hits as f64 / ref_total as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }
}

pub fn rouge_n_pair(cand: &[String], reference: &[String], n: usize) -> Prf {
    let cc = ngram_counts(cand, n);
    let rc = ngram_counts(reference, n);
    let hits = clipped_overlap(&cc, &rc);
    Prf::from_hits(hits, cand.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

fn lcs_table(a: &[String], b: &[String]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t
}

pub fn rouge_l_pair(cand: &[String], reference: &[String]) -> Prf {
    let lcs = lcs_table(cand, reference)[cand.len()][reference.len()];
    Prf::from_hits(lcs, cand.len(), reference.len())
}

/// Positions in `reference` covered by one LCS with `cand`.
fn lcs_positions(reference: &[String], cand: &[String]) -> Vec<usize> {
    let t = lcs_table(reference, cand);
    let (mut i, mut j) = (reference.len(), cand.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == cand[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i - 1][j] >= t[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// Summary-level ROUGE-L over newline-separated sentences (union LCS).
pub fn rouge_lsum_pair(cand: &str, reference: &str) -> Prf {
    let split = |s: &str| -> Vec<Vec<String>> {
        s.lines().map(tokenize).filter(|t| !t.is_empty()).collect()
    };
    let cand_sents = split(cand);
    let ref_sents = split(reference);
    let mut cand_budget: HashMap<&str, usize> = HashMap::new();
    for t in cand_sents.iter().flatten() {
        *cand_budget.entry(t).or_default() += 1;
    }
    let mut ref_budget: HashMap<&str, usize> = HashMap::new();
    for t in ref_sents.iter().flatten() {
        *ref_budget.entry(t).or_default() += 1;
    }
    let cand_total: usize = cand_sents.iter().map(Vec::len).sum();
    let ref_total: usize = ref_sents.iter().map(Vec::len).sum();

    let mut hits = 0;
    for r in &ref_sents {
        let mut union: Vec<usize> = cand_sents.iter().flat_map(|c| lcs_positions(r, c)).collect();
        union.sort_unstable();
        union.dedup();
        for pos in union {
            let tok = r[pos].as_str();
            let (Some(cb), Some(rb)) = (cand_budget.get_mut(tok), ref_budget.get_mut(tok)) else { continue };
            if *cb > 0 && *rb > 0 {
                *cb -= 1;
                *rb -= 1;
                hits += 1;
            }
        }
    }
    Prf::from_hits(hits, cand_total, ref_total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub rouge_lsum: f64,
}

/// Mean per-pair F1 for ROUGE-1/2/L/Lsum.
pub fn rouge(pairs: &[(String, String)]) -> RougeScores {
    if pairs.is_empty() {
        return RougeScores::default();
    }
    let per_pair: Vec<[f64; 4]> = pairs
        .par_iter()
        .map(|(c, r)| {
            let (ct, rt) = (tokenize(c), tokenize(r));
            [
                rouge_n_pair(&ct, &rt, 1).f1,
                rouge_n_pair(&ct, &rt, 2).f1,
                rouge_l_pair(&ct, &rt).f1,
                rouge_lsum_pair(c, r).f1,
            ]
        })
        .collect();
    let n = pairs.len() as f64;
    let mean = |k: usize| per_pair.iter().map(|s| s[k]).sum::<f64>() / n;
    RougeScores { rouge1: mean(0), rouge2: mean(1), rouge_l: mean(2), rouge_lsum: mean(3) }
}

/// Crude suffix stripper used for METEOR's second matching stage.
pub fn stem(word: &str) -> String {
    const MIN_STEM: usize = 3;
    if let Some(base) = word.strip_suffix("ies") {
        if base.chars().count() >= MIN_STEM - 1 {
            return format!("{base}y");
        }
    }
    for sibilant in ["ches", "shes", "sses", "xes", "zes"] {
        if word.len() > sibilant.len() + 1 && word.ends_with(sibilant) {
            return word[..word.len() - 2].to_string();
        }
    }
    for suffix in ["ings", "ing", "edly", "ed", "ly", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= MIN_STEM {
                return base.to_string();
            }
        }
    }
    word.to_string()
}

/// Cand-to-ref alignment: exact matches first, then stem matches. Prefers
/// continuing the current chunk, otherwise the leftmost free reference token.
fn meteor_align(cand: &[String], reference: &[String]) -> Vec<Option<usize>> {
    let mut align: Vec<Option<usize>> = vec![None; cand.len()];
    let mut used = vec![false; reference.len()];
    let cand_stems: Vec<String> = cand.iter().map(|w| stem(w)).collect();
    let ref_stems: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    for stage in 0..2 {
        for i in 0..cand.len() {
            if align[i].is_some() {
                continue;
            }
            let matches = |j: usize| {
                !used[j]
                    && match stage {
                        0 => cand[i] == reference[j],
                        _ => cand_stems[i] == ref_stems[j],
                    }
            };
            let continued = i
                .checked_sub(1)
                .and_then(|p| align[p])
                .map(|j| j + 1)
                .filter(|&j| j < reference.len() && matches(j));
            if let Some(j) = continued.or_else(|| (0..reference.len()).find(|&j| matches(j))) {
                align[i] = Some(j);
                used[j] = true;
            }
        }
    }
    align
}

/// Number of maximal runs that are contiguous in both candidate and reference.
pub fn count_chunks(align: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in align {
        match (a, prev) {
            (Some(j), Some(p)) if *j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *a;
    }
    chunks
}

/// METEOR from match and chunk counts.
pub fn meteor_formula(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / cand_len as f64;
    let r = matches as f64 / ref_len as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / matches as f64).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

pub fn meteor_pair(cand: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(cand), tokenize(reference));
    let align = meteor_align(&c, &r);
    let matches = align.iter().flatten().count();
    meteor_formula(matches, count_chunks(&align), c.len(), r.len())
}

/// Mean per-pair METEOR.
pub fn meteor(pairs: &[(String, String)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let per_pair: Vec<f64> = pairs.par_iter().map(|(c, r)| meteor_pair(c, r)).collect();
    per_pair.iter().sum::<f64>() / pairs.len() as f64
}

type NgramVec = Vec<BTreeMap<Vec<String>, f64>>;

struct CiderDoc {
    counts: Vec<BTreeMap<Vec<String>, usize>>,
    len: usize,
}

impl CiderDoc {
    fn new(text: &str) -> Self {
        let tokens = tokenize(text);
        let counts = (1..=CIDER_N)
            .map(|n| {
                let mut m = BTreeMap::new();
                for w in tokens.windows(n) {
                    *m.entry(w.to_vec()).or_insert(0) += 1;
                }
                m
            })
            .collect();
        Self { counts, len: tokens.len() }
    }

    fn tfidf(&self, df: &HashMap<Vec<String>, usize>, log_docs: f64) -> (NgramVec, Vec<f64>) {
        let mut vecs = Vec::with_capacity(CIDER_N);
        let mut norms = Vec::with_capacity(CIDER_N);
        for counts in &self.counts {
            let mut v = BTreeMap::new();
            let mut norm = 0.0;
            for (g, &tf) in counts {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                let w = tf as f64 * (log_docs - d.ln());
                norm += w * w;
                v.insert(g.clone(), w);
            }
            vecs.push(v);
            norms.push(norm.sqrt());
        }
        (vecs, norms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderScores {
    /// Mean over pairs, on the 0–10 scale.
    pub score: f64,
    pub per_pair: Vec<f64>,
    /// Fewer than two documents: every IDF weight is zero.
    pub degenerate_idf: bool,
}

/// CIDEr-D with one reference per candidate; IDF comes from the references.
pub fn cider(pairs: &[(String, String)]) -> CiderScores {
    let cands: Vec<CiderDoc> = pairs.par_iter().map(|(c, _)| CiderDoc::new(c)).collect();
    let refs: Vec<CiderDoc> = pairs.par_iter().map(|(_, r)| CiderDoc::new(r)).collect();
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for r in &refs {
        for counts in &r.counts {
            for g in counts.keys() {
                *df.entry(g.clone()).or_insert(0) += 1;
            }
        }
    }
    let log_docs = (pairs.len().max(1) as f64).ln();
    let per_pair: Vec<f64> = cands
        .par_iter()
        .zip(refs.par_iter())
        .map(|(c, r)| {
            let (vc, nc) = c.tfidf(&df, log_docs);
            let (vr, nr) = r.tfidf(&df, log_docs);
            let delta = c.len as f64 - r.len as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            let mut total = 0.0;
            for n in 0..CIDER_N {
                let mut val: f64 = vc[n]
                    .iter()
                    .map(|(g, &wc)| {
                        let wr = vr[n].get(g).copied().unwrap_or(0.0);
                        wc.min(wr) * wr
                    })
                    .sum();
                if nc[n] != 0.0 && nr[n] != 0.0 {
                    val /= nc[n] * nr[n];
                }
                total += val * penalty;
            }
            total / CIDER_N as f64 * CIDER_SCALE
        })
        .collect();
    let score = if per_pair.is_empty() { 0.0 } else { per_pair.iter().sum::<f64>() / per_pair.len() as f64 };
    CiderScores { score, per_pair, degenerate_idf: pairs.len() < 2 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub rouge: RougeScores,
    pub bleu: BleuScores,
    pub meteor: f64,
    pub cider: CiderScores,
}

pub fn text_scores(pairs: &[(String, String)]) -> TextScores {
    TextScores { rouge: rouge(pairs), bleu: bleu(pairs, BLEU_MAX_N), meteor: meteor(pairs), cider: cider(pairs) }
}
