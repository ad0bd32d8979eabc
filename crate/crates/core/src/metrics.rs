//! Corpus-level BLEU-4, ROUGE-4 and PARENT, plus an entity-overlap proxy.
//!
//! All metrics operate on token sequences. [`evaluate_corpus`] tokenizes raw
//! strings with the shared tokenizer, lowercased.
//!
//! PARENT uses word-overlap entailment: an n-gram is entailed by the table
//! with probability equal to the fraction of its tokens that occur in some
//! table value. Per-example details:
//!
//! * precision of order n = Σ_g c(g)·(p_ref(g) + (1 − p_ref(g))·w(g)) / Σ_g c(g),
//!   with p_ref(g) = min(1, c_ref(g)/c(g)) over hypothesis n-grams g;
//! * reference recall of order n = Σ_g c_ref(g)·p_hyp(g)·w(g) / Σ_g c_ref(g)·w(g);
//! * orders with an empty denominator are left out of the geometric mean, and a
//!   zero order value enters it as 1e-5; with no usable order the term is 1
//!   (0 for precision of an empty hypothesis);
//! * table recall = mean over non-empty values of LCS(value, hyp)/|value|, and 1
//!   for a table without values;
//! * recall = ref_recall^(1−λ) · table_recall^λ.
//!
//! Corpus precision and recall are the means of the per-example values, and
//! corpus F1 is their harmonic mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Table;
use crate::error::{Error, Result};
use crate::tokenizer::tokenize_lower;

pub const MAX_ORDER: usize = 4;
const PARENT_ZERO_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

fn check_aligned(hyp_len: usize, ref_len: usize) -> Result<()> {
    if hyp_len != ref_len {
        return Err(Error::LengthMismatch {
            left_name: "hypotheses".into(),
            left: hyp_len,
            right_name: "references".into(),
            right: ref_len,
        });
    }
    if hyp_len == 0 {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    Ok(())
}

/// Clipped matches and total count of order-`n` hypothesis n-grams.
pub fn clipped_ngram_matches(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let rc = ngram_counts(reference, n);
    let (mut matched, mut total) = (0, 0);
    for (g, c) in ngram_counts(hyp, n) {
        matched += c.min(rc.get(g).copied().unwrap_or(0));
        total += c;
    }
    (matched, total)
}

/// Corpus BLEU with clipped n-gram precisions for n = 1..4 and brevity
/// penalty, scaled to [0, 100]. Unsmoothed: any order with no matches, or no
/// hypothesis n-grams at all, yields 0.
pub fn bleu4(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_aligned(hyps.len(), refs.len())?;
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let (m, t) = clipped_ngram_matches(h, r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if hyp_len == 0 || matches.iter().zip(&totals).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_mean = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((100.0 * bp * log_mean.exp()).clamp(0.0, 100.0))
}

/// Corpus ROUGE-4 from clipped 4-gram overlap. Sequences shorter than four
/// tokens contribute no 4-grams to either denominator.
pub fn rouge4(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<Prf> {
    check_aligned(hyps.len(), refs.len())?;
    let (mut overlap, mut hyp_total, mut ref_total) = (0usize, 0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let hc = ngram_counts(h, 4);
        let rc = ngram_counts(r, 4);
        hyp_total += hc.values().sum::<usize>();
        ref_total += rc.values().sum::<usize>();
        for (g, c) in &hc {
            overlap += (*c).min(rc.get(g).copied().unwrap_or(0));
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(Prf::new(ratio(overlap, hyp_total), ratio(overlap, ref_total)))
}

/// A table prepared for PARENT: lowercased value token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct ParentTable {
    values: Vec<Vec<String>>,
}

impl ParentTable {
    pub fn new(values: Vec<Vec<String>>) -> Self {
        Self {
            values: values.into_iter().filter(|v| !v.is_empty()).collect(),
        }
    }

    pub fn from_table(table: &Table) -> Self {
        Self::new(table.pairs().iter().map(|p| tokenize_lower(p.value())).collect())
    }

    fn entailment(&self, gram: &[String]) -> f64 {
        let hits = gram
            .iter()
            .filter(|t| self.values.iter().any(|v| v.contains(t)))
            .count();
        hits as f64 / gram.len() as f64
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn geometric_mean(orders: &[f64], empty: f64) -> f64 {
    if orders.is_empty() {
        return empty;
    }
    let s: f64 = orders
        .iter()
        .map(|&v| if v > 0.0 { v.ln() } else { PARENT_ZERO_FLOOR.ln() })
        .sum();
    (s / orders.len() as f64).exp()
}

/// PARENT for a single example; see the module docs for the exact definition.
pub fn parent_example(hyp: &[String], reference: &[String], table: &ParentTable, lambda: f64) -> Prf {
    if hyp.is_empty() {
        return Prf::default();
    }
    let mut precisions = Vec::with_capacity(MAX_ORDER);
    let mut ref_recalls = Vec::with_capacity(MAX_ORDER);
    for n in 1..=MAX_ORDER {
        let hc = ngram_counts(hyp, n);
        let rc = ngram_counts(reference, n);
        let (mut num, mut den) = (0.0, 0.0);
        for (g, &c) in &hc {
            let in_ref = (rc.get(g).copied().unwrap_or(0) as f64 / c as f64).min(1.0);
            num += c as f64 * (in_ref + (1.0 - in_ref) * table.entailment(g));
            den += c as f64;
        }
        if den > 0.0 {
            precisions.push(num / den);
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (g, &c) in &rc {
            let w = table.entailment(g);
            let in_hyp = (hc.get(g).copied().unwrap_or(0) as f64 / c as f64).min(1.0);
            num += c as f64 * in_hyp * w;
            den += c as f64 * w;
        }
        if den > 0.0 {
            ref_recalls.push(num / den);
        }
    }
    let precision = geometric_mean(&precisions, 0.0);
    let ref_recall = geometric_mean(&ref_recalls, 1.0);
    let table_recall = if table.values.is_empty() {
        1.0
    } else {
        table
            .values
            .iter()
            .map(|v| lcs_len(v, hyp) as f64 / v.len() as f64)
            .sum::<f64>()
            / table.values.len() as f64
    };
    let recall = ref_recall.powf(1.0 - lambda) * table_recall.powf(lambda);
    Prf::new(precision.clamp(0.0, 1.0), recall.clamp(0.0, 1.0))
}

/// Corpus PARENT: means of per-example precision and recall, F1 from those means.
pub fn parent(hyps: &[Vec<String>], refs: &[Vec<String>], tables: &[ParentTable], lambda: f64) -> Result<Prf> {
    check_aligned(hyps.len(), refs.len())?;
    if tables.len() != hyps.len() {
        return Err(Error::LengthMismatch {
            left_name: "hypotheses".into(),
            left: hyps.len(),
            right_name: "tables".into(),
            right: tables.len(),
        });
    }
    let (mut p, mut r) = (0.0, 0.0);
    for ((h, rf), t) in hyps.iter().zip(refs).zip(tables) {
        let e = parent_example(h, rf, t, lambda);
        p += e.precision;
        r += e.recall;
    }
    let n = hyps.len() as f64;
    Ok(Prf::new(p / n, r / n))
}

fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn is_content(token: &str) -> bool {
    token.chars().any(char::is_alphanumeric)
}

/// `supported` counts values whose full token sequence occurs in the
/// hypothesis. `contradicted` counts the remaining values that share at least
/// one alphanumeric token with it. Matching is case-insensitive.
pub fn entity_overlap_report(hypothesis: &str, table: &Table) -> (usize, usize) {
    let hyp = tokenize_lower(hypothesis);
    let (mut supported, mut contradicted) = (0, 0);
    for pair in table.pairs() {
        let value = tokenize_lower(pair.value());
        if value.is_empty() {
            continue;
        }
        if contains_subsequence(&hyp, &value) {
            supported += 1;
        } else if value.iter().any(|t| is_content(t) && hyp.contains(t)) {
            contradicted += 1;
        }
    }
    (supported, contradicted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub parent_lambda: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { parent_lambda: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge4_precision: f64,
    pub rouge4_recall: f64,
    pub rouge4_f1: f64,
    pub parent_precision: f64,
    pub parent_recall: f64,
    pub parent_f1: f64,
    pub n_examples: usize,
    pub entities_supported: usize,
    pub entities_contradicted: usize,
    pub parent_lambda: f64,
    pub parent_entailment: String,
    pub tokenization: String,
    /// Input file name to SHA-256, filled in by callers that read files.
    pub input_checksums: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Range and harmonic-mean consistency of every field.
    pub fn check_invariants(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let hm = |p: f64, r: f64, f: f64| (harmonic_mean(p, r) - f).abs() <= 1e-9;
        (0.0..=100.0).contains(&self.bleu4)
            && [
                self.rouge4_precision,
                self.rouge4_recall,
                self.rouge4_f1,
                self.parent_precision,
                self.parent_recall,
                self.parent_f1,
            ]
            .into_iter()
            .all(unit)
            && hm(self.rouge4_precision, self.rouge4_recall, self.rouge4_f1)
            && hm(self.parent_precision, self.parent_recall, self.parent_f1)
    }
}

/// Scores raw hypothesis strings against references and their tables.
pub fn evaluate_corpus<S: AsRef<str>, R: AsRef<str>>(
    hyps: &[S],
    refs: &[R],
    tables: &[Table],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    check_aligned(hyps.len(), refs.len())?;
    let h: Vec<Vec<String>> = hyps.iter().map(|s| tokenize_lower(s.as_ref())).collect();
    let r: Vec<Vec<String>> = refs.iter().map(|s| tokenize_lower(s.as_ref())).collect();
    let t: Vec<ParentTable> = tables.iter().map(ParentTable::from_table).collect();
    let bleu = bleu4(&h, &r)?;
    let rouge = rouge4(&h, &r)?;
    let par = parent(&h, &r, &t, cfg.parent_lambda)?;
    let (mut supported, mut contradicted) = (0, 0);
    for (hyp, table) in hyps.iter().zip(tables) {
        let (s, c) = entity_overlap_report(hyp.as_ref(), table);
        supported += s;
        contradicted += c;
    }
    Ok(MetricReport {
        bleu4: bleu,
        rouge4_precision: rouge.precision,
        rouge4_recall: rouge.recall,
        rouge4_f1: rouge.f1,
        parent_precision: par.precision,
        parent_recall: par.recall,
        parent_f1: par.f1,
        n_examples: hyps.len(),
        entities_supported: supported,
        entities_contradicted: contradicted,
        parent_lambda: cfg.parent_lambda,
        parent_entailment: "word_overlap".into(),
        tokenization: "shared_lowercase".into(),
        input_checksums: BTreeMap::new(),
    })
}
