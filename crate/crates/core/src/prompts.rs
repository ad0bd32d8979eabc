//! Knowledge-augmentation pairs: corpus sentences with table values masked out.
//!
//! Entity detection is exact token matching against full attribute values,
//! case-insensitive, leftmost-longest and non-overlapping. Each detected span is
//! replaced by a single `<mask>` token; the reconstruction target is the
//! untouched sentence.

use std::fmt::Write as _;

use crate::data::{PrototypeCorpus, Table};
use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, MASK};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpan {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub source_attribute: String,
    /// Sentence tokens in `[start, end)` joined by single spaces.
    pub matched_value: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedPrompt {
    pub table_id: String,
    pub masked_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    /// Original tokens behind each `<mask>`, in order.
    pub span_tokens: Vec<Vec<String>>,
}

impl MaskedPrompt {
    /// Substitutes the recorded span tokens back into the masked sequence.
    pub fn unmask(&self) -> Vec<String> {
        let mut spans = self.span_tokens.iter();
        let mut out = Vec::with_capacity(self.target_tokens.len());
        for tok in &self.masked_tokens {
            if tok == MASK {
                if let Some(span) = spans.next() {
                    out.extend(span.iter().cloned());
                    continue;
                }
            }
            out.push(tok.clone());
        }
        out
    }

    pub fn mask_count(&self) -> usize {
        self.masked_tokens.iter().filter(|t| *t == MASK).count()
    }
}

struct ValuePattern<'t> {
    attribute: &'t str,
    tokens: Vec<String>,
}

fn value_patterns(table: &Table) -> Vec<ValuePattern<'_>> {
    table
        .pairs()
        .iter()
        .filter_map(|p| {
            let tokens: Vec<String> = tokenize(p.value()).iter().map(|t| t.to_lowercase()).collect();
            (!tokens.is_empty()).then_some(ValuePattern {
                attribute: p.attribute(),
                tokens,
            })
        })
        .collect()
}

/// Detects table values in a tokenized sentence.
pub fn detect_entities<S: AsRef<str>>(sentence: &[S], table: &Table) -> Vec<EntitySpan> {
    let lowered: Vec<String> = sentence.iter().map(|t| t.as_ref().to_lowercase()).collect();
    let patterns = value_patterns(table);
    let mut spans = Vec::new();
    let mut i = 0;
    while i < lowered.len() {
        let mut best: Option<&ValuePattern> = None;
        for p in &patterns {
            let len = p.tokens.len();
            if i + len <= lowered.len()
                && lowered[i..i + len] == p.tokens[..]
                && best.is_none_or(|b| len > b.tokens.len())
            {
                best = Some(p);
            }
        }
        match best {
            Some(p) => {
                let end = i + p.tokens.len();
                let matched: Vec<&str> = sentence[i..end].iter().map(|t| t.as_ref()).collect();
                spans.push(EntitySpan {
                    start: i,
                    end,
                    source_attribute: p.attribute.to_string(),
                    matched_value: matched.join(" "),
                });
                i = end;
            }
            None => i += 1,
        }
    }
    spans
}

/// Replaces every span by one `<mask>`. Returns `Ok(None)` when there are no
/// spans, since such a sentence yields no training pair.
pub fn mask_entities<S: AsRef<str>>(
    table_id: &str,
    sentence: &[S],
    spans: &[EntitySpan],
) -> Result<Option<MaskedPrompt>> {
    if spans.is_empty() {
        return Ok(None);
    }
    let mut prev_end = 0;
    for s in spans {
        if s.start >= s.end || s.end > sentence.len() || s.start < prev_end {
            return Err(Error::InvalidInput(format!(
                "span [{}, {}) is empty, out of bounds or overlaps its predecessor",
                s.start, s.end
            )));
        }
        prev_end = s.end;
    }
    let target: Vec<String> = sentence.iter().map(|t| t.as_ref().to_string()).collect();
    let mut masked = Vec::with_capacity(target.len());
    let mut span_tokens = Vec::with_capacity(spans.len());
    let mut cursor = 0;
    for s in spans {
        masked.extend_from_slice(&target[cursor..s.start]);
        masked.push(MASK.to_string());
        span_tokens.push(target[s.start..s.end].to_vec());
        cursor = s.end;
    }
    masked.extend_from_slice(&target[cursor..]);
    Ok(Some(MaskedPrompt {
        table_id: table_id.to_string(),
        masked_tokens: masked,
        target_tokens: target,
        span_tokens,
    }))
}

/// One masked prompt per corpus sentence with at least one detected span,
/// ordered by table id and then corpus position. Sentences that already
/// contain a literal `<mask>` are skipped. `max_masks` keeps only the first
/// spans of each sentence.
pub fn build_augmentation_pairs(
    corpus: &PrototypeCorpus,
    tables: &[Table],
    max_masks: Option<usize>,
) -> Vec<MaskedPrompt> {
    let mut sorted: Vec<&Table> = tables.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));
    let mut out = Vec::new();
    for table in sorted {
        for sentence in corpus.candidates(table.id()) {
            let tokens = tokenize(sentence);
            if tokens.iter().any(|t| t == MASK) {
                continue;
            }
            let mut spans = detect_entities(&tokens, table);
            if let Some(limit) = max_masks {
                spans.truncate(limit);
            }
            if let Ok(Some(prompt)) = mask_entities(table.id(), &tokens, &spans) {
                out.push(prompt);
            }
        }
    }
    out
}

/// A cached knowledge-augmentation pair, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KaRecord {
    pub table_id: String,
    pub masked: Vec<String>,
    pub target: Vec<String>,
}

impl From<&MaskedPrompt> for KaRecord {
    fn from(p: &MaskedPrompt) -> Self {
        Self {
            table_id: p.table_id.clone(),
            masked: p.masked_tokens.clone(),
            target: p.target_tokens.clone(),
        }
    }
}

/// `table_id<TAB>masked<TAB>target`, tokens joined by spaces, one pair per line.
pub fn format_ka_cache(records: &[KaRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}", r.table_id, r.masked.join(" "), r.target.join(" "));
    }
    out
}

pub fn parse_ka_cache(text: &str) -> Result<Vec<KaRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected `table_id<TAB>masked<TAB>target`".into(),
                });
            }
            let split = |s: &str| s.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
            Ok(KaRecord {
                table_id: fields[0].to_string(),
                masked: split(fields[1]),
                target: split(fields[2]),
            })
        })
        .collect()
}
