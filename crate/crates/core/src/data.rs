//! Tables, references, the unlabeled per-table corpus, and few-shot splits.
//!
//! Dataset lines look like `id<TAB>attr=value<US>attr=value...<TAB>reference`
//! where `<US>` is the unit separator byte `0x1F`. Fields may escape a literal
//! tab, newline, backslash or `=` with a backslash (`\t`, `\n`, `\\`, `\=`).
//! Corpus lines are `id<TAB>sentence`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNIT_SEPARATOR: char = '\u{1f}';
pub const PAIR_SEPARATOR: &str = "; ";

/// Training-set sizes used by the few-shot protocol.
pub const FEW_SHOT_SIZES: [usize; 4] = [50, 100, 200, 500];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeValuePair {
    attribute: String,
    value: String,
}

impl AttributeValuePair {
    pub fn new(attribute: impl Into<String>, value: impl Into<String>) -> Result<Self> {
        let attribute = attribute.into();
        if attribute.trim().is_empty() {
            return Err(Error::InvalidInput(
                "attribute must contain a non-whitespace character".into(),
            ));
        }
        Ok(Self {
            attribute,
            value: value.into(),
        })
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn value(&self) -> &str {
        &self.value
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Table {
    id: String,
    pairs: Vec<AttributeValuePair>,
}

impl Table {
    pub fn new(id: impl Into<String>, pairs: Vec<AttributeValuePair>) -> Result<Self> {
        let id = id.into();
        if pairs.is_empty() {
            return Err(Error::InvalidInput(format!("table `{id}` has no pairs")));
        }
        Ok(Self { id, pairs })
    }

    /// Convenience constructor from `(attribute, value)` string pairs.
    pub fn from_pairs<A, V>(id: impl Into<String>, pairs: impl IntoIterator<Item = (A, V)>) -> Result<Self>
    where
        A: Into<String>,
        V: Into<String>,
    {
        let pairs = pairs
            .into_iter()
            .map(|(a, v)| AttributeValuePair::new(a, v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(id, pairs)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pairs(&self) -> &[AttributeValuePair] {
        &self.pairs
    }

    /// Returns a copy of this table with one more pair appended.
    pub fn with_pair(&self, pair: AttributeValuePair) -> Self {
        let mut pairs = self.pairs.clone();
        pairs.push(pair);
        Self {
            id: self.id.clone(),
            pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub table_id: String,
    pub text: String,
}

/// One table with its reference description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub table: Table,
    pub reference: Reference,
}

/// How a table is flattened into text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LinearizationTemplate {
    /// `<Attribute> is <value>` pairs joined by `"; "`.
    #[default]
    KeyIsValue,
}

/// Surface form of an attribute name: underscores become spaces and the first
/// character is uppercased (`birth_date` becomes `Birth date`).
pub fn attribute_surface(attribute: &str) -> String {
    let spaced = attribute.trim().replace('_', " ");
    let mut chars = spaced.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn linearize_table(table: &Table, template: LinearizationTemplate) -> String {
    match template {
        LinearizationTemplate::KeyIsValue => {
            let mut out = String::new();
            for (i, pair) in table.pairs.iter().enumerate() {
                if i > 0 {
                    out.push_str(PAIR_SEPARATOR);
                }
                let _ = write!(out, "{} is {}", attribute_surface(&pair.attribute), pair.value);
            }
            out
        }
    }
}

fn unescape(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn escape(field: &str, escape_equals: bool) -> String {
    let mut out = String::with_capacity(field.len());
    for c in field.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '=' if escape_equals => out.push_str("\\="),
            c => out.push(c),
        }
    }
    out
}

/// Index of the first `=` not preceded by an escaping backslash.
fn split_unescaped_equals(raw: &str) -> Option<(&str, &str)> {
    let bytes = raw.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'=' => return Some((&raw[..i], &raw[i + 1..])),
            _ => i += 1,
        }
    }
    None
}

fn parse_pairs(field: &str, line_no: usize) -> Result<Vec<AttributeValuePair>> {
    let parse_err = |message: String| Error::Parse { line: line_no, message };
    if field.trim().is_empty() {
        return Err(parse_err("empty table".into()));
    }
    field
        .split(UNIT_SEPARATOR)
        .map(|raw| {
            let (attr, value) =
                split_unescaped_equals(raw).ok_or_else(|| parse_err(format!("pair `{raw}` has no `=`")))?;
            AttributeValuePair::new(unescape(attr), unescape(value)).map_err(|e| parse_err(e.to_string()))
        })
        .collect()
}

/// Parses one dataset line. `line_no` is 1-based and only used in errors.
pub fn parse_dataset_record(line: &str, line_no: usize) -> Result<(Table, Reference)> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let fields: Vec<&str> = line.split('\t').collect();
    let parse_err = |message: &str| Error::Parse {
        line: line_no,
        message: message.to_string(),
    };
    match fields.len() {
        0 | 1 => return Err(parse_err("expected `id<TAB>pairs<TAB>reference`")),
        2 => return Err(parse_err("missing reference")),
        3 => {}
        _ => return Err(parse_err("too many tab-separated fields")),
    }
    let id = unescape(fields[0]);
    if id.trim().is_empty() {
        return Err(parse_err("empty table id"));
    }
    let pairs = parse_pairs(fields[1], line_no)?;
    let text = unescape(fields[2]);
    if text.trim().is_empty() {
        return Err(parse_err("missing reference"));
    }
    let table = Table::new(id.clone(), pairs).map_err(|e| parse_err(&e.to_string()))?;
    Ok((table, Reference { table_id: id, text }))
}

/// Parses a table-only line (`id<TAB>pairs`, any further field ignored).
pub fn parse_table_line(line: &str, line_no: usize) -> Result<Table> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let mut fields = line.split('\t');
    let id = fields.next().map(unescape).unwrap_or_default();
    if id.trim().is_empty() {
        return Err(Error::Parse {
            line: line_no,
            message: "empty table id".into(),
        });
    }
    let pairs = parse_pairs(fields.next().unwrap_or(""), line_no)?;
    Table::new(id, pairs).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

pub fn format_dataset_record(table: &Table, reference: &str) -> String {
    let pairs: Vec<String> = table
        .pairs
        .iter()
        .map(|p| format!("{}={}", escape(&p.attribute, true), escape(&p.value, false)))
        .collect();
    format!(
        "{}\t{}\t{}",
        escape(&table.id, false),
        pairs.join(&UNIT_SEPARATOR.to_string()),
        escape(reference, false)
    )
}

/// An ordered collection of records with unique table ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.table.id.clone()) {
                return Err(Error::InvalidInput(format!("duplicate table id `{}`", r.table.id)));
            }
        }
        Ok(Self { records })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (table, reference) = parse_dataset_record(line, i + 1)?;
            records.push(Record { table, reference });
        }
        Self::new(records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format_dataset_record(&r.table, &r.reference.text));
            out.push('\n');
        }
        out
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.records.iter().map(|r| &r.table)
    }
}

/// Unlabeled candidate sentences per table, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrototypeCorpus {
    sentences: BTreeMap<String, Vec<String>>,
}

impl PrototypeCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, table_id: impl Into<String>, sentence: impl Into<String>) -> Result<()> {
        let sentence = sentence.into();
        if sentence.trim().is_empty() {
            return Err(Error::InvalidInput("empty corpus sentence".into()));
        }
        self.sentences.entry(table_id.into()).or_default().push(sentence);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut corpus = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let (id, sentence) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `id<TAB>sentence`".into(),
            })?;
            corpus
                .push(unescape(id), unescape(sentence))
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
        }
        Ok(corpus)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, sentences) in &self.sentences {
            for s in sentences {
                let _ = writeln!(out, "{}\t{}", escape(id, false), escape(s, false));
            }
        }
        out
    }

    pub fn candidates(&self, table_id: &str) -> &[String] {
        self.sentences.get(table_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Table ids in ascending order.
    pub fn table_ids(&self) -> impl Iterator<Item = &str> {
        self.sentences.keys().map(String::as_str)
    }

    pub fn total_sentences(&self) -> usize {
        self.sentences.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Upper bound on the validation set size.
    pub validation_size: usize,
    /// Fixed test set size; `None` uses every record not in train or validation.
    pub test_size: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            validation_size: 1000,
            test_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSplit {
    pub train: Vec<Record>,
    pub validation: Vec<Record>,
    pub test: Vec<Record>,
    pub size_label: usize,
    pub seed: u64,
}

impl FewShotSplit {
    pub fn train_ids(&self) -> Vec<&str> {
        self.train.iter().map(|r| r.table.id()).collect()
    }
}

/// Samples a few-shot split.
///
/// The dataset is permuted once under `seed`. Train is the first `size_label`
/// records of the permutation, so smaller splits are prefixes of larger ones.
/// Validation is the tail of the permutation and test sits directly before it,
/// so both stay fixed across training sizes.
pub fn make_fewshot_split(
    dataset: &Dataset,
    size_label: usize,
    seed: u64,
    config: &SplitConfig,
) -> Result<FewShotSplit> {
    if size_label == 0 {
        return Err(Error::InvalidInput("size_label must be positive".into()));
    }
    let n = dataset.len();
    let required = size_label + config.validation_size + config.test_size.unwrap_or(0);
    if n < required {
        return Err(Error::InsufficientRecords { required, available: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let validation_start = n - config.validation_size;
    let test_start = match config.test_size {
        Some(t) => validation_start - t,
        None => size_label,
    };
    let pick = |range: std::ops::Range<usize>| -> Vec<Record> {
        order[range].iter().map(|&i| dataset.records[i].clone()).collect()
    };
    Ok(FewShotSplit {
        train: pick(0..size_label),
        validation: pick(validation_start..n),
        test: pick(test_start..validation_start),
        size_label,
        seed,
    })
}
