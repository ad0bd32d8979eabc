//! Word-level tokenizer over a closed vocabulary.
//!
//! Text is split on whitespace, runs of alphanumeric characters form tokens and
//! every other character becomes a token of its own. The literal spellings of
//! the reserved tokens (`<sep>`, `<mask>`, ...) are recognised as single tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";
pub const CONTEXT_START: &str = "<context_start>";
pub const MASK: &str = "<mask>";

/// Reserved tokens in id order.
pub const RESERVED: [&str; 7] = [PAD, BOS, EOS, UNK, SEP, CONTEXT_START, MASK];

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const SEP_ID: usize = 4;
pub const CONTEXT_START_ID: usize = 5;
pub const MASK_ID: usize = 6;

fn reserved_prefix(s: &str) -> Option<&'static str> {
    RESERVED.iter().copied().find(|r| s.starts_with(r))
}

/// Splits text into tokens. Case is preserved.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        let mut rest = chunk;
        while let Some(c) = rest.chars().next() {
            if c == '<' {
                if let Some(special) = reserved_prefix(rest) {
                    if !word.is_empty() {
                        tokens.push(std::mem::take(&mut word));
                    }
                    tokens.push(special.to_string());
                    rest = &rest[special.len()..];
                    continue;
                }
            }
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            }
            rest = &rest[c.len_utf8()..];
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Tokenizes and lowercases, as used by the metrics.
pub fn tokenize_lower(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.to_lowercase()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from raw texts. Tokens with at least `min_count`
    /// occurrences are kept, ordered by frequency (descending) then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        if min_count == 0 {
            return Err(Error::InvalidInput("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from a token list whose first entries are the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() <= RESERVED.len() {
            return Err(Error::InvalidInput(format!(
                "vocabulary needs at least {} entries, got {}",
                RESERVED.len() + 1,
                tokens.len()
            )));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(Error::InvalidInput(format!(
                    "vocabulary entry {i} must be `{r}`, found `{}`",
                    tokens[i]
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("invalid vocabulary token `{t}`")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID)).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_tokens(&tokenize(text))
    }

    /// Maps ids back to tokens, dropping `<pad>` and stopping at the first `<eos>`.
    pub fn decode_tokens(&self, ids: &[usize]) -> Result<Vec<&str>> {
        let mut out = Vec::new();
        for &id in ids {
            if id >= self.tokens.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: self.tokens.len(),
                });
            }
            match id {
                EOS_ID => break,
                PAD_ID => {}
                _ => out.push(self.tokens[id].as_str()),
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(self.decode_tokens(ids)?.join(" "))
    }

    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(
            tokenize("New York, U.S. (NYC)"),
            ["New", "York", ",", "U", ".", "S", ".", "(", "NYC", ")"]
        );
        assert_eq!(
            tokenize("a<mask>,b <context_start>"),
            ["a", "<mask>", ",", "b", "<context_start>"]
        );
        assert_eq!(tokenize("<notreserved>"), ["<", "notreserved", ">"]);
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocab::build(&["a a b"], 1).unwrap();
        assert_eq!(v.len(), 9);
        assert_eq!(v.id("a"), Some(7));
        assert_eq!(v.id("b"), Some(8));
        let v = Vocab::build(&["c b", "b a c"], 1).unwrap();
        assert_eq!(&v.tokens()[7..], ["b", "c", "a"]);
    }

    #[test]
    fn min_count_threshold() {
        let v = Vocab::build(&["a a b"], 2).unwrap();
        assert_eq!(v.id("b"), None);
        assert_eq!(v.encode("b"), vec![UNK_ID]);
    }

    #[test]
    fn empty_corpus_errors() {
        let empty: [&str; 0] = [];
        assert!(Vocab::build(&empty, 1).is_err());
        assert!(Vocab::build(&["a"], 0).is_err());
        // only reserved tokens: vocabulary would be too small
        assert!(Vocab::build(&["<mask> <sep>"], 1).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let corpus = ["the cat sat", "on the mat", "zeta alpha alpha"];
        assert_eq!(Vocab::build(&corpus, 1).unwrap(), Vocab::build(&corpus, 1).unwrap());
    }

    #[test]
    fn reserved_literals_encode() {
        let v = Vocab::build(&["x y"], 1).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode("<mask>"), vec![MASK_ID]);
        assert_eq!(
            v.encode("<sep> <context_start> <eos>"),
            vec![SEP_ID, CONTEXT_START_ID, EOS_ID]
        );
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), Some(i));
        }
    }

    #[test]
    fn decode_rules() {
        let v = Vocab::build(&["a b"], 1).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(v.decode(&[EOS_ID]).unwrap(), "");
        assert_eq!(v.decode(&[a, PAD_ID, b]).unwrap(), "a b");
        assert_eq!(v.decode(&[a, EOS_ID, b]).unwrap(), "a");
        assert!(matches!(
            v.decode(&[99]),
            Err(Error::TokenOutOfRange { id: 99, size: 9 })
        ));
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build(&["alpha beta , gamma"], 1).unwrap();
        let parsed = Vocab::parse(&v.to_text()).unwrap();
        assert_eq!(parsed, v);
        assert!(Vocab::parse("a\nb\nc\nd\ne\nf\ng\nh\n").is_err());
    }
}
