//! Prototype selection.
//!
//! A candidate sentence `b` is scored against a table `T` by encoding the
//! concatenation `linearize(T) <sep> b` with a small self-attention encoder,
//! mean-pooling the final hidden states and projecting the result to a scalar:
//! `f(T, b) = w · meanpool(...) + c`. The prototype set is the size-`n` subset
//! with the largest total score, which is the top `n` by individual score.
//! Training uses the hinge ranking loss `Σ_j max(0, 1 − f(T, r) + f(T, b_j))`
//! over `k` sampled negatives.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{linearize_table, LinearizationTemplate, Table};
use crate::error::{Error, Result};
use crate::layers::{xavier, EncoderBlock};
use crate::tensor::{Grads, Mat, ParamStore};
use crate::tokenizer::{Vocab, SEP_ID};

pub const HINGE_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Zero layers reduces the encoder to embeddings plus positions.
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_positions: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 64,
            max_positions: 128,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("selector {name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "selector d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    pub config: SelectorConfig,
    pub store: ParamStore,
}

impl SelectorParams {
    pub fn init(config: SelectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut store = ParamStore::new();
        store.insert("sel.tok_emb", xavier(config.vocab_size, d, &mut rng));
        store.insert("sel.pos", xavier(config.max_positions, d, &mut rng));
        for l in 0..config.n_layers {
            EncoderBlock::init(&mut store, &format!("sel.{l}"), d, config.d_ffn, &mut rng);
        }
        store.insert("sel.proj.w", xavier(d, 1, &mut rng));
        store.insert("sel.proj.c", Mat::zeros(1, 1));
        Ok(Self { config, store })
    }

    /// Wraps an existing store after checking it matches `config`.
    pub fn from_store(config: SelectorConfig, store: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        reference.store.ensure_compatible(&store)?;
        Ok(Self { config, store })
    }
}

struct Layout {
    tok: usize,
    pos: usize,
    blocks: Vec<EncoderBlock>,
    w: usize,
    c: usize,
}

impl Layout {
    fn resolve(cfg: &SelectorConfig, p: &ParamStore) -> Result<Self> {
        Ok(Self {
            tok: p.id("sel.tok_emb")?,
            pos: p.id("sel.pos")?,
            blocks: (0..cfg.n_layers)
                .map(|l| EncoderBlock::resolve(p, &format!("sel.{l}")))
                .collect::<Result<_>>()?,
            w: p.id("sel.proj.w")?,
            c: p.id("sel.proj.c")?,
        })
    }
}

fn score_graph(g: &mut Graph, cfg: &SelectorConfig, layout: &Layout, ids: &[usize]) -> Var {
    let x = g.embed(layout.tok, ids);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = g.embed(layout.pos, &positions);
    let mut x = g.add(x, p);
    for block in &layout.blocks {
        x = block.apply(g, cfg.n_heads, x, None);
    }
    let pooled = g.mean_rows(x);
    g.linear(pooled, layout.w, layout.c)
}

/// Token ids of `linearize(T) <sep> b`, truncated to `max_positions`.
pub fn selector_input(vocab: &Vocab, table: &Table, sentence: &str, max_positions: usize) -> Vec<usize> {
    let mut ids = vocab.encode(&linearize_table(table, LinearizationTemplate::KeyIsValue));
    ids.push(SEP_ID);
    ids.extend(vocab.encode(sentence));
    ids.truncate(max_positions);
    ids
}

fn check_ids(cfg: &SelectorConfig, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("selector input is empty".into()));
    }
    if ids.len() > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_positions,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Score of an already encoded selector input.
pub fn score_ids(sp: &SelectorParams, ids: &[usize]) -> Result<f64> {
    check_ids(&sp.config, ids)?;
    let layout = Layout::resolve(&sp.config, &sp.store)?;
    let mut g = Graph::new(&sp.store);
    let s = score_graph(&mut g, &sp.config, &layout, ids);
    Ok(g.value(s).data[0])
}

pub fn score_candidate(sp: &SelectorParams, vocab: &Vocab, table: &Table, sentence: &str) -> Result<f64> {
    if sentence.trim().is_empty() {
        return Err(Error::InvalidInput("candidate sentence is empty".into()));
    }
    score_ids(sp, &selector_input(vocab, table, sentence, sp.config.max_positions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub sentence: String,
    pub score: f64,
    /// Position of the sentence in the table's candidate list.
    pub corpus_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub table_id: String,
    /// Sorted by score descending, ties by corpus index ascending.
    pub members: Vec<Prototype>,
    pub n: usize,
}

impl PrototypeSet {
    pub fn empty(table_id: impl Into<String>, n: usize) -> Self {
        Self {
            table_id: table_id.into(),
            members: Vec::new(),
            n,
        }
    }
}

/// Indices of the `n` best scores: score descending, ties by index ascending.
pub fn select_top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

pub fn select_prototypes(
    sp: &SelectorParams,
    vocab: &Vocab,
    table: &Table,
    candidates: &[String],
    n: usize,
) -> Result<PrototypeSet> {
    if n == 0 {
        return Err(Error::InvalidInput("prototype count n must be at least 1".into()));
    }
    let scores = candidates
        .iter()
        .map(|c| score_candidate(sp, vocab, table, c))
        .collect::<Result<Vec<_>>>()?;
    let members = select_top_n(&scores, n)
        .into_iter()
        .map(|i| Prototype {
            sentence: candidates[i].clone(),
            score: scores[i],
            corpus_index: i,
        })
        .collect();
    Ok(PrototypeSet {
        table_id: table.id().to_string(),
        members,
        n,
    })
}

/// Indices into a pool of `pool_len` items: `k` distinct ones in random order,
/// or `k` draws with replacement when the pool is smaller than `k`.
pub(crate) fn sample_indices(pool_len: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool_len >= k {
        index::sample(rng, pool_len, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..pool_len)).collect()
    }
}

/// Samples `k` negatives from `candidates`, never returning a sentence equal to `reference`.
pub fn sample_negatives(candidates: &[String], reference: &str, k: usize, seed: u64) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::InvalidInput("negative count k must be at least 1".into()));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidInput(
            "cannot sample negatives from an empty candidate list".into(),
        ));
    }
    let pool: Vec<&String> = candidates.iter().filter(|c| c.as_str() != reference).collect();
    if pool.is_empty() {
        return Err(Error::InvalidInput("every candidate equals the reference".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_indices(pool.len(), k, &mut rng)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// Hinge ranking loss from raw scores.
pub fn hinge_loss(positive: f64, negatives: &[f64]) -> f64 {
    negatives.iter().map(|n| (HINGE_MARGIN - positive + n).max(0.0)).sum()
}

/// Encoded training example for the selector.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorExample {
    /// Encoded `linearize(T) <sep> r`.
    pub positive: Vec<usize>,
    /// Encoded `linearize(T) <sep> b` for every candidate that differs from the reference.
    pub negatives: Vec<Vec<usize>>,
}

impl SelectorExample {
    pub fn new(
        vocab: &Vocab,
        table: &Table,
        reference: &str,
        candidates: &[String],
        max_positions: usize,
    ) -> Result<Self> {
        let negatives: Vec<Vec<usize>> = candidates
            .iter()
            .filter(|c| c.as_str() != reference)
            .map(|c| selector_input(vocab, table, c, max_positions))
            .collect();
        if negatives.is_empty() {
            return Err(Error::InvalidInput(format!(
                "table `{}` has no candidate sentences to sample negatives from",
                table.id()
            )));
        }
        Ok(Self {
            positive: selector_input(vocab, table, reference, max_positions),
            negatives,
        })
    }
}

fn loss_graph(g: &mut Graph, cfg: &SelectorConfig, layout: &Layout, positive: &[usize], negatives: &[&[usize]]) -> Var {
    let pos = score_graph(g, cfg, layout, positive);
    let terms: Vec<Var> = negatives
        .iter()
        .map(|n| {
            let s = score_graph(g, cfg, layout, n);
            g.hinge(pos, s)
        })
        .collect();
    g.sum(&terms)
}

/// Hinge loss and gradients for encoded inputs.
pub fn selection_loss_and_grads(
    sp: &SelectorParams,
    positive: &[usize],
    negatives: &[&[usize]],
) -> Result<(f64, Grads)> {
    selection_grads_in(&sp.config, &sp.store, positive, negatives)
}

pub(crate) fn selection_grads_in(
    cfg: &SelectorConfig,
    store: &ParamStore,
    positive: &[usize],
    negatives: &[&[usize]],
) -> Result<(f64, Grads)> {
    if negatives.is_empty() {
        return Err(Error::InvalidInput("at least one negative is required".into()));
    }
    check_ids(cfg, positive)?;
    for n in negatives {
        check_ids(cfg, n)?;
    }
    let layout = Layout::resolve(cfg, store)?;
    let mut g = Graph::new(store);
    let loss = loss_graph(&mut g, cfg, &layout, positive, negatives);
    Ok((g.value(loss).data[0], g.backward(loss)))
}

pub fn prototype_selection_loss(
    sp: &SelectorParams,
    vocab: &Vocab,
    table: &Table,
    reference: &str,
    negatives: &[String],
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidInput("at least one negative is required".into()));
    }
    let pos = score_candidate(sp, vocab, table, reference)?;
    let negs = negatives
        .iter()
        .map(|n| score_candidate(sp, vocab, table, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(hinge_loss(pos, &negs))
}

/// Loss and gradients for one example with `k` negatives drawn under `seed`.
pub fn example_loss_and_grads(sp: &SelectorParams, ex: &SelectorExample, k: usize, seed: u64) -> Result<(f64, Grads)> {
    example_grads_in(&sp.config, &sp.store, ex, k, seed)
}

pub(crate) fn example_grads_in(
    cfg: &SelectorConfig,
    store: &ParamStore,
    ex: &SelectorExample,
    k: usize,
    seed: u64,
) -> Result<(f64, Grads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample_indices(ex.negatives.len(), k, &mut rng);
    let negs: Vec<&[usize]> = picked.iter().map(|&i| ex.negatives[i].as_slice()).collect();
    selection_grads_in(cfg, store, &ex.positive, &negs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocab {
        Vocab::build(&["Name is alan ; born york city"], 1).unwrap()
    }

    fn toy_selector(vocab: &Vocab) -> SelectorParams {
        SelectorParams::init(
            SelectorConfig {
                vocab_size: vocab.len(),
                d_model: 4,
                n_heads: 2,
                n_layers: 1,
                d_ffn: 4,
                max_positions: 16,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn zero_weight_gives_bias() {
        let vocab = toy_vocab();
        let mut sp = toy_selector(&vocab);
        let w = sp.store.id("sel.proj.w").unwrap();
        let c = sp.store.id("sel.proj.c").unwrap();
        sp.store.get_mut(w).value.data.fill(0.0);
        sp.store.get_mut(c).value.data[0] = 0.5;
        let t = Table::from_pairs("t", [("name", "alan")]).unwrap();
        for b in ["born", "york city", "alan"] {
            assert_eq!(score_candidate(&sp, &vocab, &t, b).unwrap(), 0.5);
        }
    }

    #[test]
    fn scoring_is_deterministic() {
        let vocab = toy_vocab();
        let sp = toy_selector(&vocab);
        let t = Table::from_pairs("t", [("name", "alan")]).unwrap();
        let a = score_candidate(&sp, &vocab, &t, "born york").unwrap();
        let b = score_candidate(&sp, &vocab, &t, "born york").unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(score_candidate(&sp, &vocab, &t, "  ").is_err());
    }

    #[test]
    fn top_n_ties_prefer_lower_index() {
        assert_eq!(select_top_n(&[0.5, 0.9, 0.5, 0.9], 3), vec![1, 3, 0]);
        assert_eq!(select_top_n(&[1.0, 1.0], 1), vec![0]);
        assert_eq!(select_top_n(&[0.1, 0.3, 0.2], 10), vec![1, 2, 0]);
        assert!(select_top_n(&[], 3).is_empty());
    }

    #[test]
    fn empty_candidates_give_empty_set() {
        let vocab = toy_vocab();
        let sp = toy_selector(&vocab);
        let t = Table::from_pairs("t", [("name", "alan")]).unwrap();
        let set = select_prototypes(&sp, &vocab, &t, &[], 3).unwrap();
        assert!(set.members.is_empty());
        assert_eq!(set.table_id, "t");
    }

    #[test]
    fn negatives_exhaustive_is_permutation() {
        let c: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let mut got = sample_negatives(&c, "zzz", 4, 3).unwrap();
        got.sort();
        assert_eq!(got, c);
        assert_eq!(
            sample_negatives(&c, "zzz", 2, 9).unwrap(),
            sample_negatives(&c, "zzz", 2, 9).unwrap()
        );
    }

    #[test]
    fn negatives_with_replacement_when_short() {
        let c: Vec<String> = vec!["a".into(), "ref".into()];
        let got = sample_negatives(&c, "ref", 5, 1).unwrap();
        assert_eq!(got, vec!["a"; 5]);
        assert!(sample_negatives(&[], "ref", 1, 0).is_err());
        assert!(sample_negatives(&["ref".to_string()], "ref", 1, 0).is_err());
    }

    #[test]
    fn hinge_cases() {
        assert_eq!(hinge_loss(3.0, &[1.5, 2.0, -4.0]), 0.0);
        assert!((hinge_loss(0.2, &[0.5]) - 1.3).abs() < 1e-12);
        let single = hinge_loss(0.0, &[0.25, 0.5]);
        let doubled = hinge_loss(0.0, &[0.25, 0.5, 0.25, 0.5]);
        assert_eq!(doubled, 2.0 * single);
    }
}
