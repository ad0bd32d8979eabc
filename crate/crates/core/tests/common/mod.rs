//! Helpers and independent reference oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use adaptgen::backbone::{AdapterPlacement, ModelConfig};
use adaptgen::tensor::{Grads, ParamStore};

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// 496 parameters.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 4,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ffn: 4,
        d_bottleneck: 2,
        adapter_placement: AdapterPlacement::EveryLayer,
        adapter_activation: false,
        max_positions: 4,
    }
}

/// Largest relative error between `grads` and central differences of `loss`,
/// with the tensor name and flat index where it occurs.
/// Relative error is |a - n| / max(|a|, |n|, floor).
pub fn max_relative_error(
    params: &ParamStore,
    grads: &Grads,
    eps: f64,
    floor: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> (f64, String) {
    let mut p = params.clone();
    let mut worst = (0.0, String::new());
    for id in 0..p.len() {
        for k in 0..p.get(id).value.data.len() {
            let orig = p.get(id).value.data[k];
            p.get_mut(id).value.data[k] = orig + eps;
            let plus = loss(&p);
            p.get_mut(id).value.data[k] = orig - eps;
            let minus = loss(&p);
            p.get_mut(id).value.data[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.value_at(id, k);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (
                    rel,
                    format!("{}[{k}] analytic {analytic:e} numeric {numeric:e}", p.get(id).name),
                );
            }
        }
    }
    worst
}

fn grams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].join("\u{1}")).collect()
}

/// Number of occurrences in `a` matched one-to-one against occurrences in `b`.
fn greedy_matches(a: &[String], b: &[String]) -> Vec<bool> {
    let mut used = vec![false; b.len()];
    a.iter()
        .map(|g| match (0..b.len()).find(|&j| !used[j] && b[j] == *g) {
            Some(j) => {
                used[j] = true;
                true
            }
            None => false,
        })
        .collect()
}

/// Corpus BLEU-4 computed by one-to-one occurrence matching.
pub fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let m = greedy_matches(&grams(h, n), &grams(rf, n));
            matched[n - 1] += m.iter().filter(|&&x| x).count();
            total[n - 1] += m.len();
        }
    }
    if c == 0 || (0..4).any(|i| matched[i] == 0 || total[i] == 0) {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for i in 0..4 {
        log_sum += (matched[i] as f64 / total[i] as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * (log_sum / 4.0).exp()
}

/// Corpus ROUGE-4 (precision, recall, f1) by occurrence matching.
pub fn oracle_rouge4(hyps: &[Vec<String>], refs: &[Vec<String>]) -> (f64, f64, f64) {
    let (mut m, mut hc, mut rc) = (0usize, 0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let hg = grams(h, 4);
        let rg = grams(rf, 4);
        m += greedy_matches(&hg, &rg).iter().filter(|&&x| x).count();
        hc += hg.len();
        rc += rg.len();
    }
    let p = if hc == 0 { 0.0 } else { m as f64 / hc as f64 };
    let r = if rc == 0 { 0.0 } else { m as f64 / rc as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn entailed_fraction(gram: &str, values: &[Vec<String>]) -> f64 {
    let parts: Vec<&str> = gram.split('\u{1}').collect();
    let mut hits = 0;
    for t in &parts {
        let mut found = false;
        for v in values {
            for vt in v {
                if vt == t {
                    found = true;
                }
            }
        }
        if found {
            hits += 1;
        }
    }
    hits as f64 / parts.len() as f64
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == *n))
}

/// Longest common subsequence by enumerating every subsequence of `value`.
fn brute_lcs(value: &[String], hyp: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << value.len()) {
        let pick: Vec<&String> = (0..value.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &value[i])
            .collect();
        if pick.len() > best && is_subsequence(&pick, hyp) {
            best = pick.len();
        }
    }
    best
}

fn floored_geomean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in xs {
        s += if x > 0.0 { x.ln() } else { (1e-5f64).ln() };
    }
    (s / xs.len() as f64).exp()
}

/// Per-example PARENT (precision, recall) by occurrence matching and
/// exhaustive LCS. `values` are non-empty table value token lists.
pub fn oracle_parent_example(hyp: &[String], reference: &[String], values: &[Vec<String>], lambda: f64) -> (f64, f64) {
    if hyp.is_empty() {
        return (0.0, 0.0);
    }
    let mut precs = Vec::new();
    let mut recs = Vec::new();
    for n in 1..=4 {
        let hg = grams(hyp, n);
        let rg = grams(reference, n);
        if !hg.is_empty() {
            let matched = greedy_matches(&hg, &rg);
            let mut num = 0.0;
            for (g, m) in hg.iter().zip(&matched) {
                num += if *m { 1.0 } else { entailed_fraction(g, values) };
            }
            precs.push(num / hg.len() as f64);
        }
        let matched = greedy_matches(&rg, &hg);
        let (mut num, mut den) = (0.0, 0.0);
        for (g, m) in rg.iter().zip(&matched) {
            let w = entailed_fraction(g, values);
            den += w;
            if *m {
                num += w;
            }
        }
        if den > 0.0 {
            recs.push(num / den);
        }
    }
    let precision = if precs.is_empty() { 0.0 } else { floored_geomean(&precs) };
    let ref_recall = if recs.is_empty() { 1.0 } else { floored_geomean(&recs) };
    let table_recall = if values.is_empty() {
        1.0
    } else {
        values
            .iter()
            .map(|v| brute_lcs(v, hyp) as f64 / v.len() as f64)
            .sum::<f64>()
            / values.len() as f64
    };
    (precision, ref_recall.powf(1.0 - lambda) * table_recall.powf(lambda))
}

pub fn oracle_parent(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    tables: &[Vec<Vec<String>>],
    lambda: f64,
) -> (f64, f64, f64) {
    let (mut p, mut r) = (0.0, 0.0);
    for i in 0..hyps.len() {
        let (pi, ri) = oracle_parent_example(&hyps[i], &refs[i], &tables[i], lambda);
        p += pi;
        r += ri;
    }
    p /= hyps.len() as f64;
    r /= hyps.len() as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// One case of the metric golden fixture.
pub struct MetricCase {
    pub hyp: Vec<String>,
    pub reference: Vec<String>,
    pub values: Vec<Vec<String>>,
}

/// Reads `fixtures/metric_cases.tsv`: `hyp<TAB>ref<TAB>value|value|...`.
pub fn load_metric_cases() -> Vec<MetricCase> {
    let path = repo_root().join("fixtures/metric_cases.tsv");
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines()
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            assert_eq!(f.len(), 3, "bad fixture line {line:?}");
            MetricCase {
                hyp: toks(f[0]),
                reference: toks(f[1]),
                values: f[2].split('|').map(toks).filter(|v| !v.is_empty()).collect(),
            }
        })
        .collect()
}

/// Best-sum subset of size min(n, len) by enumeration; among optimal subsets
/// the lexicographically smallest index set, ordered by score then index.
pub fn oracle_top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let size = n.min(scores.len());
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << scores.len()) {
        if mask.count_ones() as usize != size {
            continue;
        }
        let set: Vec<usize> = (0..scores.len()).filter(|i| mask & (1 << i) != 0).collect();
        let sum: f64 = set.iter().map(|&i| scores[i]).sum();
        let better = match &best {
            None => true,
            Some((s, b)) => sum > *s || (sum == *s && set < *b),
        };
        if better {
            best = Some((sum, set));
        }
    }
    let mut set = best.map(|b| b.1).unwrap_or_default();
    set.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    set
}

/// Hinge loss written out term by term.
pub fn oracle_hinge(positive: f64, negatives: &[f64]) -> f64 {
    let mut total = 0.0;
    for &n in negatives {
        let term = 1.0 - positive + n;
        if term > 0.0 {
            total += term;
        }
    }
    total
}

/// Synthetic domain sized for the `small_run_config` split (50 + 10 + 10).
pub fn small_domain() -> adaptgen::synthetic::SyntheticDomain {
    adaptgen::synthetic::synthetic_domain(&adaptgen::synthetic::SyntheticConfig {
        n_tables: 72,
        ..Default::default()
    })
    .unwrap()
}

/// A pipeline configuration that runs every stage in a few seconds.
pub fn small_run_config(out_dir: &std::path::Path, seed: u64) -> adaptgen::config::RunConfig {
    use adaptgen::config::{RunConfig, StageBudget};
    let mut cfg = RunConfig {
        seed,
        out_dir: out_dir.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.data.validation_size = 10;
    cfg.data.test_size = Some(10);
    cfg.model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ffn: 32,
        d_bottleneck: 4,
        ..ModelConfig::default()
    };
    cfg.selector.d_model = 8;
    cfg.selector.n_heads = 2;
    cfg.selector.n_layers = 1;
    cfg.selector.d_ffn = 16;
    let budget = StageBudget {
        learning_rate: Some(3e-3),
        batch_size: Some(4),
        max_steps: Some(8),
        ..StageBudget::default()
    };
    cfg.stages.gen_ps = budget;
    cfg.stages.gen_lm = budget;
    cfg.stages.ka = budget;
    cfg.stages.finetune = budget;
    cfg.eval.max_decode_len = 12;
    cfg
}
