//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! gating failure. Runs as `cargo test -p adaptgen-core --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use adaptgen::backbone::{
    greedy_decode, init_model, is_adapter_tensor, model_forward, model_forward_with, seq2seq_loss,
    seq2seq_loss_and_grads, teacher_forcing, AdapterMode, ModelConfig,
};
use adaptgen::checkpoint::load_checkpoint;
use adaptgen::config::RunConfig;
use adaptgen::data::{linearize_table, LinearizationTemplate, Table};
use adaptgen::metrics::{bleu4, parent, parent_example, rouge4, ParentTable};
use adaptgen::orchestrator::{encode_fewshot_pairs, run_pipeline, run_stage, PipelineOptions, Seq2SeqObjective, Stage};
use adaptgen::prompts::build_augmentation_pairs;
use adaptgen::selector::{hinge_loss, select_top_n};
use adaptgen::synthetic::{synthetic_domain, SyntheticConfig, SyntheticDomain};
use adaptgen::tensor::ParamStore;
use adaptgen::tokenizer::{Vocab, EOS_ID, MASK};
use common::{
    load_metric_cases, max_relative_error, oracle_bleu, oracle_hinge, oracle_parent, oracle_parent_example,
    oracle_rouge4, oracle_top_n, small_domain, small_run_config, tiny_model_config, toks,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Runs one criterion, prints its line and reports whether it passed.
fn criterion(name: &str, limit_secs: Option<f64>, gating: bool, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (mut pass, mut detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    if let Some(limit) = limit_secs {
        if secs > limit {
            pass = false;
            detail = format!("{detail}; over the {limit} s limit");
        }
    }
    let tag = if gating { "" } else { " [non-gating]" };
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("{verdict} {name}{tag} ({secs:.2} s): {detail}");
    pass || !gating
}

fn toy_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 32,
        n_heads: 4,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        ..ModelConfig::default()
    }
}

fn adapter_identity() -> Outcome {
    let cfg = toy_model(40);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let store = init_model(&cfg, i).unwrap();
        let src: Vec<usize> = (0..rng.gen_range(1..20)).map(|_| rng.gen_range(0..40)).collect();
        let tgt: Vec<usize> = (0..rng.gen_range(1..20)).map(|_| rng.gen_range(0..40)).collect();
        let a = model_forward(&cfg, &store, &src, &tgt).unwrap();
        let b = model_forward_with(&cfg, &store, &src, &tgt, AdapterMode::Bypassed).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max |logit difference| {worst:e} > 1e-6"))?;
    Ok(format!("100 inputs, max |logit difference| {worst:e}"))
}

fn checksums(store: &ParamStore, adapter: bool) -> Vec<(String, String)> {
    store
        .tensors()
        .iter()
        .filter(|t| is_adapter_tensor(&t.name) == adapter)
        .map(|t| (t.name.clone(), t.checksum()))
        .collect()
}

fn freeze_soundness(domain: &SyntheticDomain) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run_config(dir.path(), 7);
    for stage in Stage::ALL {
        cfg.stages.get_mut(stage).max_steps = Some(30);
    }
    run_pipeline(&cfg, &domain.dataset, &domain.corpus, PipelineOptions::default()).map_err(|e| e.to_string())?;
    let load = |s: Stage| load_checkpoint(&dir.path().join(s.checkpoint_file())).unwrap();
    let (lm, ka, ft) = (load(Stage::GenLm), load(Stage::Ka), load(Stage::Finetune));
    let frozen_ka = checksums(&lm, false);
    let frozen_ft = checksums(&ka, true);
    ensure(frozen_ka == checksums(&ka, false), || {
        "KA changed a non-adapter tensor".into()
    })?;
    ensure(frozen_ft == checksums(&ft, true), || {
        "FINETUNE changed an adapter tensor".into()
    })?;
    ensure(checksums(&lm, true) != checksums(&ka, true), || {
        "KA left the adapters untouched".into()
    })?;
    Ok(format!(
        "{} non-adapter tensors unchanged by KA, {} adapter tensors unchanged by FINETUNE",
        frozen_ka.len(),
        frozen_ft.len()
    ))
}

fn gradient_check() -> Outcome {
    let cfg = tiny_model_config();
    let mut store = init_model(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in store.tensors_mut() {
        for x in &mut t.value.data {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let src = [3, 5, 7, 6];
    let (dec_in, dec_out) = teacher_forcing(&[4, 6, 7]);
    let (_, grads) = seq2seq_loss_and_grads(&cfg, &store, &src, &dec_in, &dec_out).unwrap();
    let (err, at) = max_relative_error(&store, &grads, 1e-5, 1e-6, |p| {
        seq2seq_loss(&cfg, p, &src, &dec_in, &dec_out).unwrap()
    });
    ensure(err < 1e-4, || format!("relative error {err:e} at {at}"))?;
    Ok(format!(
        "{} parameters, max relative error {err:e}",
        store.parameter_count()
    ))
}

fn overfit_oracle() -> Outcome {
    let domain = synthetic_domain(&SyntheticConfig {
        n_tables: 8,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let records = domain.dataset.records();
    let texts: Vec<String> = records
        .iter()
        .flat_map(|r| {
            [
                linearize_table(&r.table, LinearizationTemplate::KeyIsValue),
                r.reference.text.clone(),
            ]
        })
        .collect();
    let vocab = Vocab::build(&texts, 1).unwrap();
    let cfg = toy_model(vocab.len());
    let pairs = encode_fewshot_pairs(records, &BTreeMap::new(), &vocab, &cfg, 0).unwrap();
    let mut stage = RunConfig::default().stage_config(Stage::GenLm);
    stage.learning_rate = 3e-3;
    stage.batch_size = 8;
    stage.max_steps = 600;
    let objective = Seq2SeqObjective {
        config: &cfg,
        pairs: &pairs,
        mode: AdapterMode::Bypassed,
    };
    let trained = run_stage(&stage, init_model(&cfg, 1).unwrap(), &objective).map_err(|e| e.to_string())?;
    let (mut nll, mut tokens) = (0.0, 0usize);
    let mut exact = 0;
    for p in &pairs {
        let (dec_in, dec_out) = teacher_forcing(&p.target);
        nll += seq2seq_loss(&cfg, &trained.params, &p.src, &dec_in, &dec_out).unwrap() * dec_out.len() as f64;
        tokens += dec_out.len();
        let decoded = greedy_decode(&cfg, &trained.params, &p.src, p.target.len() + 1).unwrap();
        if decoded.len() == p.target.len() + 1
            && decoded[..p.target.len()] == p.target[..]
            && decoded[p.target.len()] == EOS_ID
        {
            exact += 1;
        }
    }
    let per_token = nll / tokens as f64;
    ensure(per_token < 0.1, || {
        format!("per-token loss {per_token:.4} after {} steps", stage.max_steps)
    })?;
    ensure(exact == pairs.len(), || {
        format!("{exact}/{} targets decoded exactly", pairs.len())
    })?;
    Ok(format!(
        "{} steps, per-token loss {per_token:.4}, {exact}/8 exact",
        stage.max_steps
    ))
}

fn select_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut ties = 0;
    for case in 0..200 {
        let len = rng.gen_range(0..=8);
        // quarter steps in a narrow range make ties common
        let scores: Vec<f64> = (0..len).map(|_| rng.gen_range(-4i32..4) as f64 / 4.0).collect();
        let n = rng.gen_range(1..=3);
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            ties += 1;
        }
        let got = select_top_n(&scores, n);
        let want = oracle_top_n(&scores, n);
        ensure(got == want, || {
            format!("case {case}: {scores:?}, n={n}: got {got:?}, oracle {want:?}")
        })?;
    }
    Ok(format!(
        "200 score sets agree with subset enumeration, {ties} with ties"
    ))
}

fn hinge_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut zeros = 0;
    for case in 0..100 {
        let k = rng.gen_range(1..=6);
        let negatives: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // every third case clears all margins
        let positive = if case % 3 == 0 {
            negatives.iter().cloned().fold(f64::MIN, f64::max) + 1.0 + rng.gen_range(0.0..1.0)
        } else {
            rng.gen_range(-2.0..2.0)
        };
        let loss = hinge_loss(positive, &negatives);
        let margins_met = negatives.iter().all(|n| positive - n >= 1.0);
        ensure((loss == 0.0) == margins_met, || {
            format!("case {case}: loss {loss} with margins met = {margins_met}")
        })?;
        let want = oracle_hinge(positive, &negatives);
        ensure((loss - want).abs() < 1e-12, || {
            format!("case {case}: {loss} vs hand sum {want}")
        })?;
        zeros += usize::from(margins_met);
    }
    Ok(format!("100 score vectors, {zeros} with every margin met"))
}

fn mask_round_trip() -> Outcome {
    let domain = synthetic_domain(&SyntheticConfig {
        n_tables: 100,
        mentions_per_table: 3,
        unrelated_per_table: 2,
        seed: 31,
    })
    .unwrap();
    let sentences = domain.corpus.total_sentences();
    ensure(sentences == 500, || format!("corpus has {sentences} sentences"))?;
    let tables: Vec<Table> = domain.dataset.tables().cloned().collect();
    let pairs = build_augmentation_pairs(&domain.corpus, &tables, None);
    ensure(!pairs.is_empty(), || "no pairs emitted".into())?;
    for p in &pairs {
        ensure(p.unmask() == p.target_tokens, || {
            format!("unmask differs for {:?}", p.masked_tokens)
        })?;
        ensure(p.target_tokens.iter().all(|t| t != MASK), || {
            format!("target contains a mask: {:?}", p.target_tokens)
        })?;
    }
    Ok(format!("{} prompts from 500 sentences, all round-trip", pairs.len()))
}

fn metric_oracles() -> Outcome {
    const TOL: f64 = 1e-6;
    let cases = load_metric_cases();
    ensure(cases.len() == 50, || format!("fixture has {} cases", cases.len()))?;
    let mut worst = 0.0f64;
    for (i, c) in cases.iter().enumerate() {
        let h = vec![c.hyp.clone()];
        let r = vec![c.reference.clone()];
        let rouge = rouge4(&h, &r).unwrap();
        let pe = parent_example(&c.hyp, &c.reference, &ParentTable::new(c.values.clone()), 0.5);
        let (pp, pr) = oracle_parent_example(&c.hyp, &c.reference, &c.values, 0.5);
        let diffs = [
            bleu4(&h, &r).unwrap() - oracle_bleu(&h, &r),
            rouge.f1 - oracle_rouge4(&h, &r).2,
            pe.f1 - adaptgen::metrics::harmonic_mean(pp, pr),
        ];
        let d = diffs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        ensure(d < TOL, || format!("case {i} differs from its oracle by {d:e}"))?;
        worst = worst.max(d);
    }
    let h: Vec<Vec<String>> = cases.iter().map(|c| c.hyp.clone()).collect();
    let r: Vec<Vec<String>> = cases.iter().map(|c| c.reference.clone()).collect();
    let values: Vec<Vec<Vec<String>>> = cases.iter().map(|c| c.values.clone()).collect();
    let tables: Vec<ParentTable> = values.iter().cloned().map(ParentTable::new).collect();
    let corpus = [
        bleu4(&h, &r).unwrap() - oracle_bleu(&h, &r),
        rouge4(&h, &r).unwrap().f1 - oracle_rouge4(&h, &r).2,
        parent(&h, &r, &tables, 0.5).unwrap().f1 - oracle_parent(&h, &r, &values, 0.5).2,
    ];
    let d = corpus.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    ensure(d < TOL, || format!("corpus scores differ from the oracles by {d:e}"))?;
    worst = worst.max(d);
    let same = vec![toks("the cat sat on the mat")];
    let identical = bleu4(&same, &same).unwrap();
    ensure((identical - 100.0).abs() < 1e-9, || {
        format!("BLEU(identical) = {identical}")
    })?;
    let disjoint = bleu4(&[toks("a b c d")], &[toks("e f g h")]).unwrap();
    ensure(disjoint == 0.0, || format!("BLEU(disjoint) = {disjoint}"))?;
    let empty = parent_example(&[], &same[0], &ParentTable::new(vec![toks("cat")]), 0.5).f1;
    ensure(empty == 0.0, || format!("PARENT(empty) = {empty}"))?;
    Ok(format!(
        "50 cases and corpus within {worst:e}; identical 100, disjoint 0, empty 0"
    ))
}

fn determinism_config(dir: &Path) -> RunConfig {
    let mut cfg = small_run_config(dir, 11);
    for stage in Stage::ALL {
        cfg.stages.get_mut(stage).max_steps = Some(40);
    }
    cfg
}

fn pipeline_determinism(domain: &SyntheticDomain) -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |dir: &Path| {
        run_pipeline(
            &determinism_config(dir),
            &domain.dataset,
            &domain.corpus,
            PipelineOptions::default(),
        )
        .map_err(|e| e.to_string())
    };
    let (x, y) = (run(a.path())?, run(b.path())?);
    let file = |dir: &Path| std::fs::read(dir.join(Stage::Finetune.checkpoint_file())).unwrap();
    ensure(file(a.path()) == file(b.path()), || {
        "final checkpoint files differ".into()
    })?;
    ensure(x.report == y.report, || "metric reports differ".into())?;
    let report = x.report.unwrap();
    Ok(format!(
        "final checksum {}, BLEU-4 {:.2}",
        &x.model.checksum()[..12],
        report.bleu4
    ))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn directional_ablation() -> Outcome {
    let domain = synthetic_domain(&SyntheticConfig {
        n_tables: 90,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut scores: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..5 {
        for (name, use_pa, use_pt) in [("full", true, true), ("-PA", false, true), ("-PA&PT", false, false)] {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = small_run_config(dir.path(), seed);
            cfg.data.validation_size = 20;
            cfg.data.test_size = Some(20);
            cfg.use_pa = use_pa;
            cfg.use_pt = use_pt;
            cfg.model.d_model = 32;
            cfg.model.n_heads = 4;
            cfg.model.d_ffn = 64;
            cfg.model.d_bottleneck = 8;
            cfg.stages.gen_ps.max_steps = Some(60);
            cfg.stages.gen_lm.max_steps = Some(150);
            cfg.stages.ka.max_steps = Some(100);
            cfg.stages.finetune.max_steps = Some(100);
            for stage in Stage::ALL {
                cfg.stages.get_mut(stage).batch_size = Some(8);
            }
            cfg.eval.max_decode_len = 24;
            let out = run_pipeline(&cfg, &domain.dataset, &domain.corpus, PipelineOptions::default())
                .map_err(|e| format!("{name}, seed {seed}: {e}"))?;
            scores.entry(name).or_default().push(out.report.unwrap().bleu4);
        }
    }
    let (full, pa, papt) = (
        median(scores["full"].clone()),
        median(scores["-PA"].clone()),
        median(scores["-PA&PT"].clone()),
    );
    let detail = format!("median BLEU-4 full {full:.2}, -PA {pa:.2}, -PA&PT {papt:.2}");
    ensure(full >= pa && pa >= papt, || format!("ordering not observed: {detail}"))?;
    Ok(detail)
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let domain = small_domain();
    let results = [
        criterion("adapter_identity", Some(10.0), true, adapter_identity),
        criterion("freeze_soundness", Some(120.0), true, || freeze_soundness(&domain)),
        criterion("gradient_check", Some(60.0), true, gradient_check),
        criterion("overfit_oracle", Some(300.0), true, overfit_oracle),
        criterion("select_oracle", Some(10.0), true, select_oracle),
        criterion("hinge_contract", Some(5.0), true, hinge_contract),
        criterion("mask_round_trip", Some(10.0), true, mask_round_trip),
        criterion("metric_oracles", Some(30.0), true, metric_oracles),
        criterion("pipeline_determinism", Some(600.0), true, || {
            pipeline_determinism(&domain)
        }),
        criterion("directional_ablation", None, false, directional_ablation),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
    println!("all gating criteria passed");
}
