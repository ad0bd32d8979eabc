//! Staged training: selector pretraining, generator pretraining, adapter-only
//! knowledge augmentation and adapter-frozen fine-tuning.
//!
//! Every stage starts a fresh optimizer and draws its batches from its own
//! seed, so a pipeline resumed from any stage checkpoint finishes with the
//! same parameters as an uninterrupted run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    apply_freeze_policy, greedy_decode, init_model, seq2seq_loss_and_grads_with, teacher_forcing, AdapterMode,
    FreezePolicy, ModelConfig,
};
use crate::checkpoint::{load_checkpoint, load_compatible, save_checkpoint, write_atomic};
use crate::config::{derive_seed, RunConfig};
use crate::data::{
    linearize_table, make_fewshot_split, Dataset, FewShotSplit, LinearizationTemplate, PrototypeCorpus, Record, Table,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_corpus, MetricConfig, MetricReport};
use crate::optim::{Optimizer, OptimizerKind};
use crate::prompts::{build_augmentation_pairs, format_ka_cache, KaRecord};
use crate::selector::{
    example_grads_in, select_prototypes, PrototypeSet, SelectorConfig, SelectorExample, SelectorParams,
};
use crate::tensor::{Grads, ParamStore};
use crate::tokenizer::{Vocab, CONTEXT_START_ID, EOS_ID, SEP_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GenPs,
    GenLm,
    Ka,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::GenPs, Stage::GenLm, Stage::Ka, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenPs => "GEN_PS",
            Stage::GenLm => "GEN_LM",
            Stage::Ka => "KA",
            Stage::Finetune => "FINETUNE",
        }
    }

    /// Lowercase key used in config tables and file names.
    pub fn key(self) -> &'static str {
        match self {
            Stage::GenPs => "gen_ps",
            Stage::GenLm => "gen_lm",
            Stage::Ka => "ka",
            Stage::Finetune => "finetune",
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            Stage::GenPs => 300,
            Stage::GenLm => 1000,
            Stage::Ka => 500,
            Stage::Finetune => 500,
        }
    }

    pub fn freeze_policy(self) -> FreezePolicy {
        match self {
            Stage::GenPs | Stage::GenLm => FreezePolicy::AllTrainable,
            Stage::Ka => FreezePolicy::AdapterOnly,
            Stage::Finetune => FreezePolicy::AdapterFrozen,
        }
    }

    pub fn data_source(self) -> DataSource {
        match self {
            Stage::GenPs => DataSource::SelectorPairs,
            Stage::GenLm | Stage::Finetune => DataSource::FewshotPairs,
            Stage::Ka => DataSource::KaPairs,
        }
    }

    pub fn checkpoint_file(self) -> String {
        format!("{}.ckpt", self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    FewshotPairs,
    KaPairs,
    SelectorPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    pub data_source: DataSource,
    pub optimizer: OptimizerKind,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let name = self.stage.name();
        if self.freeze_policy != self.stage.freeze_policy() {
            return Err(Error::Config(format!(
                "stage {name} requires freeze policy {}, got {}",
                self.stage.freeze_policy().name(),
                self.freeze_policy.name()
            )));
        }
        if self.data_source != self.stage.data_source() {
            return Err(Error::Config(format!(
                "stage {name} cannot train on {:?}",
                self.data_source
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("stage {name}: learning_rate must be positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("stage {name}: batch_size must be at least 1")));
        }
        Ok(())
    }
}

/// A differentiable per-example loss over a fixed set of training examples.
pub trait Objective {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn loss_and_grads(&self, params: &ParamStore, index: usize, seed: u64) -> Result<(f64, Grads)>;
}

/// Encoder input and target ids, without `<bos>` or `<eos>` on the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub target: Vec<usize>,
}

pub struct Seq2SeqObjective<'a> {
    pub config: &'a ModelConfig,
    pub pairs: &'a [EncodedPair],
    pub mode: AdapterMode,
}

impl Objective for Seq2SeqObjective<'_> {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn loss_and_grads(&self, params: &ParamStore, index: usize, _seed: u64) -> Result<(f64, Grads)> {
        let pair = &self.pairs[index];
        let (dec_in, dec_out) = teacher_forcing(&pair.target);
        seq2seq_loss_and_grads_with(self.config, params, &pair.src, &dec_in, &dec_out, self.mode)
    }
}

pub struct SelectorObjective<'a> {
    pub config: &'a SelectorConfig,
    pub examples: &'a [SelectorExample],
    pub negatives_k: usize,
}

impl Objective for SelectorObjective<'_> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn loss_and_grads(&self, params: &ParamStore, index: usize, seed: u64) -> Result<(f64, Grads)> {
        example_grads_in(self.config, params, &self.examples[index], self.negatives_k, seed)
    }
}

/// Epoch-wise shuffled batches; the permutation is redrawn when exhausted.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub params: ParamStore,
    /// Mean batch loss before each optimizer step.
    pub losses: Vec<f64>,
}

/// Applies the stage's freeze policy and runs `max_steps` optimizer steps.
pub fn run_stage(cfg: &StageConfig, params: ParamStore, objective: &dyn Objective) -> Result<StageOutcome> {
    cfg.validate()?;
    if objective.is_empty() {
        return Err(Error::InvalidInput(format!(
            "stage {} has no training data",
            cfg.stage.name()
        )));
    }
    let mut params = apply_freeze_policy(params, cfg.freeze_policy)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut sampler = BatchSampler::new(objective.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let batch_size = cfg.batch_size.min(objective.len());
    for step in 0..cfg.max_steps {
        let batch = sampler.next_batch(batch_size);
        let mut grads = Grads::new(params.len());
        let mut total = 0.0;
        for (j, &i) in batch.iter().enumerate() {
            let seed = derive_seed(cfg.seed, &format!("{step}/{j}"));
            let (loss, g) = objective.loss_and_grads(&params, i, seed)?;
            total += loss;
            grads.add(&g);
        }
        let scale = 1.0 / batch.len() as f64;
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: cfg.stage.name().to_string(),
                step,
            });
        }
        grads.scale(scale);
        optimizer.step(&mut params, &grads);
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: cfg.stage.name().to_string(),
                step,
            });
        }
        losses.push(loss);
    }
    Ok(StageOutcome { params, losses })
}

/// Encoder input `proto_1 <sep> ... <sep> proto_n <context_start> table <eos>`.
///
/// Prototypes are taken in set order (best first) and dropped from the end
/// until the sequence fits in `max_positions`.
pub fn build_lm_input(
    prototypes: &PrototypeSet,
    table: &Table,
    vocab: &Vocab,
    max_positions: usize,
) -> Result<Vec<usize>> {
    let mut tail = vec![CONTEXT_START_ID];
    tail.extend(vocab.encode(&linearize_table(table, LinearizationTemplate::KeyIsValue)));
    tail.push(EOS_ID);
    if tail.len() > max_positions {
        return Err(Error::SequenceTooLong {
            len: tail.len(),
            max: max_positions,
        });
    }
    let encoded: Vec<Vec<usize>> = prototypes.members.iter().map(|p| vocab.encode(&p.sentence)).collect();
    let mut keep = encoded.len();
    let size = |k: usize| encoded[..k].iter().map(Vec::len).sum::<usize>() + k.saturating_sub(1) + tail.len();
    while keep > 0 && size(keep) > max_positions {
        keep -= 1;
    }
    let mut ids = Vec::with_capacity(size(keep));
    for (i, p) in encoded[..keep].iter().enumerate() {
        if i > 0 {
            ids.push(SEP_ID);
        }
        ids.extend_from_slice(p);
    }
    ids.extend(tail);
    Ok(ids)
}

/// Stages to run for the given ablation flags, in execution order.
pub fn planned_stages(use_pa: bool, use_pt: bool) -> Vec<Stage> {
    Stage::ALL
        .into_iter()
        .filter(|s| match s {
            Stage::GenPs => use_pt,
            Stage::Ka => use_pa,
            _ => true,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// File name relative to the run directory.
    pub checkpoint: String,
    pub checkpoint_checksum: String,
    pub data_checksum: String,
    /// Hash of the stage config, model config, data and input parameters.
    pub fingerprint: String,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub use_pa: bool,
    pub use_pt: bool,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(use_pa: bool, use_pt: bool) -> Self {
        Self {
            use_pa,
            use_pt,
            stages: Vec::new(),
        }
    }

    /// Recorded stages must be a prefix of the planned order.
    pub fn validate(&self) -> Result<()> {
        let plan = planned_stages(self.use_pa, self.use_pt);
        let recorded: Vec<Stage> = self.stages.iter().map(|r| r.stage).collect();
        if recorded.len() > plan.len() || recorded[..] != plan[..recorded.len()] {
            return Err(Error::Config(format!(
                "manifest stage order {recorded:?} does not follow the plan {plan:?}"
            )));
        }
        Ok(())
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPLIT_FILE: &str = "split.json";
pub const KA_CACHE_FILE: &str = "ka_pairs.tsv";
pub const PROTOTYPES_FILE: &str = "prototypes.json";
pub const PREDICTIONS_FILE: &str = "predictions.txt";
pub const REPORT_FILE: &str = "report.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Split, vocabulary and knowledge-augmentation pairs derived from the inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: FewShotSplit,
    pub vocab: Vocab,
    pub ka_pairs: Vec<KaRecord>,
}

#[derive(Debug, Clone, Serialize)]
struct SplitIds<'a> {
    size_label: usize,
    seed: u64,
    train: Vec<&'a str>,
    validation: Vec<&'a str>,
    test: Vec<&'a str>,
}

/// Builds the split and the shared vocabulary. The vocabulary covers every
/// linearized table, the training references and the corpus; held-out
/// references are excluded.
pub fn prepare(cfg: &RunConfig, dataset: &Dataset, corpus: &PrototypeCorpus) -> Result<Prepared> {
    let split = make_fewshot_split(dataset, cfg.data.size_label, cfg.seed, &cfg.data.split_config())?;
    let mut texts: Vec<String> = dataset
        .tables()
        .map(|t| linearize_table(t, LinearizationTemplate::KeyIsValue))
        .collect();
    texts.extend(split.train.iter().map(|r| r.reference.text.clone()));
    for id in corpus.table_ids() {
        texts.extend(corpus.candidates(id).iter().cloned());
    }
    let vocab = Vocab::build(&texts, cfg.data.min_count)?;
    let tables: Vec<Table> = dataset.tables().cloned().collect();
    let ka_pairs = build_augmentation_pairs(corpus, &tables, cfg.ka.max_masks_per_sentence)
        .iter()
        .map(KaRecord::from)
        .collect();
    Ok(Prepared { split, vocab, ka_pairs })
}

/// Writes the split ids, vocabulary and KA cache under `out_dir`.
pub fn write_prepared(prepared: &Prepared, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let s = &prepared.split;
    let ids = |rs: &'_ [Record]| -> Vec<String> { rs.iter().map(|r| r.table.id().to_string()).collect() };
    let (train, validation, test) = (ids(&s.train), ids(&s.validation), ids(&s.test));
    let split = SplitIds {
        size_label: s.size_label,
        seed: s.seed,
        train: train.iter().map(String::as_str).collect(),
        validation: validation.iter().map(String::as_str).collect(),
        test: test.iter().map(String::as_str).collect(),
    };
    let files = [
        (
            SPLIT_FILE,
            serde_json::to_string_pretty(&split).expect("split serializes"),
        ),
        (VOCAB_FILE, prepared.vocab.to_text()),
        (KA_CACHE_FILE, format_ka_cache(&prepared.ka_pairs)),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = out_dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

pub fn resolved_model_config(cfg: &RunConfig, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    }
}

pub fn resolved_selector_config(cfg: &RunConfig, vocab: &Vocab) -> SelectorConfig {
    SelectorConfig {
        vocab_size: vocab.len(),
        ..cfg.selector.clone()
    }
}

fn truncate_target(mut ids: Vec<usize>, max_positions: usize) -> Vec<usize> {
    ids.truncate(max_positions.saturating_sub(1));
    ids
}

/// Generator training pairs for labelled records.
pub fn encode_fewshot_pairs(
    records: &[Record],
    prototypes: &BTreeMap<String, PrototypeSet>,
    vocab: &Vocab,
    model: &ModelConfig,
    n: usize,
) -> Result<Vec<EncodedPair>> {
    records
        .iter()
        .map(|r| {
            let protos = prototypes
                .get(r.table.id())
                .cloned()
                .unwrap_or_else(|| PrototypeSet::empty(r.table.id(), n));
            let target = truncate_target(vocab.encode(&r.reference.text), model.max_positions);
            if target.is_empty() {
                return Err(Error::InvalidInput(format!("reference of `{}` is empty", r.table.id())));
            }
            Ok(EncodedPair {
                src: build_lm_input(&protos, &r.table, vocab, model.max_positions)?,
                target,
            })
        })
        .collect()
}

/// Knowledge-augmentation pairs: the masked prompt alone as input.
pub fn encode_ka_pairs(records: &[KaRecord], vocab: &Vocab, model: &ModelConfig) -> Vec<EncodedPair> {
    records
        .iter()
        .map(|r| {
            let mut src = vocab.encode_tokens(&r.masked);
            src.truncate(model.max_positions);
            EncodedPair {
                src,
                target: truncate_target(vocab.encode_tokens(&r.target), model.max_positions),
            }
        })
        .filter(|p| !p.src.is_empty() && !p.target.is_empty())
        .collect()
}

fn pairs_checksum(pairs: &[EncodedPair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        for seq in [&p.src, &p.target] {
            h.update((seq.len() as u64).to_le_bytes());
            for &id in seq.iter() {
                h.update((id as u64).to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

fn selector_examples(
    records: &[Record],
    corpus: &PrototypeCorpus,
    vocab: &Vocab,
    sel: &SelectorConfig,
) -> Vec<SelectorExample> {
    records
        .iter()
        .filter_map(|r| {
            SelectorExample::new(
                vocab,
                &r.table,
                &r.reference.text,
                corpus.candidates(r.table.id()),
                sel.max_positions,
            )
            .ok()
        })
        .collect()
}

fn examples_checksum(examples: &[SelectorExample]) -> String {
    let pairs: Vec<EncodedPair> = examples
        .iter()
        .flat_map(|e| {
            e.negatives.iter().map(|n| EncodedPair {
                src: e.positive.clone(),
                target: n.clone(),
            })
        })
        .collect();
    pairs_checksum(&pairs)
}

fn fingerprint(stage_cfg: &StageConfig, arch: &str, data_checksum: &str, input_checksum: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(stage_cfg).expect("stage config serializes"));
    h.update(arch.as_bytes());
    h.update(data_checksum.as_bytes());
    h.update(input_checksum.as_bytes());
    hex::encode(h.finalize())
}

/// Prototype sets for every table that has corpus candidates.
pub fn select_all_prototypes(
    selector: &SelectorParams,
    vocab: &Vocab,
    tables: &[Table],
    corpus: &PrototypeCorpus,
    n: usize,
) -> Result<BTreeMap<String, PrototypeSet>> {
    let mut out = BTreeMap::new();
    for t in tables {
        let candidates = corpus.candidates(t.id());
        if !candidates.is_empty() {
            out.insert(
                t.id().to_string(),
                select_prototypes(selector, vocab, t, candidates, n)?,
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Reuse stage checkpoints in the run directory whose fingerprints match.
    pub resume: bool,
    /// Stop after this stage; evaluation runs only when the last planned stage completes.
    pub stop_after: Option<Stage>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: ParamStore,
    pub model_config: ModelConfig,
    pub selector: Option<SelectorParams>,
    pub vocab: Vocab,
    pub manifest: RunManifest,
    pub loss_traces: BTreeMap<Stage, Vec<f64>>,
    /// Stages whose checkpoints were reused instead of trained.
    pub resumed: Vec<Stage>,
    pub predictions: Option<Vec<String>>,
    pub report: Option<MetricReport>,
    pub artifacts: Vec<PathBuf>,
}

struct StageRun<'a> {
    cfg: &'a RunConfig,
    out_dir: &'a Path,
    options: PipelineOptions,
    previous: Option<RunManifest>,
    manifest: RunManifest,
    traces: BTreeMap<Stage, Vec<f64>>,
    resumed: Vec<Stage>,
    artifacts: Vec<PathBuf>,
}

impl StageRun<'_> {
    /// Runs one stage, or reloads its checkpoint when resuming and nothing changed.
    fn execute(
        &mut self,
        stage: Stage,
        params: ParamStore,
        arch: &str,
        data_checksum: String,
        objective: &dyn Objective,
    ) -> Result<ParamStore> {
        let stage_cfg = self.cfg.stage_config(stage);
        let fp = fingerprint(&stage_cfg, arch, &data_checksum, &params.checksum());
        let path = self.out_dir.join(stage.checkpoint_file());
        let reusable = self
            .previous
            .as_ref()
            .filter(|_| self.options.resume)
            .and_then(|m| m.record(stage))
            .filter(|r| r.fingerprint == fp)
            .cloned();
        if let Some(record) = reusable {
            if let Ok(loaded) = load_checkpoint(&path) {
                if loaded.checksum() == record.checkpoint_checksum {
                    params.ensure_compatible(&loaded)?;
                    self.resumed.push(stage);
                    self.artifacts.push(path);
                    self.push_record(record)?;
                    return Ok(loaded);
                }
            }
        }
        let outcome = run_stage(&stage_cfg, params, objective)?;
        save_checkpoint(&outcome.params, &path)?;
        self.artifacts.push(path);
        let record = StageRecord {
            stage,
            checkpoint: stage.checkpoint_file(),
            checkpoint_checksum: outcome.params.checksum(),
            data_checksum,
            fingerprint: fp,
            steps: outcome.losses.len(),
            final_loss: outcome.losses.last().copied(),
        };
        self.traces.insert(stage, outcome.losses);
        self.push_record(record)?;
        Ok(outcome.params)
    }

    fn push_record(&mut self, record: StageRecord) -> Result<()> {
        self.manifest.stages.push(record);
        self.manifest.validate()?;
        write_atomic(&self.out_dir.join(MANIFEST_FILE), self.manifest.to_json().as_bytes())
    }

    fn done(&self, stage: Stage) -> bool {
        self.options.stop_after == Some(stage)
    }
}

/// Runs the enabled stages in order, writing a checkpoint and an updated
/// manifest after each, then generates and scores the test split.
pub fn run_pipeline(
    cfg: &RunConfig,
    dataset: &Dataset,
    corpus: &PrototypeCorpus,
    options: PipelineOptions,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let out_dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let prepared = prepare(cfg, dataset, corpus)?;
    let mut artifacts = write_prepared(&prepared, out_dir)?;
    write_atomic(&out_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    artifacts.push(out_dir.join("config.toml"));
    let Prepared { split, vocab, ka_pairs } = prepared;

    let model_cfg = resolved_model_config(cfg, &vocab);
    let sel_cfg = resolved_selector_config(cfg, &vocab);
    let model_arch = serde_json::to_string(&model_cfg).expect("model config serializes");
    let sel_arch = serde_json::to_string(&sel_cfg).expect("selector config serializes");
    let previous = if options.resume {
        RunManifest::load(&out_dir.join(MANIFEST_FILE)).ok()
    } else {
        None
    };
    let mut run = StageRun {
        cfg,
        out_dir,
        options,
        previous,
        manifest: RunManifest::new(cfg.use_pa, cfg.use_pt),
        traces: BTreeMap::new(),
        resumed: Vec::new(),
        artifacts,
    };
    let tables: Vec<Table> = dataset.tables().cloned().collect();
    let n = cfg.prototypes.n;
    let finish = |run: StageRun, model: ParamStore, selector: Option<SelectorParams>| PipelineOutput {
        model,
        model_config: model_cfg.clone(),
        selector,
        vocab: vocab.clone(),
        manifest: run.manifest,
        loss_traces: run.traces,
        resumed: run.resumed,
        predictions: None,
        report: None,
        artifacts: run.artifacts,
    };

    let mut selector = None;
    let mut prototypes = BTreeMap::new();
    if cfg.use_pt {
        let init = SelectorParams::init(sel_cfg.clone(), derive_seed(cfg.seed, "selector_init"))?;
        let examples = selector_examples(&split.train, corpus, &vocab, &sel_cfg);
        let objective = SelectorObjective {
            config: &sel_cfg,
            examples: &examples,
            negatives_k: cfg.prototypes.negatives_k,
        };
        let store = run.execute(
            Stage::GenPs,
            init.store,
            &sel_arch,
            examples_checksum(&examples),
            &objective,
        )?;
        let trained = SelectorParams::from_store(sel_cfg.clone(), store)?;
        prototypes = select_all_prototypes(&trained, &vocab, &tables, corpus, n)?;
        let cached: Vec<&PrototypeSet> = prototypes.values().collect();
        let path = out_dir.join(PROTOTYPES_FILE);
        write_atomic(
            &path,
            serde_json::to_string_pretty(&cached)
                .expect("prototypes serialize")
                .as_bytes(),
        )?;
        run.artifacts.push(path);
        selector = Some(trained);
        if run.done(Stage::GenPs) {
            let model = init_model(&model_cfg, derive_seed(cfg.seed, "model_init"))?;
            return Ok(finish(run, model, selector));
        }
    }

    let fewshot = encode_fewshot_pairs(&split.train, &prototypes, &vocab, &model_cfg, n)?;
    let fewshot_checksum = pairs_checksum(&fewshot);
    let model = init_model(&model_cfg, derive_seed(cfg.seed, "model_init"))?;
    // The generation module is trained without adapters; they stay at their
    // zero-initialised identity until the knowledge-augmentation stage.
    let lm = Seq2SeqObjective {
        config: &model_cfg,
        pairs: &fewshot,
        mode: AdapterMode::Bypassed,
    };
    let mut model = run.execute(Stage::GenLm, model, &model_arch, fewshot_checksum.clone(), &lm)?;
    if run.done(Stage::GenLm) {
        return Ok(finish(run, model, selector));
    }

    if cfg.use_pa {
        let ka = encode_ka_pairs(&ka_pairs, &vocab, &model_cfg);
        if ka.is_empty() {
            return Err(Error::InvalidInput(
                "no knowledge-augmentation pairs: no corpus sentence mentions a table value".into(),
            ));
        }
        let objective = Seq2SeqObjective {
            config: &model_cfg,
            pairs: &ka,
            mode: AdapterMode::Enabled,
        };
        model = run.execute(Stage::Ka, model, &model_arch, pairs_checksum(&ka), &objective)?;
        if run.done(Stage::Ka) {
            return Ok(finish(run, model, selector));
        }
    } else if run.done(Stage::Ka) {
        return Err(Error::Config("stage KA is disabled by use_pa = false".into()));
    }

    let ft = Seq2SeqObjective {
        config: &model_cfg,
        pairs: &fewshot,
        mode: AdapterMode::Enabled,
    };
    let model = run.execute(Stage::Finetune, model, &model_arch, fewshot_checksum, &ft)?;

    let (predictions, report) = evaluate_split(
        cfg,
        &model_cfg,
        &model,
        &vocab,
        &split.test,
        &prototypes,
        dataset,
        corpus,
    )?;
    let pred_path = out_dir.join(PREDICTIONS_FILE);
    let mut text = predictions.join("\n");
    text.push('\n');
    write_atomic(&pred_path, text.as_bytes())?;
    let report_path = out_dir.join(REPORT_FILE);
    write_atomic(&report_path, report.to_json().as_bytes())?;
    run.artifacts.push(pred_path);
    run.artifacts.push(report_path);
    let mut out = finish(run, model, selector);
    out.predictions = Some(predictions);
    out.report = Some(report);
    Ok(out)
}

/// Greedy generation for each record's table.
pub fn generate(
    model_cfg: &ModelConfig,
    model: &ParamStore,
    vocab: &Vocab,
    tables: &[&Table],
    prototypes: &BTreeMap<String, PrototypeSet>,
    n: usize,
    max_decode_len: usize,
) -> Result<Vec<String>> {
    tables
        .iter()
        .map(|t| {
            let protos = prototypes
                .get(t.id())
                .cloned()
                .unwrap_or_else(|| PrototypeSet::empty(t.id(), n));
            let src = build_lm_input(&protos, t, vocab, model_cfg.max_positions)?;
            let ids = greedy_decode(model_cfg, model, &src, max_decode_len)?;
            vocab.decode(&ids)
        })
        .collect()
}

/// The latest generator of a run directory, with what is needed to decode from it.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub stage: Stage,
    pub model_config: ModelConfig,
    pub model: ParamStore,
    pub vocab: Vocab,
    /// Cached prototype sets by table id; empty when the run had no selector.
    pub prototypes: BTreeMap<String, PrototypeSet>,
}

/// Restores the most recent generator checkpoint recorded in `cfg.out_dir`.
pub fn load_trained_run(cfg: &RunConfig) -> Result<TrainedRun> {
    let dir = cfg.out_dir.as_path();
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let record = manifest
        .stages
        .iter()
        .rev()
        .find(|r| r.stage != Stage::GenPs)
        .ok_or_else(|| Error::InvalidInput(format!("{} holds no generator checkpoint", dir.display())))?;
    let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
    let model_config = resolved_model_config(cfg, &vocab);
    let template = init_model(&model_config, 0)?;
    let model = load_compatible(&dir.join(&record.checkpoint), &template)?;
    if model.checksum() != record.checkpoint_checksum {
        return Err(Error::CheckpointChecksum);
    }
    let cache = dir.join(PROTOTYPES_FILE);
    let prototypes = if cache.is_file() {
        let text = std::fs::read_to_string(&cache).map_err(|e| Error::io(&cache, e))?;
        let sets: Vec<PrototypeSet> =
            serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", cache.display())))?;
        sets.into_iter().map(|s| (s.table_id.clone(), s)).collect()
    } else {
        BTreeMap::new()
    };
    Ok(TrainedRun {
        stage: record.stage,
        model_config,
        model,
        vocab,
        prototypes,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_split(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    model: &ParamStore,
    vocab: &Vocab,
    records: &[Record],
    prototypes: &BTreeMap<String, PrototypeSet>,
    dataset: &Dataset,
    corpus: &PrototypeCorpus,
) -> Result<(Vec<String>, MetricReport)> {
    let tables: Vec<&Table> = records.iter().map(|r| &r.table).collect();
    let predictions = generate(
        model_cfg,
        model,
        vocab,
        &tables,
        prototypes,
        cfg.prototypes.n,
        cfg.eval.max_decode_len,
    )?;
    let refs: Vec<&str> = records.iter().map(|r| r.reference.text.as_str()).collect();
    let owned: Vec<Table> = tables.into_iter().cloned().collect();
    let mut report = evaluate_corpus(
        &predictions,
        &refs,
        &owned,
        &MetricConfig {
            parent_lambda: cfg.eval.parent_lambda,
        },
    )?;
    report
        .input_checksums
        .insert("dataset".into(), sha256_hex(dataset.to_text().as_bytes()));
    report
        .input_checksums
        .insert("corpus".into(), sha256_hex(corpus.to_text().as_bytes()));
    Ok((predictions, report))
}
