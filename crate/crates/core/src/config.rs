//! Run configuration: one TOML file selecting data, model, stage budgets and
//! ablation flags.
//!
//! Resolution order is command-line override, then file value, then the
//! built-in default. Relative data and output paths in a file are resolved
//! against the directory containing that file.
//!
//! ```toml
//! seed = 1
//! out_dir = "runs/toy"
//! use_pa = true
//! use_pt = true
//!
//! [data]
//! dataset = "../fixtures/dataset.tsv"
//! corpus = "../fixtures/corpus.tsv"
//! size_label = 50
//! validation_size = 20
//! test_size = 20
//!
//! [model]
//! d_model = 32
//!
//! [prototypes]
//! n = 3
//! negatives_k = 5
//!
//! [stages.gen_lm]
//! learning_rate = 1e-3
//! max_steps = 400
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::SplitConfig;
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::orchestrator::{Stage, StageConfig};
use crate::selector::SelectorConfig;

pub const DEFAULT_LEARNING_RATE: f64 = 3e-5;
pub const DEFAULT_BATCH_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: PathBuf,
    pub corpus: PathBuf,
    pub size_label: usize,
    pub validation_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset.tsv"),
            corpus: PathBuf::from("corpus.tsv"),
            size_label: 50,
            validation_size: SplitConfig::default().validation_size,
            test_size: None,
            min_count: 1,
        }
    }
}

impl DataConfig {
    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            validation_size: self.validation_size,
            test_size: self.test_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeConfig {
    pub n: usize,
    pub negatives_k: usize,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self { n: 3, negatives_k: 5 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KaConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_masks_per_sentence: Option<usize>,
}

/// Per-stage overrides; unset fields fall back to the stage defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageBudget {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageBudgets {
    pub gen_ps: StageBudget,
    pub gen_lm: StageBudget,
    pub ka: StageBudget,
    pub finetune: StageBudget,
}

impl StageBudgets {
    pub fn get(&self, stage: Stage) -> &StageBudget {
        match stage {
            Stage::GenPs => &self.gen_ps,
            Stage::GenLm => &self.gen_lm,
            Stage::Ka => &self.ka,
            Stage::Finetune => &self.finetune,
        }
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut StageBudget {
        match stage {
            Stage::GenPs => &mut self.gen_ps,
            Stage::GenLm => &mut self.gen_lm,
            Stage::Ka => &mut self.ka,
            Stage::Finetune => &mut self.finetune,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_decode_len: usize,
    pub parent_lambda: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_decode_len: 64,
            parent_lambda: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub use_pa: bool,
    pub use_pt: bool,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    /// `vocab_size` is ignored; it is set from the built vocabulary.
    pub model: ModelConfig,
    /// `vocab_size` is ignored; it is set from the built vocabulary.
    pub selector: SelectorConfig,
    pub prototypes: PrototypeConfig,
    pub ka: KaConfig,
    pub stages: StageBudgets,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            use_pa: true,
            use_pt: true,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            selector: SelectorConfig::default(),
            prototypes: PrototypeConfig::default(),
            ka: KaConfig::default(),
            stages: StageBudgets::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub no_pa: bool,
    pub no_pt: bool,
    pub out_dir: Option<PathBuf>,
    pub prototypes_n: Option<usize>,
    pub negatives_k: Option<usize>,
    pub max_masks_per_sentence: Option<usize>,
}

impl RunConfig {
    /// Parses TOML text; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [&mut cfg.data.dataset, &mut cfg.data.corpus, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if o.no_pa {
            self.use_pa = false;
        }
        if o.no_pt {
            self.use_pt = false;
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(n) = o.prototypes_n {
            self.prototypes.n = n;
        }
        if let Some(k) = o.negatives_k {
            self.prototypes.negatives_k = k;
        }
        if let Some(m) = o.max_masks_per_sentence {
            self.ka.max_masks_per_sentence = Some(m);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prototypes.n == 0 {
            return Err(Error::Config("prototypes.n must be at least 1".into()));
        }
        if self.prototypes.negatives_k == 0 {
            return Err(Error::Config("prototypes.negatives_k must be at least 1".into()));
        }
        if self.ka.max_masks_per_sentence == Some(0) {
            return Err(Error::Config("ka.max_masks_per_sentence must be at least 1".into()));
        }
        if self.eval.max_decode_len == 0 {
            return Err(Error::Config("eval.max_decode_len must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.parent_lambda) {
            return Err(Error::Config("eval.parent_lambda must lie in [0, 1]".into()));
        }
        for stage in Stage::ALL {
            self.stage_config(stage).validate()?;
        }
        Ok(())
    }

    /// Fully resolved configuration of one stage.
    pub fn stage_config(&self, stage: Stage) -> StageConfig {
        let b = self.stages.get(stage);
        StageConfig {
            stage,
            learning_rate: b.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE),
            batch_size: b.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
            max_steps: b.max_steps.unwrap_or(stage.default_steps()),
            seed: b.seed.unwrap_or_else(|| derive_seed(self.seed, stage.key())),
            freeze_policy: stage.freeze_policy(),
            data_source: stage.data_source(),
            optimizer: b.optimizer.unwrap_or(OptimizerKind::Adam),
        }
    }
}

/// Stable 64-bit seed for a named sub-task of a run.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
