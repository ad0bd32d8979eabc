//! `adaptgen`: prepare data, run the training stages, generate and score.
//!
//! Exit status is 0 on success, 2 on a usage error and 1 on any other
//! failure, which is reported as `error[category]: message` on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptgen::checkpoint::write_atomic;
use adaptgen::config::{Overrides, RunConfig};
use adaptgen::data::{make_fewshot_split, parse_table_line, Dataset, PrototypeCorpus, Table};
use adaptgen::metrics::{evaluate_corpus, MetricConfig};
use adaptgen::orchestrator::{
    generate, load_trained_run, prepare, run_pipeline, sha256_hex, write_prepared, PipelineOptions, PipelineOutput,
    Stage, PREDICTIONS_FILE,
};
use adaptgen::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "adaptgen", version)]
#[command(about = "Few-shot table-to-text generation with prototypes and knowledge adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the split, vocabulary and knowledge-augmentation cache.
    Prepare(RunArgs),
    /// Train the prototype selector (unless --no-pt) and the generator.
    PretrainGen(RunArgs),
    /// Train the adapters on masked prompts, reusing earlier stages.
    PretrainKa(RunArgs),
    /// Fine-tune on the few-shot pairs, reusing earlier stages, then score the test split.
    Finetune(RunArgs),
    /// Decode the test split, or the tables of --tables, with the latest generator.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Table file (`id<TAB>pairs`, extra fields ignored).
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Score hypotheses against references and tables.
    Evaluate(EvalArgs),
    /// Run every stage from scratch for one ablation setting.
    Ablate(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip knowledge augmentation; adapters stay at their identity initialisation.
    #[arg(long)]
    no_pa: bool,
    /// Skip the prototype selector; the generator sees tables only.
    #[arg(long)]
    no_pt: bool,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    prototypes_n: Option<usize>,
    #[arg(long)]
    negatives_k: Option<usize>,
    #[arg(long)]
    max_masks_per_sentence: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// One hypothesis per line.
    #[arg(long)]
    hyp: PathBuf,
    /// One reference per line, aligned with --hyp.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// One table per line, aligned with --hyp.
    #[arg(long)]
    tables: PathBuf,
    /// Report path.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    #[arg(long)]
    parent_lambda: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            no_pa: self.no_pa,
            no_pt: self.no_pt,
            out_dir: self.out.clone(),
            prototypes_n: self.prototypes_n,
            negatives_k: self.negatives_k,
            max_masks_per_sentence: self.max_masks_per_sentence,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_inputs(cfg: &RunConfig) -> Result<(Dataset, PrototypeCorpus)> {
    Ok((
        Dataset::load(&cfg.data.dataset)?,
        PrototypeCorpus::load(&cfg.data.corpus)?,
    ))
}

fn cmd_prepare(cfg: &RunConfig) -> Result<Vec<String>> {
    let (dataset, corpus) = load_inputs(cfg)?;
    let prepared = prepare(cfg, &dataset, &corpus)?;
    let mut written = write_prepared(&prepared, &cfg.out_dir)?;
    let config_path = cfg.out_dir.join("config.toml");
    write_atomic(&config_path, cfg.to_toml().as_bytes())?;
    written.push(config_path);
    let s = &prepared.split;
    let mut lines = vec![
        format!(
            "split train {} validation {} test {}",
            s.train.len(),
            s.validation.len(),
            s.test.len()
        ),
        format!("vocab {} tokens", prepared.vocab.len()),
        format!("knowledge-augmentation pairs {}", prepared.ka_pairs.len()),
    ];
    lines.extend(written.iter().map(|p| format!("wrote {}", p.display())));
    Ok(lines)
}

fn pipeline_summary(out: &PipelineOutput) -> Vec<String> {
    let mut lines = Vec::new();
    for r in &out.manifest.stages {
        let loss = r.final_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
        let resumed = if out.resumed.contains(&r.stage) {
            " (resumed)"
        } else {
            ""
        };
        lines.push(format!(
            "stage {} steps {} final_loss {} checkpoint {} sha256 {}{}",
            r.stage.name(),
            r.steps,
            loss,
            r.checkpoint,
            r.checkpoint_checksum,
            resumed
        ));
    }
    if let Some(report) = &out.report {
        lines.push(format!(
            "test bleu4 {:.4} rouge4_f1 {:.4} parent_f1 {:.4} supported {} contradicted {}",
            report.bleu4, report.rouge4_f1, report.parent_f1, report.entities_supported, report.entities_contradicted
        ));
    }
    let mut paths: Vec<&PathBuf> = out.artifacts.iter().collect();
    paths.sort();
    paths.dedup();
    lines.extend(paths.iter().map(|p| format!("wrote {}", p.display())));
    lines
}

fn cmd_pipeline(cfg: &RunConfig, options: PipelineOptions) -> Result<Vec<String>> {
    let (dataset, corpus) = load_inputs(cfg)?;
    let out = run_pipeline(cfg, &dataset, &corpus, options)?;
    Ok(pipeline_summary(&out))
}

fn cmd_generate(cfg: &RunConfig, tables_path: Option<&Path>) -> Result<Vec<String>> {
    let run = load_trained_run(cfg)?;
    let tables: Vec<Table> = match tables_path {
        Some(path) => read_text(path)?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_table_line(l, i + 1))
            .collect::<Result<_>>()?,
        None => {
            let dataset = Dataset::load(&cfg.data.dataset)?;
            let split = make_fewshot_split(&dataset, cfg.data.size_label, cfg.seed, &cfg.data.split_config())?;
            split.test.into_iter().map(|r| r.table).collect()
        }
    };
    let refs: Vec<&Table> = tables.iter().collect();
    let predictions = generate(
        &run.model_config,
        &run.model,
        &run.vocab,
        &refs,
        &run.prototypes,
        cfg.prototypes.n,
        cfg.eval.max_decode_len,
    )?;
    let mut text = predictions.join("\n");
    text.push('\n');
    let path = cfg.out_dir.join(PREDICTIONS_FILE);
    write_atomic(&path, text.as_bytes())?;
    Ok(vec![
        format!(
            "generated {} sentences with the {} checkpoint",
            predictions.len(),
            run.stage.name()
        ),
        format!("predictions sha256 {}", sha256_hex(text.as_bytes())),
        format!("wrote {}", path.display()),
    ])
}

fn non_empty_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.trim().is_empty()).collect()
}

fn cmd_evaluate(args: &EvalArgs) -> Result<Vec<String>> {
    let hyp_text = read_text(&args.hyp)?;
    let ref_text = read_text(&args.reference)?;
    let table_text = read_text(&args.tables)?;
    // hypotheses may legitimately be empty lines
    let hyps: Vec<&str> = hyp_text.lines().collect();
    let refs = non_empty_lines(&ref_text);
    let tables: Vec<Table> = non_empty_lines(&table_text)
        .iter()
        .enumerate()
        .map(|(i, l)| parse_table_line(l, i + 1))
        .collect::<Result<_>>()?;
    if tables.len() != refs.len() {
        return Err(Error::LengthMismatch {
            left_name: "tables".into(),
            left: tables.len(),
            right_name: "references".into(),
            right: refs.len(),
        });
    }
    let cfg = MetricConfig {
        parent_lambda: args.parent_lambda.unwrap_or(MetricConfig::default().parent_lambda),
    };
    if !(0.0..=1.0).contains(&cfg.parent_lambda) {
        return Err(Error::Config("--parent-lambda must lie in [0, 1]".into()));
    }
    let mut report = evaluate_corpus(&hyps, &refs, &tables, &cfg)?;
    for (name, text) in [("hyp", &hyp_text), ("ref", &ref_text), ("tables", &table_text)] {
        report.input_checksums.insert(name.into(), sha256_hex(text.as_bytes()));
    }
    write_atomic(&args.out, report.to_json().as_bytes())?;
    Ok(vec![
        format!(
            "bleu4 {:.4} rouge4 p/r/f {:.4}/{:.4}/{:.4} parent p/r/f {:.4}/{:.4}/{:.4}",
            report.bleu4,
            report.rouge4_precision,
            report.rouge4_recall,
            report.rouge4_f1,
            report.parent_precision,
            report.parent_recall,
            report.parent_f1
        ),
        format!(
            "examples {} supported {} contradicted {}",
            report.n_examples, report.entities_supported, report.entities_contradicted
        ),
        format!("wrote {}", args.out.display()),
    ])
}

fn dispatch(command: &Command) -> Result<Vec<String>> {
    match command {
        Command::Prepare(a) => cmd_prepare(&a.resolve()?),
        Command::PretrainGen(a) => cmd_pipeline(
            &a.resolve()?,
            PipelineOptions {
                resume: false,
                stop_after: Some(Stage::GenLm),
            },
        ),
        Command::PretrainKa(a) => {
            let cfg = a.resolve()?;
            if !cfg.use_pa {
                return Err(Error::Config("pretrain-ka needs use_pa; drop --no-pa".into()));
            }
            cmd_pipeline(
                &cfg,
                PipelineOptions {
                    resume: true,
                    stop_after: Some(Stage::Ka),
                },
            )
        }
        Command::Finetune(a) => cmd_pipeline(
            &a.resolve()?,
            PipelineOptions {
                resume: true,
                stop_after: None,
            },
        ),
        Command::Generate { run, tables } => cmd_generate(&run.resolve()?, tables.as_deref()),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_pipeline(&a.resolve()?, PipelineOptions::default()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
