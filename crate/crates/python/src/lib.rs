//! Python bindings: metrics, tokenization and the training pipeline.

use std::path::PathBuf;

use adaptgen::config::{Overrides, RunConfig};
use adaptgen::data::{linearize_table, Dataset, LinearizationTemplate, PrototypeCorpus, Table};
use adaptgen::metrics::{evaluate_corpus, MetricConfig, MetricReport};
use adaptgen::orchestrator::{generate as generate_texts, load_trained_run, run_pipeline, PipelineOptions, Stage};
use adaptgen::selector;
use adaptgen::tokenizer;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(pyadaptgen, AdaptgenError, PyException);

fn to_py(e: adaptgen::Error) -> PyErr {
    AdaptgenError::new_err(format!("{}: {e}", e.category()))
}

fn table_from(id: usize, pairs: Vec<(String, String)>) -> PyResult<Table> {
    Table::from_pairs(format!("t{id}"), pairs).map_err(to_py)
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("bleu4", r.bleu4)?;
    d.set_item("rouge4_precision", r.rouge4_precision)?;
    d.set_item("rouge4_recall", r.rouge4_recall)?;
    d.set_item("rouge4_f1", r.rouge4_f1)?;
    d.set_item("parent_precision", r.parent_precision)?;
    d.set_item("parent_recall", r.parent_recall)?;
    d.set_item("parent_f1", r.parent_f1)?;
    d.set_item("n_examples", r.n_examples)?;
    d.set_item("entities_supported", r.entities_supported)?;
    d.set_item("entities_contradicted", r.entities_contradicted)?;
    d.set_item("parent_lambda", r.parent_lambda)?;
    Ok(d)
}

/// Splits text into word and punctuation tokens, keeping case.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    tokenizer::tokenize(text)
}

/// Renders `(attribute, value)` pairs as "Attribute is value; ..." text.
#[pyfunction]
fn linearize(pairs: Vec<(String, String)>) -> PyResult<String> {
    Ok(linearize_table(
        &table_from(0, pairs)?,
        LinearizationTemplate::KeyIsValue,
    ))
}

/// Indices of the `n` highest scores, best first; ties go to the lower index.
#[pyfunction]
fn select_top_n(scores: Vec<f64>, n: usize) -> Vec<usize> {
    selector::select_top_n(&scores, n)
}

/// Corpus BLEU-4, ROUGE-4 and PARENT for aligned hypotheses, references and tables.
#[pyfunction]
#[pyo3(signature = (hyps, refs, tables, parent_lambda = 0.5))]
fn evaluate<'py>(
    py: Python<'py>,
    hyps: Vec<String>,
    refs: Vec<String>,
    tables: Vec<Vec<(String, String)>>,
    parent_lambda: f64,
) -> PyResult<Bound<'py, PyDict>> {
    if !(0.0..=1.0).contains(&parent_lambda) {
        return Err(PyValueError::new_err("parent_lambda must lie in [0, 1]"));
    }
    let tables = tables
        .into_iter()
        .enumerate()
        .map(|(i, p)| table_from(i, p))
        .collect::<PyResult<Vec<_>>>()?;
    let report = py
        .detach(|| evaluate_corpus(&hyps, &refs, &tables, &MetricConfig { parent_lambda }))
        .map_err(to_py)?;
    report_dict(py, &report)
}

fn resolve(config: Option<PathBuf>, overrides: Overrides) -> PyResult<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(&path).map_err(to_py)?,
        None => RunConfig::default(),
    };
    cfg.apply(&overrides);
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn parse_stage(name: &str) -> PyResult<Stage> {
    Stage::ALL
        .into_iter()
        .find(|s| s.name().eq_ignore_ascii_case(name))
        .ok_or_else(|| PyValueError::new_err(format!("unknown stage {name:?}")))
}

/// Runs the stages for a configuration file and returns their records and the test report.
#[pyfunction]
#[pyo3(signature = (config = None, *, seed = None, out = None, no_pa = false, no_pt = false, resume = false, stop_after = None))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    no_pa: bool,
    no_pt: bool,
    resume: bool,
    stop_after: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = resolve(
        config,
        Overrides {
            seed,
            no_pa,
            no_pt,
            out_dir: out,
            ..Overrides::default()
        },
    )?;
    let options = PipelineOptions {
        resume,
        stop_after: stop_after.map(parse_stage).transpose()?,
    };
    let output = py
        .detach(|| {
            let dataset = Dataset::load(&cfg.data.dataset)?;
            let corpus = PrototypeCorpus::load(&cfg.data.corpus)?;
            run_pipeline(&cfg, &dataset, &corpus, options)
        })
        .map_err(to_py)?;
    let stages = output
        .manifest
        .stages
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("stage", r.stage.name())?;
            d.set_item("steps", r.steps)?;
            d.set_item("final_loss", r.final_loss)?;
            d.set_item("checkpoint", cfg.out_dir.join(&r.checkpoint))?;
            d.set_item("sha256", &r.checkpoint_checksum)?;
            d.set_item("resumed", output.resumed.contains(&r.stage))?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let result = PyDict::new(py);
    result.set_item("stages", stages)?;
    result.set_item(
        "report",
        output.report.as_ref().map(|r| report_dict(py, r)).transpose()?,
    )?;
    result.set_item("predictions", output.predictions)?;
    Ok(result)
}

/// Decodes tables with the latest generator checkpoint of a finished run.
#[pyfunction]
#[pyo3(signature = (config, tables, *, out = None))]
fn generate(
    py: Python<'_>,
    config: PathBuf,
    tables: Vec<Vec<(String, String)>>,
    out: Option<PathBuf>,
) -> PyResult<Vec<String>> {
    let cfg = resolve(
        Some(config),
        Overrides {
            out_dir: out,
            ..Overrides::default()
        },
    )?;
    let tables = tables
        .into_iter()
        .enumerate()
        .map(|(i, p)| table_from(i, p))
        .collect::<PyResult<Vec<_>>>()?;
    py.detach(|| {
        let trained = load_trained_run(&cfg)?;
        let refs: Vec<&Table> = tables.iter().collect();
        generate_texts(
            &trained.model_config,
            &trained.model,
            &trained.vocab,
            &refs,
            &trained.prototypes,
            cfg.prototypes.n,
            cfg.eval.max_decode_len,
        )
    })
    .map_err(to_py)
}

#[pymodule]
pub fn pyadaptgen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AdaptgenError", m.py().get_type::<AdaptgenError>())?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(linearize, m)?)?;
    m.add_function(wrap_pyfunction!(select_top_n, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
