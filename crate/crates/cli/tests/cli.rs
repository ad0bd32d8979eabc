use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adaptgen::config::RunConfig;
use adaptgen::metrics::MetricReport;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .canonicalize()
        .unwrap()
}

fn adaptgen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptgen"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stage_names(o: &Output) -> Vec<String> {
    stdout(o)
        .lines()
        .filter_map(|l| l.strip_prefix("stage "))
        .map(|l| l.split(' ').next().unwrap().to_string())
        .collect()
}

/// A config with tiny budgets; `extra` is appended at top level.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let f = fixtures();
    let text = format!(
        r#"{extra}
[data]
dataset = "{}"
corpus = "{}"
size_label = 50
validation_size = 10
test_size = 10

[model]
d_model = 8
n_heads = 2
n_encoder_layers = 1
n_decoder_layers = 1
d_ffn = 16
d_bottleneck = 2

[selector]
d_model = 8
n_heads = 2
n_layers = 0
d_ffn = 8

[stages.gen_ps]
max_steps = 3
batch_size = 2
[stages.gen_lm]
max_steps = 3
batch_size = 2
[stages.ka]
max_steps = 3
batch_size = 2
[stages.finetune]
max_steps = 3
batch_size = 2

[eval]
max_decode_len = 6
"#,
        f.join("dataset.tsv").display(),
        f.join("corpus.tsv").display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn resolved(dir: &Path) -> RunConfig {
    RunConfig::from_toml_str(
        &std::fs::read_to_string(dir.join("config.toml")).unwrap(),
        Path::new("/"),
    )
    .unwrap()
}

#[test]
fn precedence_matrix() {
    // (file value, flag value, expected) for seed, prototypes.n and out_dir
    let cases: [(Option<&str>, Option<&str>, &str); 4] = [
        (None, None, "default"),
        (Some("3"), None, "file"),
        (None, Some("5"), "flag"),
        (Some("3"), Some("5"), "flag"),
    ];
    for (file, flag, winner) in cases {
        let dir = tempfile::tempdir().unwrap();
        let mut extra = String::new();
        if let Some(v) = file {
            extra.push_str(&format!("seed = {v}\nout_dir = \"from_file\"\n[prototypes]\nn = {v}\n"));
        }
        let config = write_config(dir.path(), &extra);
        let mut args = vec!["prepare", "--config", config.to_str().unwrap()];
        if let Some(v) = flag {
            args.extend(["--seed", v, "--prototypes-n", v, "--out", "from_flag"]);
        }
        let out = adaptgen(dir.path(), &args);
        assert!(out.status.success(), "{}", stderr(&out));
        let (expected, out_dir) = match winner {
            "default" => (RunConfig::default().seed, dir.path().join("out")),
            "file" => (3, dir.path().join("from_file")),
            _ => (5, dir.path().join("from_flag")),
        };
        let cfg = resolved(&out_dir);
        assert_eq!(cfg.seed, expected, "{winner}");
        let n = if winner == "default" {
            RunConfig::default().prototypes.n
        } else {
            expected as usize
        };
        assert_eq!(cfg.prototypes.n, n, "{winner}");
    }
}

#[test]
fn pretrain_gen_is_rerunnable() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let args = [
        "pretrain-gen",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        "run",
    ];
    let first = adaptgen(dir.path(), &args);
    assert!(first.status.success(), "{}", stderr(&first));
    let bytes = std::fs::read(dir.path().join("run/gen_lm.ckpt")).unwrap();
    let second = adaptgen(dir.path(), &args);
    assert!(second.status.success());
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(bytes, std::fs::read(dir.path().join("run/gen_lm.ckpt")).unwrap());
    assert_eq!(stage_names(&first), ["GEN_PS", "GEN_LM"]);
}

#[test]
fn staged_commands_then_generate() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let c = config.to_str().unwrap();
    for cmd in ["pretrain-gen", "pretrain-ka", "finetune"] {
        let out = adaptgen(dir.path(), &[cmd, "--config", c, "--out", "run"]);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
    }
    let fin = adaptgen(dir.path(), &["finetune", "--config", c, "--out", "run"]);
    let text = stdout(&fin);
    assert_eq!(text.matches("(resumed)").count(), 4, "{text}");
    assert!(text.contains("test bleu4"));
    let generated = adaptgen(dir.path(), &["generate", "--config", c, "--out", "run"]);
    assert!(generated.status.success(), "{}", stderr(&generated));
    assert!(stdout(&generated).contains("generated 10 sentences with the FINETUNE checkpoint"));
    let lines = std::fs::read_to_string(dir.path().join("run/predictions.txt")).unwrap();
    assert_eq!(lines.lines().count(), 10);
}

#[test]
fn ablate_without_pa_and_pt_runs_backbone_only() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = adaptgen(
        dir.path(),
        &[
            "ablate",
            "--config",
            config.to_str().unwrap(),
            "--no-pa",
            "--no-pt",
            "--out",
            "run",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stage_names(&out), ["GEN_LM", "FINETUNE"]);
    let manifest = std::fs::read_to_string(dir.path().join("run/manifest.json")).unwrap();
    assert!(
        manifest.contains("\"use_pa\": false") && manifest.contains("\"use_pt\": false"),
        "{manifest}"
    );
}

#[test]
fn pretrain_ka_refuses_no_pa() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = adaptgen(
        dir.path(),
        &["pretrain-ka", "--config", config.to_str().unwrap(), "--no-pa"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[config]"), "{}", stderr(&out));
}

#[test]
fn evaluate_writes_report_and_rejects_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("hyp.txt"), "ann lee is a singer .\nbo is a painter .\n").unwrap();
    std::fs::write(p.join("ref.txt"), "ann lee is a singer .\nbo paints .\n").unwrap();
    std::fs::write(
        p.join("tables.tsv"),
        "t1\tname=ann lee\x1foccupation=singer\nt2\tname=bo\n",
    )
    .unwrap();
    let ok = adaptgen(
        p,
        &[
            "evaluate",
            "--hyp",
            "hyp.txt",
            "--ref",
            "ref.txt",
            "--tables",
            "tables.tsv",
            "--out",
            "r.json",
        ],
    );
    assert!(ok.status.success(), "{}", stderr(&ok));
    let report: MetricReport = serde_json::from_str(&std::fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    assert_eq!(report.n_examples, 2);
    assert_eq!(report.input_checksums.len(), 3);
    assert!(report.check_invariants());

    std::fs::write(p.join("ref.txt"), "ann lee is a singer .\n").unwrap();
    let bad = adaptgen(
        p,
        &[
            "evaluate",
            "--hyp",
            "hyp.txt",
            "--ref",
            "ref.txt",
            "--tables",
            "tables.tsv",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
    let msg = stderr(&bad);
    assert!(msg.starts_with("error[input]"), "{msg}");
    assert!(msg.contains('2') && msg.contains('1'), "{msg}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(adaptgen(dir.path(), &["bogus"]).status.code(), Some(2));
    assert_eq!(
        adaptgen(dir.path(), &["prepare", "--no-such-flag"]).status.code(),
        Some(2)
    );
    assert_eq!(adaptgen(dir.path(), &["evaluate", "--hyp", "x"]).status.code(), Some(2));
    let v = adaptgen(dir.path(), &["--version"]);
    assert!(v.status.success());
    assert!(stdout(&v).starts_with("adaptgen "));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = adaptgen(dir.path(), &["prepare"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[io]"), "{}", stderr(&out));
}
