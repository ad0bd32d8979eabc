//! Regenerates the files under `fixtures/`.
//!
//! Usage: `cargo run -p adaptgen-core --example write_fixtures [OUT_DIR]`

use std::path::PathBuf;

use adaptgen::synthetic::{synthetic_domain, SyntheticConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &["a", "b", "c", "d", "e", "f", "g", "h"];

fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let len = rng.gen_range(min..=max);
    (0..len)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn metric_cases() -> String {
    let mut lines = vec![
        "a b c d e\ta b c d e\ta b|c d e".to_string(),
        "a b c d\te f g h\tx".to_string(),
        "\ta b c\ta".to_string(),
        "a b c d e\ta b c d f\t".to_string(),
        "a x b\ta b\ta|b".to_string(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    while lines.len() < 50 {
        let reference = sentence(&mut rng, 1, 7);
        let hyp = if rng.gen_bool(0.3) {
            // a perturbed copy of the reference
            let mut t: Vec<String> = reference.split(' ').map(str::to_string).collect();
            let i = rng.gen_range(0..t.len());
            t[i] = WORDS.choose(&mut rng).unwrap().to_string();
            t.join(" ")
        } else {
            sentence(&mut rng, 0, 7)
        };
        let n_values = rng.gen_range(0..=3);
        let values: Vec<String> = (0..n_values).map(|_| sentence(&mut rng, 1, 3)).collect();
        lines.push(format!("{hyp}\t{reference}\t{}", values.join("|")));
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    std::fs::create_dir_all(&out).expect("create fixture dir");
    let domain = synthetic_domain(&SyntheticConfig::default()).expect("synthetic domain");
    let files = [
        ("dataset.tsv", domain.dataset.to_text()),
        ("corpus.tsv", domain.corpus.to_text()),
        ("metric_cases.tsv", metric_cases()),
    ];
    for (name, text) in files {
        std::fs::write(out.join(name), text).expect("write fixture");
        println!("wrote {}", out.join(name).display());
    }
}
