//! Deterministic synthetic biography domain.
//!
//! Each table describes one person. The corpus holds, per table, sentences
//! that mention the table's values and sentences that mention none of them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, PrototypeCorpus, Record, Reference, Table};
use crate::error::Result;

const FIRST: &[&str] = &[
    "alan", "maria", "john", "sofia", "peter", "elena", "david", "laura", "james", "anna", "robert", "clara", "thomas",
    "irene", "samuel", "nora", "victor", "helen", "oscar", "julia",
];
const LAST: &[&str] = &[
    "oppenheimer",
    "garcia",
    "smith",
    "rossi",
    "novak",
    "ivanova",
    "keller",
    "moreau",
    "walsh",
    "lindqvist",
    "tanaka",
    "okafor",
    "brennan",
    "silva",
    "fischer",
    "dubois",
    "kowalski",
    "haddad",
    "murphy",
    "berg",
];
const PLACES: &[&str] = &[
    "new york", "paris", "lisbon", "oslo", "vienna", "dublin", "madrid", "prague", "boston", "lyon", "turin", "leeds",
];
const JOBS: &[&str] = &[
    "actor",
    "painter",
    "chemist",
    "novelist",
    "architect",
    "violinist",
    "engineer",
    "journalist",
    "botanist",
    "sculptor",
];
const NATIONS: &[&str] = &[
    "american", "french", "irish", "swedish", "spanish", "austrian", "czech", "british",
];
const FILLER: &[&str] = &[
    "the weather was mild that season .",
    "many visitors came to the museum .",
    "the river flooded the lower town .",
    "prices rose sharply during the winter .",
    "the old bridge was rebuilt in stone .",
    "a new railway line opened to the public .",
    "the harvest was poor for several years .",
    "local newspapers covered the election .",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub n_tables: usize,
    /// Corpus sentences per table that mention table values.
    pub mentions_per_table: usize,
    /// Corpus sentences per table that mention no table value.
    pub unrelated_per_table: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_tables: 120,
            mentions_per_table: 4,
            unrelated_per_table: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomain {
    pub dataset: Dataset,
    pub corpus: PrototypeCorpus,
}

struct Person {
    name: String,
    year: u32,
    place: &'static str,
    job: &'static str,
    nation: &'static str,
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty list")
}

fn reference(p: &Person, variant: usize) -> String {
    match variant {
        0 => format!(
            "{} ( born {} ) is a {} {} from {} .",
            p.name, p.year, p.nation, p.job, p.place
        ),
        1 => format!(
            "{} is a {} {} born in {} in {} .",
            p.name, p.nation, p.job, p.place, p.year
        ),
        _ => format!(
            "{} , born {} in {} , is a {} {} .",
            p.name, p.year, p.place, p.nation, p.job
        ),
    }
}

fn mention(p: &Person, variant: usize) -> String {
    match variant % 6 {
        0 => format!("{} worked as a {} for many years .", p.name, p.job),
        1 => format!("{} grew up in {} .", p.name, p.place),
        2 => format!("in {} , {} was born .", p.year, p.name),
        3 => format!("the {} {} became well known .", p.nation, p.job),
        4 => format!("{} later returned to {} .", p.name, p.place),
        _ => format!("critics praised {} as a {} .", p.name, p.job),
    }
}

pub fn synthetic_domain(cfg: &SyntheticConfig) -> Result<SyntheticDomain> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_tables);
    let mut corpus = PrototypeCorpus::new();
    for i in 0..cfg.n_tables {
        let p = Person {
            name: format!("{} {}", pick(&mut rng, FIRST), pick(&mut rng, LAST)),
            year: rng.gen_range(1900..2000),
            place: pick(&mut rng, PLACES),
            job: pick(&mut rng, JOBS),
            nation: pick(&mut rng, NATIONS),
        };
        let id = format!("p{i:04}");
        let table = Table::from_pairs(
            id.clone(),
            [
                ("name", p.name.clone()),
                ("birth_date", p.year.to_string()),
                ("birth_place", p.place.to_string()),
                ("nationality", p.nation.to_string()),
                ("occupation", p.job.to_string()),
            ],
        )?;
        let text = reference(&p, rng.gen_range(0..3));
        records.push(Record {
            reference: Reference {
                table_id: id.clone(),
                text,
            },
            table,
        });
        let start = rng.gen_range(0..6);
        for k in 0..cfg.mentions_per_table {
            corpus.push(id.clone(), mention(&p, start + k))?;
        }
        for _ in 0..cfg.unrelated_per_table {
            corpus.push(id.clone(), pick(&mut rng, FILLER))?;
        }
    }
    Ok(SyntheticDomain {
        dataset: Dataset::new(records)?,
        corpus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::build_augmentation_pairs;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SyntheticConfig {
            n_tables: 10,
            ..SyntheticConfig::default()
        };
        let a = synthetic_domain(&cfg).unwrap();
        assert_eq!(a, synthetic_domain(&cfg).unwrap());
        assert_eq!(a.dataset.len(), 10);
        assert_eq!(a.corpus.total_sentences(), 60);
        let tables: Vec<Table> = a.dataset.tables().cloned().collect();
        // every mention sentence yields a masked prompt, filler never does
        assert_eq!(build_augmentation_pairs(&a.corpus, &tables, None).len(), 40);
    }
}
