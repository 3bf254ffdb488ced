//! A seeded keyword corpus: each class plants a handful of indicative words
//! into otherwise random filler text.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::RawExample;
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 8] = ["sports", "politics", "science", "business", "travel", "health", "music", "food"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    /// Indicative words per class.
    pub keywords: usize,
    /// Shared filler words.
    pub fillers: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Planted keywords per document, inclusive range.
    pub min_planted: usize,
    pub max_planted: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            train: 2000,
            test: 500,
            keywords: 8,
            fillers: 200,
            min_len: 12,
            max_len: 30,
            min_planted: 2,
            max_planted: 4,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    /// Distinct word types the corpus can contain.
    pub fn word_types(&self) -> usize {
        self.classes * self.keywords + self.fillers
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!("synthetic classes must be in 2..={}", CLASS_NAMES.len())));
        }
        if self.keywords == 0 || self.fillers == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("synthetic corpus needs keywords, fillers and min_len ≤ max_len".into()));
        }
        if self.min_planted == 0 || self.min_planted > self.max_planted || self.max_planted > self.min_len {
            return Err(Error::Config("synthetic planted range must be non-empty and fit in min_len".into()));
        }
        Ok(())
    }
}

/// Train and test splits, classes balanced and interleaved.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Vec<RawExample>,
    pub test: Vec<RawExample>,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let keywords: Vec<Vec<String>> = CLASS_NAMES[..cfg.classes]
        .iter()
        .map(|name| (0..cfg.keywords).map(|k| format!("{name}{k}")).collect())
        .collect();
    let fillers: Vec<String> = (0..cfg.fillers).map(|i| format!("w{i:03}")).collect();

    let doc = |i: usize, rng: &mut ChaCha8Rng| {
        let class = i % cfg.classes;
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut words: Vec<&str> = (0..len).map(|_| fillers.choose(rng).unwrap().as_str()).collect();
        let planted = rng.random_range(cfg.min_planted..=cfg.max_planted);
        for _ in 0..planted {
            let at = rng.random_range(0..len);
            words[at] = keywords[class].choose(rng).unwrap();
        }
        RawExample {
            label: CLASS_NAMES[class].to_owned(),
            text: words.join(" "),
            line: i + 2,
        }
    };
    let train = (0..cfg.train).map(|i| doc(i, &mut rng)).collect();
    let test = (0..cfg.test).map(|i| doc(i, &mut rng)).collect();
    Ok(SyntheticCorpus { train, test })
}

/// Writes `label,text` CSV with a header.
pub fn write_csv(path: &Path, rows: &[RawExample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["label", "text"]).map_err(io)?;
    for row in rows {
        w.write_record([&row.label, &row.text]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
