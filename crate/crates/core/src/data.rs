//! Parallel-corpus ingestion and a seeded synthetic toy language.
//!
//! The toy language maps each source pseudo-word to a target stem through a
//! random bijection, then appends a suffix chosen by the word's position in
//! the sentence. The tool dictionary only knows bare stems, so a model that
//! copies dictionary output verbatim is still penalized.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::DictionaryEntry;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: String,
    pub target: String,
    pub id: usize,
}

/// Reads `source<TAB>target` lines. Ids are 0-based line indices, so they
/// skip over blank lines.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ParallelPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text).map_err(|(line, message)| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    })
}

pub fn parse_corpus(text: &str) -> std::result::Result<Vec<ParallelPair>, (usize, String)> {
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err((idx + 1, format!("expected 2 tab-separated fields, found {}", fields.len())));
        }
        let (source, target) = (fields[0].trim(), fields[1].trim());
        if source.is_empty() || target.is_empty() {
            return Err((idx + 1, "empty source or target field".into()));
        }
        pairs.push(ParallelPair {
            source: source.into(),
            target: target.into(),
            id: idx,
        });
    }
    Ok(pairs)
}

pub fn write_corpus(path: impl AsRef<Path>, pairs: &[ParallelPair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in pairs {
        writeln!(out, "{}\t{}", p.source, p.target).expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_entries(path: impl AsRef<Path>, entries: &[DictionaryEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        writeln!(out, "{}\t{}", e.source_text, e.target_text).expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLanguageSpec {
    pub lexicon_size: usize,
    /// Inclusive range of words per sentence.
    pub sentence_length_range: [usize; 2],
    /// Fraction of the lexicon listed in the tool dictionary.
    pub dict_coverage: f64,
    /// Fraction of the lexicon allowed in training sentences.
    pub corpus_coverage: f64,
    pub suffix_rule_count: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for ToyLanguageSpec {
    fn default() -> Self {
        ToyLanguageSpec {
            lexicon_size: 300,
            sentence_length_range: [2, 4],
            dict_coverage: 0.9,
            corpus_coverage: 0.6,
            suffix_rule_count: 3,
            train_size: 2000,
            test_size: 200,
            seed: 1,
        }
    }
}

impl ToyLanguageSpec {
    fn covered_count(&self) -> usize {
        (self.corpus_coverage * self.lexicon_size as f64).round() as usize
    }

    fn dict_count(&self) -> usize {
        (self.dict_coverage * self.lexicon_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        let [lo, hi] = self.sentence_length_range;
        if self.lexicon_size == 0 {
            return bad("lexicon_size must be positive".into());
        }
        if lo == 0 || lo > hi {
            return bad(format!("invalid sentence_length_range [{lo}, {hi}]"));
        }
        for (name, c) in [("dict_coverage", self.dict_coverage), ("corpus_coverage", self.corpus_coverage)] {
            if !(0.0..=1.0).contains(&c) {
                return bad(format!("{name} = {c} is outside [0, 1]"));
            }
        }
        if self.suffix_rule_count > CONSONANTS.len() * VOWELS.len() {
            return bad(format!("at most {} distinct suffixes exist", CONSONANTS.len() * VOWELS.len()));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("train_size and test_size must be positive".into());
        }
        if self.covered_count() == 0 {
            return bad("corpus_coverage leaves no words for training".into());
        }
        if self.corpus_coverage < 1.0 && self.covered_count() == self.lexicon_size {
            return bad("corpus_coverage below 1 rounds to an empty held-out set".into());
        }
        Ok(())
    }
}

/// A generated toy language with its corpora and tool dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLanguage {
    pub spec: ToyLanguageSpec,
    /// `(source word, target stem)` for every lexicon item.
    pub lexicon: Vec<(String, String)>,
    pub suffixes: Vec<String>,
    /// Lexicon indices allowed in training sentences.
    pub covered: Vec<usize>,
    pub train: Vec<ParallelPair>,
    pub test: Vec<ParallelPair>,
    /// Bare-stem dictionary entries in file order.
    pub dictionary: Vec<DictionaryEntry>,
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwyz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word<R: Rng>(rng: &mut R, min: usize, max: usize) -> String {
    let len = rng.gen_range(min..=max);
    let start_vowel = rng.gen_bool(0.3);
    (0..len)
        .map(|i| {
            let set = if (i % 2 == 0) ^ start_vowel { CONSONANTS } else { VOWELS };
            set[rng.gen_range(0..set.len())] as char
        })
        .collect()
}

fn distinct_words<R: Rng>(rng: &mut R, n: usize, min: usize, max: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, min, max);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Builds a toy language; the same spec always yields the same output.
pub fn generate_toy_language(spec: &ToyLanguageSpec) -> Result<ToyLanguage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.lexicon_size;
    let mut taken = HashSet::new();
    let sources = distinct_words(&mut rng, n, 3, 8, &mut taken);
    // stems stay short enough that stem + suffix is at most 8 characters
    let stems = distinct_words(&mut rng, n, 3, 6, &mut taken);
    let mut suffix_taken = HashSet::new();
    let suffixes: Vec<String> = (0..spec.suffix_rule_count)
        .map(|_| loop {
            let s: String = [
                CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char,
                VOWELS[rng.gen_range(0..VOWELS.len())] as char,
            ]
            .iter()
            .collect();
            if suffix_taken.insert(s.clone()) {
                break s;
            }
        })
        .collect();
    let lexicon: Vec<(String, String)> = sources.into_iter().zip(stems).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut covered = order[..spec.covered_count()].to_vec();
    covered.sort_unstable();
    order.shuffle(&mut rng);
    let in_dict = &order[..spec.dict_count()];
    let dictionary = in_dict
        .iter()
        .enumerate()
        .map(|(ordinal, &i)| DictionaryEntry {
            source_text: lexicon[i].0.clone(),
            target_text: lexicon[i].1.clone(),
            ordinal,
        })
        .collect();

    let all: Vec<usize> = (0..n).collect();
    let make = |pool: &[usize], count: usize, rng: &mut ChaCha8Rng| -> Vec<ParallelPair> {
        (0..count)
            .map(|id| {
                let len = rng.gen_range(spec.sentence_length_range[0]..=spec.sentence_length_range[1]);
                let words: Vec<usize> = (0..len).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
                ParallelPair {
                    source: words.iter().map(|&w| lexicon[w].0.as_str()).collect::<Vec<_>>().join(" "),
                    target: render_target(&lexicon, &suffixes, &words),
                    id,
                }
            })
            .collect()
    };
    let train = make(&covered, spec.train_size, &mut rng);
    let test = make(&all, spec.test_size, &mut rng);

    Ok(ToyLanguage {
        spec: spec.clone(),
        lexicon,
        suffixes,
        covered,
        train,
        test,
        dictionary,
    })
}

fn render_target(lexicon: &[(String, String)], suffixes: &[String], words: &[usize]) -> String {
    words
        .iter()
        .enumerate()
        .map(|(p, &w)| {
            let suffix = if suffixes.is_empty() { "" } else { suffixes[p % suffixes.len()].as_str() };
            format!("{}{}", lexicon[w].1, suffix)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Serializable record of a generated language written next to its files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyManifest {
    pub spec: ToyLanguageSpec,
    pub seed: u64,
    pub suffixes: Vec<String>,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub dictionary_entries: usize,
}

impl ToyLanguage {
    /// Word-by-word translation through the bijection and suffix rule;
    /// `None` if a word is not in the lexicon.
    pub fn oracle_translate(&self, source: &str) -> Option<String> {
        let index: HashMap<&str, usize> = self.lexicon.iter().enumerate().map(|(i, (s, _))| (s.as_str(), i)).collect();
        let words = source
            .split_whitespace()
            .map(|w| index.get(w).copied())
            .collect::<Option<Vec<_>>>()?;
        Some(render_target(&self.lexicon, &self.suffixes, &words))
    }

    pub fn manifest(&self) -> ToyManifest {
        ToyManifest {
            spec: self.spec.clone(),
            seed: self.spec.seed,
            suffixes: self.suffixes.clone(),
            train_pairs: self.train.len(),
            test_pairs: self.test.len(),
            dictionary_entries: self.dictionary.len(),
        }
    }

    /// Writes `train.tsv`, `test.tsv`, `dict.tsv` and `manifest.json`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(dir.join("train.tsv"), &self.train)?;
        write_corpus(dir.join("test.tsv"), &self.test)?;
        write_entries(dir.join("dict.tsv"), &self.dictionary)?;
        let path = dir.join("manifest.json");
        let mut json = serde_json::to_string_pretty(&self.manifest())?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(path, e))
    }
}

/// Source words of `pairs`, as a set.
pub fn source_vocabulary(pairs: &[ParallelPair]) -> BTreeSet<&str> {
    pairs.iter().flat_map(|p| p.source.split_whitespace()).collect()
}

/// Test pairs containing at least one source word never seen in `train`.
pub fn held_out_subset(train: &[ParallelPair], test: &[ParallelPair]) -> Vec<ParallelPair> {
    let seen = source_vocabulary(train);
    test.iter()
        .filter(|p| p.source.split_whitespace().any(|w| !seen.contains(w)))
        .cloned()
        .collect()
}
