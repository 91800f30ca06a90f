//! Sentence-level BLEU, character error rate and the scalar rewards built on
//! them. Scores live in `[0, 1]`; multiplying by 100 is left to reporting.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Episode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// Add one to numerator and denominator of every order `n >= 2`.
    #[default]
    AddOneHigherOrders,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    #[default]
    Whitespace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_order: usize,
    pub smoothing: Smoothing,
    pub tokenization: Tokenization,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_order: 4,
            smoothing: Smoothing::AddOneHigherOrders,
            tokenization: Tokenization::Whitespace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    Bleu,
    Character,
}

impl std::str::FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bleu" => Ok(RewardKind::Bleu),
            "character" | "cer" => Ok(RewardKind::Character),
            other => Err(Error::InvalidArgument(format!("unknown reward kind `{other}`"))),
        }
    }
}

fn tokenize(text: &str, _tok: Tokenization) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU with clipped n-gram precisions and brevity penalty.
///
/// Orders longer than the hypothesis are left out of the geometric mean, so
/// a hypothesis of `c < max_order` tokens is scored over orders `1..=c`.
pub fn sentence_bleu(hypothesis: &str, reference: &str, cfg: &BleuConfig) -> Result<f64> {
    if cfg.max_order == 0 {
        return Err(Error::InvalidArgument("BLEU max_order must be at least 1".into()));
    }
    let refs = tokenize(reference, cfg.tokenization);
    if refs.is_empty() {
        return Err(Error::InvalidArgument("BLEU reference is empty".into()));
    }
    let hyp = tokenize(hypothesis, cfg.tokenization);
    let c = hyp.len();
    if c == 0 {
        return Ok(0.0);
    }
    let r = refs.len();
    let orders = cfg.max_order.min(c);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let hyp_counts = ngram_counts(&hyp, n);
        let ref_counts = ngram_counts(&refs, n);
        let matched: usize = hyp_counts
            .iter()
            .map(|(g, &k)| k.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let total = c + 1 - n;
        let (num, den) = match cfg.smoothing {
            Smoothing::AddOneHigherOrders if n >= 2 => (matched + 1, total + 1),
            _ => (matched, total),
        };
        if num == 0 {
            return Ok(0.0);
        }
        log_sum += (num as f64 / den as f64).ln();
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Unit-cost Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length in characters.
pub fn character_error_rate(hypothesis: &str, reference: &str) -> Result<f64> {
    let r = reference.chars().count();
    if r == 0 {
        return Err(Error::InvalidArgument("CER reference is empty".into()));
    }
    Ok(levenshtein(hypothesis, reference) as f64 / r as f64)
}

/// Scalar reward of an episode; zero when no answer was produced.
pub fn reward(episode: &Episode, reference: &str, kind: RewardKind, cfg: &BleuConfig) -> Result<f64> {
    answer_reward(episode.answer.as_deref(), reference, kind, cfg)
}

pub fn answer_reward(answer: Option<&str>, reference: &str, kind: RewardKind, cfg: &BleuConfig) -> Result<f64> {
    if reference.trim().is_empty() {
        return Err(Error::InvalidArgument("reward reference is empty".into()));
    }
    let Some(answer) = answer else {
        return Ok(0.0);
    };
    match kind {
        RewardKind::Bleu => sentence_bleu(answer, reference, cfg),
        RewardKind::Character => Ok((1.0 - character_error_rate(answer, reference)?).max(0.0)),
    }
}

/// Mean sentence BLEU over `(hypothesis, reference)` pairs.
pub fn corpus_avg_bleu<H: AsRef<str>, R: AsRef<str>>(pairs: &[(H, R)], cfg: &BleuConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("corpus_avg_bleu needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (h, r) in pairs {
        total += sentence_bleu(h.as_ref(), r.as_ref(), cfg)?;
    }
    Ok(total / pairs.len() as f64)
}
