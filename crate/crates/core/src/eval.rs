//! Test-set evaluation: BLEU, tool-usage statistics, successful-query
//! accounting and the comparison against the dictionary's best suggestion.
//!
//! Every report field is a pure function of the transcripts, the dictionary
//! and the BLEU settings, so replaying a transcript dump reproduces the
//! report exactly.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ParallelPair;
use crate::dictionary::{normalize, Dictionary, DEFAULT_MAX_MATCHES};
use crate::error::{Error, Result};
use crate::exec::{mix_seed, Workers};
use crate::metrics::{answer_reward, sentence_bleu, BleuConfig, RewardKind};
use crate::policy::{GenerationConfig, Policy};
use crate::protocol::{continue_episode, prepare_prompt, Episode, DEFAULT_TOOL_BUDGET};
use crate::stats::paired_t_test;

/// All test-set metrics. BLEU values are in `[0, 1]`; `_pct` fields are
/// percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub avg_bleu: f64,
    pub answers_with_tools_pct: f64,
    /// Mean number of calls among episodes that made at least one.
    pub avg_tool_calls: f64,
    pub successful_tool_calls_pct: f64,
    pub successful_queries: usize,
    pub successful_queries_max: usize,
    pub dict_only_mean_bleu: f64,
    pub model_mean_bleu: f64,
    pub t_statistic: f64,
    pub p_value: f64,
    pub model_better_pct: f64,
    pub n_samples: usize,
}

/// Interpretation notes written next to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub bleu_scale: String,
    pub dict_only_aggregation: String,
    /// Samples entering the dictionary-only comparison.
    pub dict_only_samples: usize,
    pub t_test_degenerate: bool,
    pub tool_budget: usize,
    pub tool_enabled: bool,
}

/// One evaluated test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: usize,
    pub source: String,
    pub reference: String,
    pub episode: Episode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tool_budget: usize,
    pub generation: GenerationConfig,
    pub bleu: BleuConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tool_budget: DEFAULT_TOOL_BUDGET,
            generation: GenerationConfig::default(),
            bleu: BleuConfig::default(),
        }
    }
}

/// Sum over samples of `min(budget, distinct in-dictionary source words)`.
pub fn successful_queries_bound<'a>(sources: impl IntoIterator<Item = &'a str>, dict: &Dictionary, budget: usize) -> usize {
    sources
        .into_iter()
        .map(|s| distinct_words(s).into_iter().filter(|w| dict.contains(w)).count().min(budget))
        .sum()
}

fn distinct_words(text: &str) -> BTreeSet<String> {
    text.split_whitespace().map(normalize).collect()
}

/// Distinct successful queries of one episode that name a source word.
fn successful_source_queries(episode: &Episode, source: &str) -> usize {
    let words = distinct_words(source);
    episode
        .tool_calls
        .iter()
        .filter(|c| c.match_count > 0)
        .map(|c| normalize(&c.query))
        .filter(|q| words.contains(q))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Best sentence BLEU of any target returned by the episode's successful
/// lookups; 0 when none returned a match.
pub fn dict_only_best_bleu(episode: &Episode, reference: &str, dict: &Dictionary, bleu: &BleuConfig) -> Result<f64> {
    let mut best = 0.0f64;
    for call in episode.tool_calls.iter().filter(|c| c.match_count > 0) {
        for entry in dict.lookup_refs(&call.query, DEFAULT_MAX_MATCHES) {
            best = best.max(sentence_bleu(&entry.target_text, reference, bleu)?);
        }
    }
    Ok(best)
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Computes the report from transcripts alone.
pub fn report_from_transcripts(
    transcripts: &[Transcript],
    dict: Option<&Dictionary>,
    budget: usize,
    bleu: &BleuConfig,
) -> Result<(EvalReport, ReportMeta)> {
    if transcripts.is_empty() {
        return Err(Error::InvalidArgument("no transcripts to evaluate".into()));
    }
    let n = transcripts.len();
    let mut model_scores = Vec::with_capacity(n);
    for t in transcripts {
        model_scores.push(answer_reward(t.episode.answer.as_deref(), &t.reference, RewardKind::Bleu, bleu)?);
    }
    let with_tools = transcripts.iter().filter(|t| !t.episode.tool_calls.is_empty()).count();
    let calls: usize = transcripts.iter().map(|t| t.episode.tool_calls.len()).sum();
    let ok_calls: usize = transcripts.iter().map(|t| t.episode.successful_calls()).sum();

    let (mut successful_queries, mut successful_queries_max) = (0, 0);
    let (mut model_sub, mut dict_sub) = (Vec::new(), Vec::new());
    if let Some(dict) = dict {
        successful_queries = transcripts.iter().map(|t| successful_source_queries(&t.episode, &t.source)).sum();
        successful_queries_max = successful_queries_bound(transcripts.iter().map(|t| t.source.as_str()), dict, budget);
        for (t, &m) in transcripts.iter().zip(&model_scores) {
            if t.episode.successful_calls() > 0 {
                model_sub.push(m);
                dict_sub.push(dict_only_best_bleu(&t.episode, &t.reference, dict, bleu)?);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (t_statistic, p_value, degenerate) = if model_sub.len() >= 2 {
        let r = paired_t_test(&model_sub, &dict_sub)?;
        // JSON has no infinities; a constant nonzero difference saturates
        let t = if r.t_statistic.is_infinite() { f64::MAX.copysign(r.t_statistic) } else { r.t_statistic };
        (t, r.p_value, r.degenerate)
    } else {
        (0.0, 1.0, true)
    };
    let better = model_sub.iter().zip(&dict_sub).filter(|(m, d)| m > d).count();

    let report = EvalReport {
        avg_bleu: mean(&model_scores),
        answers_with_tools_pct: pct(with_tools, n),
        avg_tool_calls: if with_tools == 0 { 0.0 } else { calls as f64 / with_tools as f64 },
        successful_tool_calls_pct: pct(ok_calls, calls),
        successful_queries,
        successful_queries_max,
        dict_only_mean_bleu: mean(&dict_sub),
        model_mean_bleu: mean(&model_sub),
        t_statistic,
        p_value,
        model_better_pct: pct(better, model_sub.len()),
        n_samples: n,
    };
    let meta = ReportMeta {
        bleu_scale: "sentence BLEU in [0, 1]".into(),
        dict_only_aggregation: "per sample, best BLEU over all matches of its successful lookups; \
                                samples without a successful lookup are excluded"
            .into(),
        dict_only_samples: model_sub.len(),
        t_test_degenerate: degenerate,
        tool_budget: budget,
        tool_enabled: dict.is_some(),
    };
    Ok((report, meta))
}

/// Runs one episode per test pair and scores them. Pair `j` decodes with
/// a stream seeded by `(generation.seed, j)`.
pub fn evaluate<P>(
    policy: &P,
    test_pairs: &[ParallelPair],
    dict: Option<&Dictionary>,
    cfg: &EvalConfig,
    workers: &Workers,
) -> Result<(EvalReport, ReportMeta, Vec<Transcript>)>
where
    P: Policy,
{
    if test_pairs.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    cfg.generation.validate()?;
    let transcripts = workers
        .map(test_pairs, |j, pair| -> Result<Transcript> {
            let seed = mix_seed(&[cfg.generation.seed, j as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gen = GenerationConfig { seed, ..cfg.generation };
            let prepared = prepare_prompt(policy, &pair.source)?;
            let episode = continue_episode(policy, prepared, dict, cfg.tool_budget, &gen, &mut rng)?;
            Ok(Transcript {
                id: pair.id,
                source: pair.source.clone(),
                reference: pair.target.clone(),
                episode,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (report, meta) = report_from_transcripts(&transcripts, dict, cfg.tool_budget, &cfg.bleu)?;
    Ok((report, meta, transcripts))
}

pub fn write_transcripts(path: impl AsRef<Path>, transcripts: &[Transcript]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for t in transcripts {
        serde_json::to_writer(&mut out, t)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_transcripts(path: impl AsRef<Path>) -> Result<Vec<Transcript>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    f.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))
}
