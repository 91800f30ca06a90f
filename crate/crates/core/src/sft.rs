//! Supervised fine-tuning on prompt/answer pairs with synthetic dictionary
//! calls spliced in before the answer.
//!
//! Tool-call tags and queries carry loss; the matches blocks that answer
//! them are environment text and, like the prompt, are masked out.

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ParallelPair;
use crate::dictionary::{Dictionary, DEFAULT_MAX_MATCHES};
use crate::error::{Error, Result};
use crate::exec::{loss_and_gradients, Workers};
use crate::policy::{AdamW, AdamWConfig, Symbol, TransformerPolicy, Vocabulary, WeightedSequence};
use crate::protocol::{build_prompt, render_matches, TAGS};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub full_text: String,
    pub symbols: Vec<Symbol>,
    /// True where the symbol is a training target.
    pub loss_mask: Vec<bool>,
    /// Number of leading prompt symbols.
    pub prompt_len: usize,
    /// Source words looked up, in source order.
    pub lookups: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_lookup_words: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 1,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 0.01,
            max_lookup_words: 4,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            grad_clip_norm: None,
            ..AdamWConfig::default()
        }
    }
}

/// Formats one training example, drawing `k` uniformly from
/// `0..=max_lookup_words` (capped by the word count) and looking up `k`
/// distinct source positions in source order. Without a dictionary no
/// lookups are inserted.
pub fn augment_example<R: Rng + ?Sized>(
    source: &str,
    target: &str,
    dict: Option<&Dictionary>,
    max_lookup_words: usize,
    rng: &mut R,
) -> Result<SftExample> {
    if source.trim().is_empty() || target.trim().is_empty() {
        return Err(Error::InvalidArgument("SFT pair has an empty side".into()));
    }
    let vocab = Vocabulary::standard();
    let words: Vec<&str> = source.split_whitespace().collect();
    let k = rng.gen_range(0..=max_lookup_words).min(words.len());
    let mut picks = index::sample(rng, words.len(), k).into_vec();
    picks.sort_unstable();

    let mut ex = SftExample {
        full_text: String::new(),
        symbols: Vec::new(),
        loss_mask: Vec::new(),
        prompt_len: 0,
        lookups: Vec::new(),
    };
    let push = |ex: &mut SftExample, text: &str, trained: bool| {
        let ids = vocab.encode(text);
        ex.loss_mask.extend(std::iter::repeat_n(trained, ids.len()));
        ex.symbols.extend(ids);
        ex.full_text.push_str(text);
    };
    push(&mut ex, &build_prompt(source)?, false);
    ex.prompt_len = ex.symbols.len();
    if let Some(dict) = dict {
        for &p in &picks {
            let word = words[p];
            push(&mut ex, &format!("{} {} {}", TAGS.tool_open, word, TAGS.tool_close), true);
            push(&mut ex, &render_matches(&dict.lookup_refs(word, DEFAULT_MAX_MATCHES)), false);
            ex.lookups.push(word.to_string());
        }
    }
    push(&mut ex, &format!("{} {} {}", TAGS.answer_open, target.trim(), TAGS.answer_close), true);
    Ok(ex)
}

/// Symbols and mask the model is trained on: the prompt keeps at most its
/// trailing `prompt_window` symbols and is cut further from the left to fit
/// `context_len`. `None` when even the completion does not fit.
pub fn training_view(ex: &SftExample, prompt_window: usize, context_len: usize) -> Option<(Vec<Symbol>, Vec<bool>)> {
    let completion = ex.symbols.len() - ex.prompt_len;
    let mut keep = ex.prompt_len.min(prompt_window);
    if keep + completion > context_len {
        keep = context_len.checked_sub(completion)?;
    }
    if keep == 0 {
        return None;
    }
    let start = ex.prompt_len - keep;
    Some((ex.symbols[start..].to_vec(), ex.loss_mask[start..].to_vec()))
}

/// Token-mean cross-entropy sequences: every unmasked position weighs
/// `1 / T` with `T` the unmasked count over the whole batch.
pub fn batch_sequences(views: &[(Vec<Symbol>, Vec<bool>)]) -> (Vec<WeightedSequence>, usize) {
    let total: usize = views.iter().map(|(_, m)| m.iter().skip(1).filter(|&&b| b).count()).sum();
    let w = if total == 0 { 0.0 } else { 1.0 / total as f64 };
    let seqs = views
        .iter()
        .map(|(s, m)| {
            let weights = m.iter().enumerate().map(|(t, &b)| if t > 0 && b { w } else { 0.0 }).collect();
            WeightedSequence::new(s.clone(), weights)
        })
        .collect();
    (seqs, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Trains `policy` on `corpus` for `cfg.epochs` epochs of shuffled
/// minibatches and returns the per-step loss log.
pub fn sft_train<T: Scalar>(
    policy: &mut TransformerPolicy<T>,
    corpus: &[ParallelPair],
    dict: Option<&Dictionary>,
    cfg: &SftConfig,
    workers: &Workers,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("SFT corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer(), policy.num_parameters());
    let (window, context) = (policy.config().prompt_window, policy.config().context_len);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut views = Vec::with_capacity(batch.len());
            for &i in batch {
                let pair = &corpus[i];
                let ex = augment_example(&pair.source, &pair.target, dict, cfg.max_lookup_words, &mut rng)?;
                match training_view(&ex, window, context) {
                    Some(v) => views.push(v),
                    None => warn!("pair {} does not fit the context; skipped", pair.id),
                }
            }
            let (seqs, total) = batch_sequences(&views);
            if total == 0 {
                warn!("step {step}: every position of the batch is masked; skipped");
                continue;
            }
            let (loss, grads) = loss_and_gradients(policy, &seqs, workers)?;
            if !loss.is_finite() {
                let ids: Vec<usize> = batch.iter().map(|&i| corpus[i].id).collect();
                return Err(Error::NonFiniteLoss {
                    step,
                    loss,
                    batch_json: serde_json::to_string(&ids)?,
                });
            }
            opt.step_policy(policy, &grads)?;
            log.push(LossRecord { step, loss });
            log::debug!("sft epoch {epoch} step {step} loss {loss:.4}");
        }
    }
    Ok(log)
}

/// Writes `step,loss` lines.
pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("step,loss\n");
    for r in log {
        out.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{filter_entries, DictionaryEntry};
    use crate::policy::vocab::VOCAB_SIZE;
    use crate::policy::ModelConfig;

    fn dict() -> Dictionary {
        let e = |s: &str, t: &str, ordinal| DictionaryEntry { source_text: s.into(), target_text: t.into(), ordinal };
        filter_entries(&[e("la", "ja", 0), e("casa", "miichi", 1), e("casa", "piichi", 2)], 5)
    }

    fn with_k(k_wanted: usize, source: &str) -> SftExample {
        for seed in 0.. {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = augment_example(source, "t1 t2", Some(&dict()), 4, &mut rng).unwrap();
            if ex.lookups.len() == k_wanted {
                return ex;
            }
        }
        unreachable!()
    }

    #[test]
    fn zero_lookups_is_prompt_plus_answer() {
        let ex = with_k(0, "la casa roja");
        assert_eq!(ex.full_text, build_prompt("la casa roja").unwrap() + "<answer> t1 t2 </answer>");
        let answer_len = Vocabulary::standard().encode("<answer> t1 t2 </answer>").len();
        assert_eq!(ex.loss_mask.iter().filter(|&&b| b).count(), answer_len);
        assert!(ex.loss_mask[..ex.prompt_len].iter().all(|&b| !b));
    }

    #[test]
    fn two_lookups_give_two_call_and_match_blocks() {
        let ex = with_k(2, "la casa roja");
        let completion = &ex.full_text[build_prompt("la casa roja").unwrap().len()..];
        assert_eq!(completion.matches(TAGS.tool_open).count(), 2);
        assert_eq!(completion.matches(TAGS.matches_open).count(), 2);
        // every call is immediately followed by the real lookup result
        for w in &ex.lookups {
            let call = format!("{} {} {}", TAGS.tool_open, w, TAGS.tool_close);
            let block = render_matches(&dict().lookup_refs(w, 5));
            assert!(completion.contains(&(call + &block)));
        }
        assert!(completion.ends_with("<answer> t1 t2 </answer>"));
    }

    #[test]
    fn lookups_are_distinct_capped_and_in_source_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let ex = augment_example("uno dos tres", "x", Some(&dict()), 4, &mut rng).unwrap();
            assert!(ex.lookups.len() <= 3);
            let pos: Vec<usize> = ex.lookups.iter().map(|w| ["uno", "dos", "tres"].iter().position(|x| x == w).unwrap()).collect();
            assert!(pos.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn mask_covers_calls_but_not_matches() {
        let ex = with_k(1, "casa");
        let vocab = Vocabulary::standard();
        let mut in_block = false;
        for (i, &s) in ex.symbols.iter().enumerate().skip(ex.prompt_len) {
            if s == crate::policy::vocab::MATCHES_OPEN {
                in_block = true;
            }
            assert_eq!(ex.loss_mask[i], !in_block, "{}", vocab.decode(&[s]));
            if s == crate::policy::vocab::MATCHES_CLOSE {
                in_block = false;
            }
        }
    }

    #[test]
    fn k_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 5];
        let n = 10_000;
        for _ in 0..n {
            let ex = augment_example("a b c d e f", "x", Some(&dict()), 4, &mut rng).unwrap();
            counts[ex.lookups.len()] += 1;
        }
        let (p, nf) = (0.2, n as f64);
        let sigma = (nf * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - nf * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn augmentation_is_reproducible() {
        let a = augment_example("a b c", "x", Some(&dict()), 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = augment_example("a b c", "x", Some(&dict()), 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(augment_example("", "x", None, 4, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn truncation_keeps_the_completion() {
        let ex = with_k(1, "casa");
        let completion = ex.symbols.len() - ex.prompt_len;
        let (s, m) = training_view(&ex, 16, 1000).unwrap();
        assert_eq!(s.len(), 16 + completion);
        assert_eq!(&s[16..], &ex.symbols[ex.prompt_len..]);
        let (s, _) = training_view(&ex, 16, completion + 5).unwrap();
        assert_eq!(s.len(), completion + 5);
        assert!(m.len() == 16 + completion);
        assert!(training_view(&ex, 16, completion).is_none());
    }

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: VOCAB_SIZE, n_layers: 2, d_model: 32, n_heads: 4, context_len: 160, prompt_window: 48 }
    }

    #[test]
    fn masked_labels_do_not_change_the_loss() {
        let p = TransformerPolicy::<f64>::new(tiny(), 1).unwrap();
        let ex = with_k(2, "la casa");
        let view = training_view(&ex, 48, 160).unwrap();
        let (seqs, _) = batch_sequences(std::slice::from_ref(&view));
        let base = p.record_loss(&seqs).unwrap().value();
        let mut corrupted = seqs[0].clone();
        let mut labels = corrupted.symbols.clone();
        for (t, &b) in view.1.iter().enumerate() {
            if !b {
                labels[t] = (labels[t] + 7) % VOCAB_SIZE as u32;
            }
        }
        corrupted.labels = Some(labels);
        assert_eq!(p.record_loss(&[corrupted]).unwrap().value(), base);
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let p = TransformerPolicy::<f32>::new(tiny(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let views: Vec<_> = ["la casa", "casa roja", "la"]
            .iter()
            .map(|s| training_view(&augment_example(s, "abc def", Some(&dict()), 4, &mut rng).unwrap(), 48, 160).unwrap())
            .collect();
        let (seqs, _) = batch_sequences(&views);
        let loss = p.record_loss(&seqs).unwrap().value();
        let uniform = (VOCAB_SIZE as f64).ln();
        assert!((loss - uniform).abs() < 0.1 * uniform, "{loss} vs {uniform}");
    }

    #[test]
    fn fully_masked_batch_has_no_weight() {
        let (seqs, total) = batch_sequences(&[(vec![1, 2, 3], vec![false, false, false])]);
        assert_eq!(total, 0);
        assert!(seqs[0].weights.iter().all(|&w| w == 0.0));
    }
}
