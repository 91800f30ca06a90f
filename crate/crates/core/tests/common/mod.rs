//! Oracles and fixtures shared by the integration tests. Everything here is
//! written independently of the library code it checks.

#![allow(dead_code)]

use std::collections::HashMap;

use lexrl::dictionary::{filter_entries, parse_raw, Dictionary};
use lexrl::grpo::GroupBatch;
use lexrl::metrics::{BleuConfig, RewardKind};
use lexrl::policy::transformer::TensorClass;
use lexrl::policy::vocab::VOCAB_SIZE;
use lexrl::policy::{GenerationConfig, ModelConfig, TransformerPolicy, WeightedSequence};
use lexrl::protocol::run_tool_loop;
use lexrl::sft::{augment_example, batch_sequences, training_view};
use lexrl::testing::ScriptedPolicy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- metrics

/// Sentence BLEU by literal n-gram enumeration and linear-scan counting.
pub fn bleu_oracle(hyp: &str, reference: &str, max_order: usize, add_one: bool) -> f64 {
    let h: Vec<String> = hyp.split_whitespace().map(String::from).collect();
    let r: Vec<String> = reference.split_whitespace().map(String::from).collect();
    if h.is_empty() {
        return 0.0;
    }
    let grams = |toks: &[String], n: usize| -> Vec<Vec<String>> {
        if toks.len() < n {
            return Vec::new();
        }
        (0..=toks.len() - n).map(|i| toks[i..i + n].to_vec()).collect()
    };
    let orders = max_order.min(h.len());
    let mut product = 1.0f64;
    for n in 1..=orders {
        let hg = grams(&h, n);
        let rg = grams(&r, n);
        let mut seen: Vec<&Vec<String>> = Vec::new();
        let mut matched = 0usize;
        for g in &hg {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let in_hyp = hg.iter().filter(|x| *x == g).count();
            let in_ref = rg.iter().filter(|x| *x == g).count();
            matched += in_hyp.min(in_ref);
        }
        let (num, den) = if add_one && n > 1 {
            (matched + 1, hg.len() + 1)
        } else {
            (matched, hg.len())
        };
        if num == 0 {
            return 0.0;
        }
        product *= num as f64 / den as f64;
    }
    let geo = product.powf(1.0 / orders as f64);
    let (c, rl) = (h.len() as f64, r.len() as f64);
    let bp = if c >= rl { 1.0 } else { (1.0 - rl / c).exp() };
    bp * geo
}

/// Levenshtein distance from the full `(|a|+1) x (|b|+1)` table.
pub fn edit_distance_oracle(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in table.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in table[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            table[i][j] = (table[i - 1][j] + 1).min(table[i][j - 1] + 1).min(table[i - 1][j - 1] + cost);
        }
    }
    table[a.len()][b.len()]
}

/// Random sentence over a small vocabulary so that n-grams collide often.
pub fn random_sentence<R: Rng>(rng: &mut R, max_words: usize) -> String {
    const WORDS: [&str; 7] = ["ka", "ma", "ta", "kama", "la", "wa", "mata"];
    let n = rng.gen_range(0..=max_words);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Random string over a mixed alphabet, including multi-byte characters.
pub fn random_chars<R: Rng>(rng: &mut R, max_len: usize) -> String {
    const ALPHABET: [char; 8] = ['a', 'b', 'c', ' ', 'ñ', 'ü', 'x', 'é'];
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect()
}

// ------------------------------------------------------------- gradients

pub fn toy_model() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        context_len: 96,
        prompt_window: 24,
    }
}

/// A 64-bit toy policy with parameters moved well away from initialization,
/// so every tensor receives a gradient of ordinary size.
pub fn perturbed_policy(cfg: ModelConfig, seed: u64) -> TransformerPolicy<f64> {
    let mut p = TransformerPolicy::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let layout = p.layout().to_vec();
    let params = p.parameters_mut();
    for spec in &layout {
        let gain = spec.name.ends_with(".g");
        for x in &mut params[spec.range()] {
            let noise = rng.gen_range(-1.0..1.0);
            *x = if gain { 1.0 + 0.2 * noise } else { 0.3 * noise };
        }
    }
    p
}

#[derive(Debug)]
pub struct TensorCheck {
    pub name: String,
    pub class: TensorClass,
    /// `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)` over the
    /// probed coordinates, as vectors.
    pub rel_err: f64,
    pub norm: f64,
}

/// Compares analytic gradients against central differences with step `eps`
/// on `probes` coordinates per tensor.
pub fn finite_difference_check(
    policy: &TransformerPolicy<f64>,
    seqs: &[WeightedSequence],
    eps: f64,
    probes: usize,
    seed: u64,
) -> Vec<TensorCheck> {
    let graph = policy.record_loss(seqs).unwrap();
    let mut grads = policy.zero_gradients();
    policy.backward(&graph, &mut grads).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = policy.clone();
    let mut out = Vec::new();
    for spec in policy.layout() {
        let range = spec.range();
        // half the probes where the analytic gradient is live (embedding
        // rows of unused symbols are legitimately zero), half anywhere
        let mut idx: Vec<usize> = if range.len() <= probes {
            range.clone().collect()
        } else {
            let live: Vec<usize> = range.clone().filter(|&i| grads.data[i] != 0.0).collect();
            let mut picks: Vec<usize> = (0..probes / 2)
                .filter(|_| !live.is_empty())
                .map(|_| live[rng.gen_range(0..live.len())])
                .collect();
            picks.extend((picks.len()..probes).map(|_| rng.gen_range(range.clone())));
            picks
        };
        idx.sort_unstable();
        idx.dedup();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in idx {
            let orig = work.parameters()[i];
            work.parameters_mut()[i] = orig + eps;
            let plus = work.record_loss(seqs).unwrap().value();
            work.parameters_mut()[i] = orig - eps;
            let minus = work.record_loss(seqs).unwrap().value();
            work.parameters_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.data[i];
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        out.push(TensorCheck {
            name: spec.name.clone(),
            class: spec.class,
            rel_err: if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale },
            norm: scale,
        });
    }
    out
}

// -------------------------------------------------------------- fixtures

pub const TOY_DICT: &str = "casa\tpiichi\nperro\terruu\ngrande\tmiyo'u\nel\tchi\nla\tchi\nagua\twuin\n";

pub fn toy_dictionary() -> Dictionary {
    filter_entries(&parse_raw(TOY_DICT).unwrap(), 5)
}

pub const TOY_PAIRS: [(&str, &str); 4] = [
    ("la casa grande", "piichi miyo'u"),
    ("el perro", "chi erruu"),
    ("agua y casa", "wuin otta piichi"),
    ("perro grande bebe agua", "erruu miyo'u asaa wuin"),
];

/// A token-mean SFT batch with synthetic lookups, fitted to `cfg`.
pub fn sft_batch(cfg: &ModelConfig, seed: u64) -> Vec<WeightedSequence> {
    let dict = toy_dictionary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views: Vec<_> = TOY_PAIRS
        .iter()
        .map(|(s, t)| {
            let ex = augment_example(s, t, Some(&dict), 2, &mut rng).unwrap();
            training_view(&ex, cfg.prompt_window, cfg.context_len).expect("example fits")
        })
        .collect();
    batch_sequences(&views).0
}

/// Scripted episodes that call the tool and answer differently, so the
/// group has distinct rewards. Prompts are cut to `prompt_window`.
pub fn scripted_group(cfg: &ModelConfig, source: &str, reference: &str) -> GroupBatch {
    let dict = toy_dictionary();
    let answers = ["piichi miyo'u", "piichi", "chi erruu wuin", "miyo'u piichi"];
    let episodes = answers
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let script = if i % 2 == 0 {
                format!("<spa_to_wayuu> casa </spa_to_wayuu><answer> {a} </answer>")
            } else {
                format!("<spa_to_wayuu> nada </spa_to_wayuu><spa_to_wayuu> grande </spa_to_wayuu><answer> {a} </answer>")
            };
            let policy = ScriptedPolicy::fixed(&script);
            let gen = GenerationConfig { temperature: 1.0, max_new_tokens: 200, seed: i as u64 };
            let mut ep = run_tool_loop(&policy, source, Some(&dict), 4, &gen).unwrap();
            ep.prompt_token_count = cfg.prompt_window;
            ep
        })
        .collect();
    GroupBatch::new(source, reference, episodes, RewardKind::Bleu, &BleuConfig::default()).unwrap()
}

/// Frequencies of each key, for quick distribution checks.
pub fn histogram<K: std::hash::Hash + Eq>(items: impl IntoIterator<Item = K>) -> HashMap<K, usize> {
    let mut h = HashMap::new();
    for k in items {
        *h.entry(k).or_insert(0) += 1;
    }
    h
}
