//! The trainable sequence model and the sampling interface the protocol
//! loop drives.
//!
//! [`Policy`] is the narrow surface `run_tool_loop` needs: incremental
//! decoding with next-symbol logits. [`TransformerPolicy`] implements it and
//! additionally exposes exact log-probabilities, reverse-mode gradients and
//! checkpointing.

pub mod checkpoint;
pub mod optim;
pub mod transformer;
pub mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use optim::{AdamW, AdamWConfig};
pub use transformer::{Gradients, LossGraph, ModelConfig, TransformerPolicy, WeightedSequence};
pub use vocab::{Symbol, Vocabulary};

/// Incremental decoder driven by the tool loop.
pub trait Policy: Sync {
    /// Per-episode decoding state (for example a key/value cache).
    type State: Send + Clone;

    fn vocab_size(&self) -> usize;

    /// Longest symbol sequence the policy can condition on.
    fn context_limit(&self) -> usize;

    /// Number of trailing prompt symbols kept when a prompt is fed in.
    fn prompt_window(&self) -> usize;

    /// Consumes `prefix` and prepares logits for the next symbol.
    fn start(&self, prefix: &[Symbol]) -> Result<Self::State>;

    /// Appends one symbol to the decoded sequence.
    fn advance(&self, state: &mut Self::State, symbol: Symbol) -> Result<()>;

    /// Logits over the vocabulary for the symbol following the current state.
    fn next_logits(&self, state: &Self::State) -> Vec<f64>;

    /// Number of symbols consumed so far.
    fn position(&self, state: &Self::State) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 1.0,
            max_new_tokens: 512,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws one symbol from `softmax(logits / temperature)`.
pub fn sample_from_logits<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Symbol {
    debug_assert!(temperature > 0.0);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return i as Symbol;
            }
            u -= w;
            last_positive = i;
        }
    }
    // rounding left a sliver of mass unassigned
    last_positive as Symbol
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Samples the symbol following `context`.
pub fn sample_next<P: Policy, R: Rng + ?Sized>(
    policy: &P,
    context: &[Symbol],
    temperature: f64,
    rng: &mut R,
) -> Result<Symbol> {
    if context.len() > policy.context_limit() {
        return Err(Error::ContextOverflow {
            len: context.len(),
            limit: policy.context_limit(),
        });
    }
    let state = policy.start(context)?;
    Ok(sample_from_logits(&policy.next_logits(&state), temperature, rng))
}
