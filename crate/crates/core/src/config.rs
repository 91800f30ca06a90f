//! Flat JSON run configuration shared by every pipeline stage.
//!
//! Keys follow the hyperparameter names used for the SFT and RL recipes
//! where such names exist. Values resolve as flag, then file, then default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::ToyLanguageSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::grpo::GrpoConfig;
use crate::metrics::{BleuConfig, RewardKind, Smoothing, Tokenization};
use crate::policy::vocab::VOCAB_SIZE;
use crate::policy::{GenerationConfig, ModelConfig};
use crate::sft::SftConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,

    // model
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub prompt_window: usize,

    // supervised stage
    pub num_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sft_weight_decay: f64,
    pub max_lookup_words: usize,

    // reinforcement stage
    pub max_steps: usize,
    pub sims_per_prompt: usize,
    pub policy_lr: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub accum_grad_steps: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub gradient_clipping: f64,
    pub reward: RewardKind,
    pub eval_every: usize,
    pub eval_set_size: usize,
    pub tool_budget: usize,
    pub use_tool: bool,

    // metrics and evaluation
    pub bleu_max_order: usize,
    pub bleu_smoothing: Smoothing,
    pub eval_temperature: f64,

    // dictionary
    pub max_source_words: usize,

    // toy language
    pub lexicon_size: usize,
    pub sentence_length_range: [usize; 2],
    pub dict_coverage: f64,
    pub corpus_coverage: f64,
    pub suffix_rule_count: usize,
    pub train_size: usize,
    pub test_size: usize,

    // paths
    pub corpus: Option<PathBuf>,
    pub dict: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let sft = SftConfig::default();
        let rl = GrpoConfig::default();
        let toy = ToyLanguageSpec::default();
        RunConfig {
            seed: 0,
            workers: 1,
            n_layers: model.n_layers,
            d_model: model.d_model,
            n_heads: model.n_heads,
            context_len: model.context_len,
            prompt_window: model.prompt_window,
            num_epochs: sft.epochs,
            batch_size: sft.batch_size,
            lr: sft.lr,
            sft_weight_decay: sft.weight_decay,
            max_lookup_words: sft.max_lookup_words,
            max_steps: rl.max_steps,
            sims_per_prompt: rl.group_size,
            policy_lr: rl.lr,
            temperature: rl.temperature,
            max_new_tokens: rl.max_new_tokens,
            accum_grad_steps: rl.grad_accum_steps,
            betas: rl.betas,
            eps: rl.eps,
            weight_decay: rl.weight_decay,
            gradient_clipping: rl.grad_clip_norm,
            reward: rl.reward_kind,
            eval_every: rl.eval_every,
            eval_set_size: rl.eval_set_size,
            tool_budget: rl.tool_budget,
            use_tool: true,
            bleu_max_order: 4,
            bleu_smoothing: Smoothing::AddOneHigherOrders,
            eval_temperature: 1.0,
            max_source_words: crate::dictionary::DEFAULT_MAX_SOURCE_WORDS,
            lexicon_size: toy.lexicon_size,
            sentence_length_range: toy.sentence_length_range,
            dict_coverage: toy.dict_coverage,
            corpus_coverage: toy.corpus_coverage,
            suffix_rule_count: toy.suffix_rule_count,
            train_size: toy.train_size,
            test_size: toy.test_size,
            corpus: None,
            dict: None,
            test: None,
            ckpt: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file; keys absent from it keep their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::resolve(Some(read_object(path.as_ref())?), Map::new())
    }

    /// Layers `file` over the defaults and `flags` over both.
    pub fn resolve(file: Option<Map<String, Value>>, flags: Map<String, Value>) -> Result<Self> {
        let mut merged = match serde_json::to_value(RunConfig::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for layer in file.into_iter().chain(std::iter::once(flags)) {
            for (k, v) in layer {
                merged.insert(k, v);
            }
        }
        serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            context_len: self.context_len,
            prompt_window: self.prompt_window,
        }
    }

    pub fn bleu(&self) -> BleuConfig {
        BleuConfig {
            max_order: self.bleu_max_order,
            smoothing: self.bleu_smoothing,
            tokenization: Tokenization::Whitespace,
        }
    }

    pub fn sft(&self) -> SftConfig {
        SftConfig {
            epochs: self.num_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.sft_weight_decay,
            max_lookup_words: self.max_lookup_words,
            seed: self.seed,
        }
    }

    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.sims_per_prompt,
            max_steps: self.max_steps,
            lr: self.policy_lr,
            grad_accum_steps: self.accum_grad_steps,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            reward_kind: self.reward,
            eval_every: self.eval_every,
            eval_set_size: self.eval_set_size,
            tool_budget: self.tool_budget,
            grad_clip_norm: self.gradient_clipping,
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
            bleu: self.bleu(),
            seed: self.seed,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            tool_budget: self.tool_budget,
            generation: GenerationConfig {
                temperature: self.eval_temperature,
                max_new_tokens: self.max_new_tokens,
                seed: self.seed,
            },
            bleu: self.bleu(),
        }
    }

    pub fn toy(&self) -> ToyLanguageSpec {
        ToyLanguageSpec {
            lexicon_size: self.lexicon_size,
            sentence_length_range: self.sentence_length_range,
            dict_coverage: self.dict_coverage,
            corpus_coverage: self.corpus_coverage,
            suffix_rule_count: self.suffix_rule_count,
            train_size: self.train_size,
            test_size: self.test_size,
            seed: self.seed,
        }
    }
}

/// Parses a JSON file that must hold a single object.
pub fn read_object(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str(&text)? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("{} must contain a JSON object", path.display()))),
    }
}
