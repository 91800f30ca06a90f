//! Group-relative policy optimization with masked tool output.
//!
//! Each step samples one training pair, rolls out a group of episodes from
//! the same prompt, and scores them against the reference. The advantage of
//! an episode is its reward minus the group mean (no variance scaling, no KL
//! term, no ratio clipping), and the loss is the token-mean of
//! `-A_i log p(y_t)` over model-generated positions only.

use log::{info, warn};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ParallelPair;
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::exec::{loss_and_gradients, mix_seed, Workers};
use crate::metrics::{reward, BleuConfig, RewardKind};
use crate::policy::{AdamW, AdamWConfig, GenerationConfig, LossGraph, Policy, TransformerPolicy, WeightedSequence};
use crate::protocol::{continue_episode, prepare_prompt, Episode, DEFAULT_TOOL_BUDGET};
use crate::scalar::Scalar;

const ROLLOUT_STREAM: u64 = 0x726f_6c6c;
const EVAL_STREAM: u64 = 0x6576_616c;
const PAIR_STREAM: u64 = 0x7061_6972;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub grad_accum_steps: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub reward_kind: RewardKind,
    pub eval_every: usize,
    pub eval_set_size: usize,
    pub tool_budget: usize,
    pub grad_clip_norm: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub bleu: BleuConfig,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            max_steps: 1400,
            lr: 5e-6,
            grad_accum_steps: 8,
            temperature: 1.0,
            max_new_tokens: 512,
            reward_kind: RewardKind::Bleu,
            eval_every: 50,
            eval_set_size: 640,
            tool_budget: DEFAULT_TOOL_BUDGET,
            grad_clip_norm: 0.1,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            bleu: BleuConfig::default(),
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if self.max_steps == 0 || self.grad_accum_steps == 0 || self.eval_every == 0 || self.eval_set_size == 0 {
            return Err(Error::Config("step, accumulation and evaluation counts must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("lr and grad_clip_norm must be positive".into()));
        }
        self.generation(0).validate()
    }

    pub fn generation(&self, seed: u64) -> GenerationConfig {
        GenerationConfig {
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            seed,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip_norm: Some(self.grad_clip_norm),
        }
    }
}

/// One step's group of rollouts for a single source sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub source: String,
    pub reference: String,
    pub episodes: Vec<Episode>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Per episode, aligned with [`Episode::symbols`]: true at
    /// model-generated positions.
    pub masks: Vec<Vec<bool>>,
}

impl GroupBatch {
    /// Scores `episodes` and fills in rewards, advantages and masks.
    pub fn new(source: &str, reference: &str, episodes: Vec<Episode>, kind: RewardKind, bleu: &BleuConfig) -> Result<Self> {
        let rewards = episodes
            .iter()
            .map(|e| reward(e, reference, kind, bleu))
            .collect::<Result<Vec<_>>>()?;
        let advantages = compute_advantages(&rewards)?;
        let masks = episodes.iter().map(|e| e.generated_mask()).collect();
        Ok(GroupBatch {
            source: source.into(),
            reference: reference.into(),
            episodes,
            rewards,
            advantages,
            masks,
        })
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }

    pub fn mean_tool_calls(&self) -> f64 {
        self.episodes.iter().map(|e| e.tool_calls.len()).sum::<usize>() as f64 / self.episodes.len() as f64
    }
}

/// `A_i = r_i - mean(r)`, evaluated exactly and rounded once per entry.
///
/// Exact evaluation makes the advantages depend only on the reward
/// differences, so any shift that is itself exact leaves them bit-identical.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument("advantages need a group of at least two".into()));
    }
    let exact = rewards
        .iter()
        .map(|&r| BigRational::from_float(r).ok_or_else(|| Error::InvalidArgument(format!("non-finite reward {r}"))))
        .collect::<Result<Vec<_>>>()?;
    let sum = exact.iter().fold(BigRational::zero(), |acc, r| acc + r);
    let mean = sum / BigRational::from_integer(BigInt::from(rewards.len()));
    Ok(exact
        .iter()
        .map(|r| (r - &mean).to_f64().expect("finite rational"))
        .collect())
}

/// The loss as weighted sequences plus `T`, the number of unmasked
/// positions across the group.
pub fn grpo_sequences(batch: &GroupBatch) -> (Vec<WeightedSequence>, usize) {
    let total: usize = batch.masks.iter().map(|m| m.iter().skip(1).filter(|&&b| b).count()).sum();
    let seqs = batch
        .episodes
        .iter()
        .zip(&batch.masks)
        .zip(&batch.advantages)
        .map(|((ep, mask), &a)| {
            let w = if total == 0 { 0.0 } else { a / total as f64 };
            let weights = mask.iter().enumerate().map(|(t, &m)| if t > 0 && m { w } else { 0.0 }).collect();
            WeightedSequence::new(ep.symbols(), weights)
        })
        .collect();
    (seqs, total)
}

/// Records `-(1/T) sum_i sum_t A_i log p(y_it)`; `None` when `T = 0`.
pub fn policy_loss<T: Scalar>(batch: &GroupBatch, policy: &TransformerPolicy<T>) -> Result<Option<LossGraph<T>>> {
    let (seqs, total) = grpo_sequences(batch);
    if total == 0 {
        return Ok(None);
    }
    policy.record_loss(&seqs).map(Some)
}

/// Rolls out `cfg.group_size` episodes for `pair`. Episode `i` of step
/// `step` draws from its own stream seeded by `(cfg.seed, step, i)`.
pub fn collect_group<P>(
    policy: &P,
    pair: &ParallelPair,
    dict: Option<&Dictionary>,
    cfg: &GrpoConfig,
    step: usize,
    workers: &Workers,
) -> Result<GroupBatch>
where
    P: Policy,
    P::State: Sync,
{
    let prepared = prepare_prompt(policy, &pair.source)?;
    let slots: Vec<usize> = (0..cfg.group_size).collect();
    let episodes = workers
        .map(&slots, |_, &i| {
            let seed = mix_seed(&[cfg.seed, ROLLOUT_STREAM, step as u64, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            continue_episode(policy, prepared.clone(), dict, cfg.tool_budget, &cfg.generation(seed), &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    GroupBatch::new(&pair.source, &pair.target, episodes, cfg.reward_kind, &cfg.bleu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_tool_calls: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_tool_calls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub optimizer_steps: u64,
}

impl RlLog {
    /// `step,mean_reward,mean_tool_calls,loss` lines.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,mean_reward,mean_tool_calls,loss\n");
        for r in &self.steps {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.mean_reward, r.mean_tool_calls, r.loss));
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = String::from("step,mean_reward,mean_tool_calls\n");
        for r in &self.evals {
            out.push_str(&format!("{},{},{}\n", r.step, r.mean_reward, r.mean_tool_calls));
        }
        out
    }
}

/// The fixed evaluation subset: drawn once, without replacement, from the
/// run seed.
pub fn eval_subset(corpus: &[ParallelPair], size: usize, seed: u64) -> Vec<ParallelPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, EVAL_STREAM]));
    let mut picks = index::sample(&mut rng, corpus.len(), size.min(corpus.len())).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| corpus[i].clone()).collect()
}

/// Mean reward and tool calls over `pairs`, one episode per pair with a
/// per-pair seed that does not depend on the training step.
pub fn evaluate_reward<P>(
    policy: &P,
    pairs: &[ParallelPair],
    dict: Option<&Dictionary>,
    cfg: &GrpoConfig,
    workers: &Workers,
) -> Result<(f64, f64)>
where
    P: Policy,
{
    let scored = workers
        .map(pairs, |j, pair| -> Result<(f64, usize)> {
            let seed = mix_seed(&[cfg.seed, EVAL_STREAM, j as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prepared = prepare_prompt(policy, &pair.source)?;
            let ep = continue_episode(policy, prepared, dict, cfg.tool_budget, &cfg.generation(seed), &mut rng)?;
            Ok((reward(&ep, &pair.target, cfg.reward_kind, &cfg.bleu)?, ep.tool_calls.len()))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = scored.len().max(1) as f64;
    Ok((
        scored.iter().map(|s| s.0).sum::<f64>() / n,
        scored.iter().map(|s| s.1).sum::<usize>() as f64 / n,
    ))
}

/// Runs `cfg.max_steps` GRPO steps, stepping the optimizer every
/// `cfg.grad_accum_steps` groups with the mean accumulated gradient.
pub fn rl_train<T: Scalar>(
    policy: &mut TransformerPolicy<T>,
    corpus: &[ParallelPair],
    dict: Option<&Dictionary>,
    cfg: &GrpoConfig,
    workers: &Workers,
) -> Result<RlLog> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("RL corpus is empty".into()));
    }
    let eval_pairs = eval_subset(corpus, cfg.eval_set_size, cfg.seed);
    let mut pair_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, PAIR_STREAM]));
    let mut opt = AdamW::new(cfg.optimizer(), policy.num_parameters());
    let mut accum = policy.zero_gradients();
    let mut pending = 0usize;
    let mut log = RlLog { steps: Vec::new(), evals: Vec::new(), optimizer_steps: 0 };

    for step in 1..=cfg.max_steps {
        let pair = &corpus[pair_rng.gen_range(0..corpus.len())];
        let batch = collect_group(&*policy, pair, dict, cfg, step, workers)?;
        let (seqs, total) = grpo_sequences(&batch);
        let mut loss = 0.0;
        if total == 0 {
            warn!("step {step}: no model-generated positions in the group; skipped");
        } else {
            let (value, grads) = loss_and_gradients(policy, &seqs, workers)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    loss: value,
                    batch_json: serde_json::to_string(&batch)?,
                });
            }
            loss = value;
            accum.add_assign(&grads);
        }
        pending += 1;
        if pending == cfg.grad_accum_steps || step == cfg.max_steps {
            accum.scale(T::of(1.0 / pending as f64));
            opt.step_policy(policy, &accum)?;
            accum.zero();
            pending = 0;
        }
        log.steps.push(StepRecord {
            step,
            mean_reward: batch.mean_reward(),
            mean_tool_calls: batch.mean_tool_calls(),
            loss,
        });
        if step % cfg.eval_every == 0 {
            let (mean_reward, mean_tool_calls) = evaluate_reward(&*policy, &eval_pairs, dict, cfg, workers)?;
            info!("rl step {step}: eval reward {mean_reward:.4}, tool calls {mean_tool_calls:.2}");
            log.evals.push(EvalRecord { step, mean_reward, mean_tool_calls });
        }
    }
    log.optimizer_steps = opt.steps_taken();
    Ok(log)
}
