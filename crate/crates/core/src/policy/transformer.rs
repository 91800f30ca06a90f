//! Decoder-only transformer with hand-written reverse-mode gradients.
//!
//! Architecture: token + learned position embeddings, `n_layers` pre-norm
//! blocks (causal multi-head self-attention, GELU feed-forward), a final
//! layer norm and an untied output projection. Parameters live in one flat
//! buffer described by a [`TensorSpec`] layout; gradients share the layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Symbol, VOCAB_SIZE};
use super::{log_softmax, Policy};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_len: usize,
    /// Trailing prompt symbols kept when a prompt is fed to the model.
    pub prompt_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            context_len: 512,
            prompt_window: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.vocab_size == 0 || self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.prompt_window == 0 || self.prompt_window >= self.context_len {
            return bad(format!(
                "prompt_window {} must be in 1..context_len ({})",
                self.prompt_window, self.context_len
            ));
        }
        Ok(())
    }

    /// `V*d + C*d + L*(12d^2 + 13d) + 2d + d*V`.
    pub fn parameter_count(&self) -> usize {
        let (v, c, l, d) = (self.vocab_size, self.context_len, self.n_layers, self.d_model);
        v * d + c * d + l * (12 * d * d + 13 * d) + 2 * d + d * v
    }
}

/// Role of a parameter tensor, used by gradient checks and optimizer filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TensorClass {
    Embedding,
    Attention,
    FeedForward,
    Norm,
    Projection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub class: TensorClass,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    wte: usize,
    wpe: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
}

fn build_layout(cfg: &ModelConfig) -> (Vec<TensorSpec>, Offsets) {
    let (v, c, d) = (cfg.vocab_size, cfg.context_len, cfg.d_model);
    let mut specs = Vec::new();
    let mut cursor = 0;
    let mut push = |name: String, shape: Vec<usize>, class: TensorClass| {
        let offset = cursor;
        cursor += shape.iter().product::<usize>();
        specs.push(TensorSpec {
            name,
            shape,
            offset,
            class,
        });
        offset
    };
    use TensorClass::*;
    let wte = push("wte".into(), vec![v, d], Embedding);
    let wpe = push("wpe".into(), vec![c, d], Embedding);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        layers.push(LayerOffsets {
            ln1_g: push(format!("h{l}.ln1.g"), vec![d], Norm),
            ln1_b: push(format!("h{l}.ln1.b"), vec![d], Norm),
            w_qkv: push(format!("h{l}.attn.w_qkv"), vec![d, 3 * d], Attention),
            b_qkv: push(format!("h{l}.attn.b_qkv"), vec![3 * d], Attention),
            w_o: push(format!("h{l}.attn.w_o"), vec![d, d], Attention),
            b_o: push(format!("h{l}.attn.b_o"), vec![d], Attention),
            ln2_g: push(format!("h{l}.ln2.g"), vec![d], Norm),
            ln2_b: push(format!("h{l}.ln2.b"), vec![d], Norm),
            w_fc: push(format!("h{l}.mlp.w_fc"), vec![d, 4 * d], FeedForward),
            b_fc: push(format!("h{l}.mlp.b_fc"), vec![4 * d], FeedForward),
            w_proj: push(format!("h{l}.mlp.w_proj"), vec![4 * d, d], FeedForward),
            b_proj: push(format!("h{l}.mlp.b_proj"), vec![d], FeedForward),
        });
    }
    let lnf_g = push("lnf.g".into(), vec![d], Norm);
    let lnf_b = push("lnf.b".into(), vec![d], Norm);
    let w_out = push("w_out".into(), vec![d, v], Projection);
    (
        specs,
        Offsets {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            w_out,
        },
    )
}

/// Gradient buffer sharing the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub data: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(len: usize) -> Self {
        Gradients {
            data: vec![T::zero(); len],
        }
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|g| *g = *g * factor);
    }

    /// Euclidean norm accumulated in 64-bit.
    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|g| g.is_zero())
    }
}

/// One sequence of a weighted next-symbol loss.
///
/// `weights[t]` scales `-log p(symbols[t] | symbols[..t])`; `weights[0]` is
/// ignored because the first symbol has no prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSequence {
    pub symbols: Vec<Symbol>,
    pub weights: Vec<f64>,
    /// Scored symbols when they differ from the conditioning input;
    /// `None` means `symbols` itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<Symbol>>,
}

impl WeightedSequence {
    pub fn new(symbols: Vec<Symbol>, weights: Vec<f64>) -> Self {
        WeightedSequence {
            symbols,
            weights,
            labels: None,
        }
    }

    fn label(&self, t: usize) -> Symbol {
        self.labels.as_ref().map_or(self.symbols[t], |l| l[t])
    }
}

#[derive(Debug, Clone)]
struct LnCache<T> {
    out: Vec<T>,
    mean: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    h_in: Vec<T>,
    ln1: LnCache<T>,
    qkv: Vec<T>,
    att: Vec<T>,
    y: Vec<T>,
    h_mid: Vec<T>,
    ln2: LnCache<T>,
    f: Vec<T>,
    /// `tanh` inside the GELU, reused by the backward pass.
    th: Vec<T>,
    g: Vec<T>,
}

/// Activations of one full-sequence forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    tokens: Vec<Symbol>,
    layers: Vec<LayerCache<T>>,
    h_final: Vec<T>,
    lnf: LnCache<T>,
    logits: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Logits row `t` predicts symbol `t + 1`.
    pub fn logits_row(&self, t: usize, vocab: usize) -> &[T] {
        &self.logits[t * vocab..(t + 1) * vocab]
    }
}

/// A scalar loss `sum_i sum_t w_it * -log p(y_it)` with the forward passes
/// needed to differentiate it.
#[derive(Debug, Clone)]
pub struct LossGraph<T> {
    terms: Vec<LossTerm<T>>,
    value: f64,
}

#[derive(Debug, Clone)]
struct LossTerm<T> {
    trace: ForwardTrace<T>,
    weights: Vec<f64>,
    labels: Vec<Symbol>,
    /// log-sum-exp of each weighted logits row, reused by `backward`
    lse: Vec<f64>,
}

impl<T: Scalar> LossGraph<T> {
    /// A graph with no recorded forward pass; `backward` rejects it.
    pub fn empty() -> Self {
        LossGraph {
            terms: Vec::new(),
            value: 0.0,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Incremental decoding state: per-layer key/value cache plus the logits
/// for the next symbol.
#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    logits: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct TransformerPolicy<T> {
    config: ModelConfig,
    layout: Vec<TensorSpec>,
    offsets: Offsets,
    params: Vec<T>,
}

// the layout and offsets are functions of the config
impl<T: PartialEq> PartialEq for TransformerPolicy<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<T: Scalar> TransformerPolicy<T> {
    /// Scaled-normal initialization: N(0, 0.02) for matrices and embeddings,
    /// with the residual output projections further scaled by 1/sqrt(2L).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, offsets) = build_layout(&config);
        let total = layout.last().map(|s| s.offset + s.len()).unwrap_or(0);
        debug_assert_eq!(total, config.parameter_count());
        let mut params = vec![T::zero(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        for spec in &layout {
            let name = spec.name.as_str();
            let slice = &mut params[spec.range()];
            if name.ends_with(".g") {
                slice.iter_mut().for_each(|p| *p = T::one());
            } else if spec.shape.len() == 1 {
                // biases start at zero
            } else {
                let std = if name.ends_with("w_o") || name.ends_with("w_proj") {
                    resid_std
                } else {
                    INIT_STD
                };
                for p in slice.iter_mut() {
                    *p = T::of(std * standard_normal(&mut rng));
                }
            }
        }
        Ok(TransformerPolicy {
            config,
            layout,
            offsets,
            params,
        })
    }

    /// Rebuilds a policy from a config and a flat parameter buffer.
    pub fn from_parameters(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        let mut policy = Self::new(config, 0)?;
        if params.len() != policy.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                policy.params.len(),
                params.len()
            )));
        }
        policy.params = params;
        Ok(policy)
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> TransformerPolicy<U> {
        let params = self.params.iter().map(|p| U::of(p.f64())).collect();
        TransformerPolicy::from_parameters(self.config, params).expect("same config")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn parameters(&self) -> &[T] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients::zeros(self.params.len())
    }

    fn p(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }

    fn check_tokens(&self, tokens: &[Symbol]) -> Result<()> {
        if tokens.len() > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                limit: self.config.context_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "symbol {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Full-sequence forward pass keeping every activation for `backward`.
    pub fn forward(&self, tokens: &[Symbol]) -> Result<ForwardTrace<T>> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        let cfg = &self.config;
        let (n, d, v, nh) = (tokens.len(), cfg.d_model, cfg.vocab_size, cfg.n_heads);
        let off = &self.offsets;

        let mut h = vec![T::zero(); n * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = self.p(off.wte + tok as usize * d, d);
            let pe = self.p(off.wpe + t * d, d);
            for (i, x) in h[t * d..(t + 1) * d].iter_mut().enumerate() {
                *x = e[i] + pe[i];
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lo in &off.layers {
            let h_in = h.clone();
            let ln1 = layer_norm(&h_in, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d), n, d);
            let mut qkv = vec![T::zero(); n * 3 * d];
            linear(&ln1.out, self.p(lo.w_qkv, 3 * d * d), Some(self.p(lo.b_qkv, 3 * d)), n, d, 3 * d, &mut qkv);
            let (y, att) = attention_forward(&qkv, n, d, nh);
            let mut o = vec![T::zero(); n * d];
            linear(&y, self.p(lo.w_o, d * d), Some(self.p(lo.b_o, d)), n, d, d, &mut o);
            for (x, &r) in h.iter_mut().zip(&o) {
                *x = *x + r;
            }
            let h_mid = h.clone();
            let ln2 = layer_norm(&h_mid, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d), n, d);
            let mut f = vec![T::zero(); n * 4 * d];
            linear(&ln2.out, self.p(lo.w_fc, 4 * d * d), Some(self.p(lo.b_fc, 4 * d)), n, d, 4 * d, &mut f);
            let th: Vec<T> = f.iter().map(|&x| gelu_tanh(x)).collect();
            let g: Vec<T> = f.iter().zip(&th).map(|(&x, &t)| gelu_from_tanh(x, t)).collect();
            let mut p = vec![T::zero(); n * d];
            linear(&g, self.p(lo.w_proj, 4 * d * d), Some(self.p(lo.b_proj, d)), n, 4 * d, d, &mut p);
            for (x, &r) in h.iter_mut().zip(&p) {
                *x = *x + r;
            }
            layers.push(LayerCache {
                h_in,
                ln1,
                qkv,
                att,
                y,
                h_mid,
                ln2,
                f,
                th,
                g,
            });
        }

        let lnf = layer_norm(&h, self.p(off.lnf_g, d), self.p(off.lnf_b, d), n, d);
        let mut logits = vec![T::zero(); n * v];
        linear(&lnf.out, self.p(off.w_out, d * v), None, n, d, v, &mut logits);
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            layers,
            h_final: h,
            lnf,
            logits,
        })
    }

    /// `out[t - 1] = log p(sequence[t] | sequence[..t])` for `t >= 1`.
    pub fn sequence_logprobs(&self, sequence: &[Symbol]) -> Result<Vec<f64>> {
        if sequence.len() < 2 {
            return Err(Error::InvalidArgument(
                "sequence_logprobs needs at least two symbols".into(),
            ));
        }
        let trace = self.forward(sequence)?;
        let v = self.config.vocab_size;
        Ok((1..sequence.len())
            .map(|t| {
                let row: Vec<f64> = trace.logits_row(t - 1, v).iter().map(|x| x.f64()).collect();
                log_softmax(&row)[sequence[t] as usize]
            })
            .collect())
    }

    /// Records the forward passes of a weighted next-symbol loss.
    pub fn record_loss(&self, sequences: &[WeightedSequence]) -> Result<LossGraph<T>> {
        let v = self.config.vocab_size;
        let mut terms = Vec::with_capacity(sequences.len());
        let mut value = 0.0;
        for seq in sequences {
            if seq.weights.len() != seq.symbols.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} weights for {} symbols",
                    seq.weights.len(),
                    seq.symbols.len()
                )));
            }
            if let Some(labels) = &seq.labels {
                if labels.len() != seq.symbols.len() {
                    return Err(Error::InvalidArgument("labels and symbols differ in length".into()));
                }
                self.check_tokens(labels)?;
            }
            let trace = self.forward(&seq.symbols)?;
            let mut lse = vec![f64::NAN; seq.symbols.len()];
            for t in 1..seq.symbols.len() {
                let w = seq.weights[t];
                if w == 0.0 {
                    continue;
                }
                let row = trace.logits_row(t - 1, v);
                lse[t] = log_sum_exp(row);
                value -= w * (row[seq.label(t) as usize].f64() - lse[t]);
            }
            terms.push(LossTerm {
                trace,
                weights: seq.weights.clone(),
                labels: (0..seq.symbols.len()).map(|t| seq.label(t)).collect(),
                lse,
            });
        }
        Ok(LossGraph { terms, value })
    }

    /// Accumulates the gradient of `graph`'s loss into `grads`.
    pub fn backward(&self, graph: &LossGraph<T>, grads: &mut Gradients<T>) -> Result<()> {
        if graph.terms.is_empty() {
            return Err(Error::NoRecordedForward);
        }
        if grads.data.len() != self.params.len() {
            return Err(Error::InvalidArgument("gradient buffer does not match the model".into()));
        }
        let v = self.config.vocab_size;
        for term in &graph.terms {
            let trace = &term.trace;
            let n = trace.len();
            let mut dlogits = vec![T::zero(); n * v];
            for t in 1..n {
                let w = term.weights[t];
                if w == 0.0 {
                    continue;
                }
                let (row, lse) = (trace.logits_row(t - 1, v), term.lse[t]);
                let target = term.labels[t] as usize;
                let drow = &mut dlogits[(t - 1) * v..t * v];
                for (j, (dl, &l)) in drow.iter_mut().zip(row).enumerate() {
                    let onehot = if j == target { 1.0 } else { 0.0 };
                    *dl = T::of(w * ((l.f64() - lse).exp() - onehot));
                }
            }
            self.backward_trace(trace, &dlogits, grads);
        }
        Ok(())
    }

    fn backward_trace(&self, trace: &ForwardTrace<T>, dlogits: &[T], grads: &mut Gradients<T>) {
        let cfg = &self.config;
        let (n, d, v, nh) = (trace.len(), cfg.d_model, cfg.vocab_size, cfg.n_heads);
        let off = &self.offsets;
        let g = &mut grads.data;

        // output projection
        T::gemm(d, n, v, T::one(), &trace.lnf.out, true, dlogits, false, T::one(), &mut g[off.w_out..off.w_out + d * v]);
        let mut dz = vec![T::zero(); n * d];
        T::gemm(n, v, d, T::one(), dlogits, false, self.p(off.w_out, d * v), true, T::zero(), &mut dz);
        let mut dh = vec![T::zero(); n * d];
        layer_norm_backward(
            &trace.h_final,
            &trace.lnf,
            self.p(off.lnf_g, d),
            &dz,
            n,
            d,
            g,
            off.lnf_g,
            off.lnf_b,
            &mut dh,
        );

        for (lo, cache) in off.layers.iter().zip(&trace.layers).rev() {
            // feed-forward branch
            let mut dg = vec![T::zero(); n * 4 * d];
            linear_backward(&cache.g, self.p(lo.w_proj, 4 * d * d), &dh, n, 4 * d, d, g, lo.w_proj, Some(lo.b_proj), &mut dg);
            let df: Vec<T> = dg.iter().zip(&cache.f).zip(&cache.th).map(|((&gr, &x), &t)| gr * gelu_grad(x, t)).collect();
            let mut dm = vec![T::zero(); n * d];
            linear_backward(&cache.ln2.out, self.p(lo.w_fc, 4 * d * d), &df, n, d, 4 * d, g, lo.w_fc, Some(lo.b_fc), &mut dm);
            layer_norm_backward(&cache.h_mid, &cache.ln2, self.p(lo.ln2_g, d), &dm, n, d, g, lo.ln2_g, lo.ln2_b, &mut dh);

            // attention branch
            let mut dy = vec![T::zero(); n * d];
            linear_backward(&cache.y, self.p(lo.w_o, d * d), &dh, n, d, d, g, lo.w_o, Some(lo.b_o), &mut dy);
            let dqkv = attention_backward(&cache.qkv, &cache.att, &dy, n, d, nh);
            let mut da = vec![T::zero(); n * d];
            linear_backward(&cache.ln1.out, self.p(lo.w_qkv, 3 * d * d), &dqkv, n, d, 3 * d, g, lo.w_qkv, Some(lo.b_qkv), &mut da);
            layer_norm_backward(&cache.h_in, &cache.ln1, self.p(lo.ln1_g, d), &da, n, d, g, lo.ln1_g, lo.ln1_b, &mut dh);
        }

        for (t, &tok) in trace.tokens.iter().enumerate() {
            let row = &dh[t * d..(t + 1) * d];
            let te = off.wte + tok as usize * d;
            let pe = off.wpe + t * d;
            for i in 0..d {
                g[te + i] = g[te + i] + row[i];
                g[pe + i] = g[pe + i] + row[i];
            }
        }
    }

    fn empty_state(&self) -> DecodeState<T> {
        let cap = self.config.context_len * self.config.d_model;
        DecodeState {
            keys: (0..self.config.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..self.config.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            len: 0,
            logits: Vec::new(),
        }
    }

    fn step(&self, state: &mut DecodeState<T>, token: Symbol) -> Result<()> {
        let cfg = &self.config;
        if state.len >= cfg.context_len {
            return Err(Error::ContextOverflow {
                len: state.len + 1,
                limit: cfg.context_len,
            });
        }
        self.check_tokens(&[token])?;
        let (d, v, nh) = (cfg.d_model, cfg.vocab_size, cfg.n_heads);
        let hd = d / nh;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let off = &self.offsets;
        let pos = state.len;

        let e = self.p(off.wte + token as usize * d, d);
        let pe = self.p(off.wpe + pos * d, d);
        let mut x: Vec<T> = e.iter().zip(pe).map(|(&a, &b)| a + b).collect();

        for (l, lo) in off.layers.iter().enumerate() {
            let a = layer_norm(&x, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d), 1, d).out;
            let mut qkv = vec![T::zero(); 3 * d];
            linear(&a, self.p(lo.w_qkv, 3 * d * d), Some(self.p(lo.b_qkv, 3 * d)), 1, d, 3 * d, &mut qkv);
            state.keys[l].extend_from_slice(&qkv[d..2 * d]);
            state.values[l].extend_from_slice(&qkv[2 * d..3 * d]);
            let keys = &state.keys[l];
            let values = &state.values[l];
            let mut y = vec![T::zero(); d];
            let mut scores = vec![T::zero(); pos + 1];
            for head in 0..nh {
                let q = &qkv[head * hd..(head + 1) * hd];
                let mut max = T::neg_infinity();
                for (s, sc) in scores.iter_mut().enumerate() {
                    let k = &keys[s * d + head * hd..s * d + (head + 1) * hd];
                    *sc = dot(q, k) * scale;
                    max = max.max(*sc);
                }
                let mut total = T::zero();
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    total = total + *sc;
                }
                let yh = &mut y[head * hd..(head + 1) * hd];
                for (s, &w) in scores.iter().enumerate() {
                    let p = w / total;
                    let vs = &values[s * d + head * hd..s * d + (head + 1) * hd];
                    for (yi, &vi) in yh.iter_mut().zip(vs) {
                        *yi = *yi + p * vi;
                    }
                }
            }
            let mut o = vec![T::zero(); d];
            linear(&y, self.p(lo.w_o, d * d), Some(self.p(lo.b_o, d)), 1, d, d, &mut o);
            for (xi, &r) in x.iter_mut().zip(&o) {
                *xi = *xi + r;
            }
            let m = layer_norm(&x, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d), 1, d).out;
            let mut f = vec![T::zero(); 4 * d];
            linear(&m, self.p(lo.w_fc, 4 * d * d), Some(self.p(lo.b_fc, 4 * d)), 1, d, 4 * d, &mut f);
            f.iter_mut().for_each(|z| *z = gelu(*z));
            let mut p = vec![T::zero(); d];
            linear(&f, self.p(lo.w_proj, 4 * d * d), Some(self.p(lo.b_proj, d)), 1, 4 * d, d, &mut p);
            for (xi, &r) in x.iter_mut().zip(&p) {
                *xi = *xi + r;
            }
        }
        let z = layer_norm(&x, self.p(off.lnf_g, d), self.p(off.lnf_b, d), 1, d).out;
        let mut logits = vec![T::zero(); v];
        linear(&z, self.p(off.w_out, d * v), None, 1, d, v, &mut logits);
        state.logits = logits;
        state.len += 1;
        Ok(())
    }
}

impl<T: Scalar> Policy for TransformerPolicy<T> {
    type State = DecodeState<T>;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_limit(&self) -> usize {
        self.config.context_len
    }

    fn prompt_window(&self) -> usize {
        self.config.prompt_window
    }

    fn start(&self, prefix: &[Symbol]) -> Result<Self::State> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("decoding needs a non-empty prefix".into()));
        }
        self.check_tokens(prefix)?;
        let mut state = self.empty_state();
        for &tok in prefix {
            self.step(&mut state, tok)?;
        }
        Ok(state)
    }

    fn advance(&self, state: &mut Self::State, symbol: Symbol) -> Result<()> {
        self.step(state, symbol)
    }

    fn next_logits(&self, state: &Self::State) -> Vec<f64> {
        state.logits.iter().map(|x| x.f64()).collect()
    }

    fn position(&self, state: &Self::State) -> usize {
        state.len
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[inline]
/// `max + ln(sum exp(l - max))`, the same normalizer `log_softmax` uses.
fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn linear<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, n: usize, i: usize, o: usize, out: &mut [T]) {
    match b {
        Some(b) => {
            for row in out.chunks_exact_mut(o).take(n) {
                row.copy_from_slice(b);
            }
            T::gemm(n, i, o, T::one(), x, false, w, false, T::one(), out);
        }
        None => T::gemm(n, i, o, T::one(), x, false, w, false, T::zero(), out),
    }
}

/// Accumulates weight and bias gradients and writes `dx = dout * W^T`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    n: usize,
    i: usize,
    o: usize,
    grads: &mut [T],
    w_off: usize,
    b_off: Option<usize>,
    dx: &mut [T],
) {
    T::gemm(i, n, o, T::one(), x, true, dout, false, T::one(), &mut grads[w_off..w_off + i * o]);
    if let Some(b_off) = b_off {
        let db = &mut grads[b_off..b_off + o];
        for row in dout.chunks_exact(o) {
            for (g, &r) in db.iter_mut().zip(row) {
                *g = *g + r;
            }
        }
    }
    T::gemm(n, o, i, T::one(), dout, false, w, true, T::zero(), dx);
}

fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], n: usize, d: usize) -> LnCache<T> {
    let mut out = vec![T::zero(); n * d];
    let mut mean = vec![T::zero(); n];
    let mut rstd = vec![T::zero(); n];
    let dn = T::of(d as f64);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let m = row.iter().fold(T::zero(), |a, &b| a + b) / dn;
        let var = row.iter().fold(T::zero(), |a, &b| a + (b - m) * (b - m)) / dn;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        for (j, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
            *o = (row[j] - m) * rs * gain[j] + bias[j];
        }
        mean[r] = m;
        rstd[r] = rs;
    }
    LnCache { out, mean, rstd }
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    x: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    dout: &[T],
    n: usize,
    d: usize,
    grads: &mut [T],
    g_off: usize,
    b_off: usize,
    dx: &mut [T],
) {
    let dn = T::of(d as f64);
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let (m, rs) = (cache.mean[r], cache.rstd[r]);
        let row = &x[r * d..(r + 1) * d];
        let drow = &dout[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            xhat[j] = (row[j] - m) * rs;
            dxhat[j] = drow[j] * gain[j];
            grads[g_off + j] = grads[g_off + j] + drow[j] * xhat[j];
            grads[b_off + j] = grads[b_off + j] + drow[j];
            mean_dxhat = mean_dxhat + dxhat[j];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xhat[j];
        }
        mean_dxhat = mean_dxhat / dn;
        mean_dxhat_xhat = mean_dxhat_xhat / dn;
        for j in 0..d {
            let v = rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            dx[r * d + j] = dx[r * d + j] + v;
        }
    }
}

/// Causal attention. Returns the head outputs `[n, d]` and the attention
/// probabilities `[heads, n, n]` (zero above the diagonal).
fn attention_forward<T: Scalar>(qkv: &[T], n: usize, d: usize, nh: usize) -> (Vec<T>, Vec<T>) {
    let hd = d / nh;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut y = vec![T::zero(); n * d];
    let mut att = vec![T::zero(); nh * n * n];
    for h in 0..nh {
        let (q, k, v) = (h * hd, d + h * hd, 2 * d + h * hd);
        let probs = &mut att[h * n * n..(h + 1) * n * n];
        // scores = scale * Q K^T, full square; the causal part is kept below
        T::gemm_strided(n, hd, n, scale, &qkv[q..], (3 * d, 1), &qkv[k..], (1, 3 * d), T::zero(), probs, (n, 1));
        for (t, row) in probs.chunks_exact_mut(n).enumerate() {
            let (live, future) = row.split_at_mut(t + 1);
            let max = live.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
            let mut total = T::zero();
            for a in live.iter_mut() {
                *a = (*a - max).exp();
                total = total + *a;
            }
            live.iter_mut().for_each(|a| *a = *a / total);
            future.iter_mut().for_each(|a| *a = T::zero());
        }
        T::gemm_strided(n, n, hd, T::one(), probs, (n, 1), &qkv[v..], (3 * d, 1), T::zero(), &mut y[h * hd..], (d, 1));
    }
    (y, att)
}

fn attention_backward<T: Scalar>(qkv: &[T], att: &[T], dy: &[T], n: usize, d: usize, nh: usize) -> Vec<T> {
    let hd = d / nh;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dqkv = vec![T::zero(); n * 3 * d];
    let mut ds = vec![T::zero(); n * n];
    for h in 0..nh {
        let (q, k, v) = (h * hd, d + h * hd, 2 * d + h * hd);
        let probs = &att[h * n * n..(h + 1) * n * n];
        let dyh = &dy[h * hd..];
        // dV = P^T dY
        T::gemm_strided(n, n, hd, T::one(), probs, (1, n), dyh, (d, 1), T::zero(), &mut dqkv[v..], (3 * d, 1));
        // dP = dY V^T, then the softmax Jacobian in place
        T::gemm_strided(n, hd, n, T::one(), dyh, (d, 1), &qkv[v..], (1, 3 * d), T::zero(), &mut ds, (n, 1));
        for (row, p) in ds.chunks_exact_mut(n).zip(probs.chunks_exact(n)) {
            let weighted = row.iter().zip(p).fold(T::zero(), |acc, (&g, &pr)| acc + g * pr);
            for (g, &pr) in row.iter_mut().zip(p) {
                *g = pr * (*g - weighted) * scale;
            }
        }
        // dQ = dS K, dK = dS^T Q
        T::gemm_strided(n, n, hd, T::one(), &ds, (n, 1), &qkv[k..], (3 * d, 1), T::zero(), &mut dqkv[q..], (3 * d, 1));
        T::gemm_strided(n, n, hd, T::one(), &ds, (1, n), &qkv[q..], (3 * d, 1), T::zero(), &mut dqkv[k..], (3 * d, 1));
    }
    dqkv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044715;

/// `tanh(sqrt(2/pi) * (x + 0.044715 x^3))`.
#[inline]
fn gelu_tanh<T: Scalar>(x: T) -> T {
    (T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x)).tanh()
}

#[inline]
fn gelu_from_tanh<T: Scalar>(x: T, th: T) -> T {
    T::of(0.5) * x * (T::one() + th)
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    gelu_from_tanh(x, gelu_tanh(x))
}

/// Derivative of the GELU at `x` given `th = gelu_tanh(x)`.
#[inline]
fn gelu_grad<T: Scalar>(x: T, th: T) -> T {
    let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            context_len: 16,
            prompt_window: 4,
        }
    }

    #[test]
    fn parameter_count_matches_layout() {
        for cfg in [tiny(11), ModelConfig::default()] {
            let p = TransformerPolicy::<f32>::new(cfg, 0).unwrap();
            assert_eq!(p.num_parameters(), cfg.parameter_count());
        }
        // 264*128 + 512*128 + 4*(12*128^2 + 13*128) + 2*128 + 128*264
        assert_eq!(ModelConfig::default().parameter_count(), 926_464);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny(5);
        cfg.n_heads = 3;
        assert!(TransformerPolicy::<f64>::new(cfg, 0).is_err());
        let mut cfg = tiny(5);
        cfg.prompt_window = cfg.context_len;
        assert!(TransformerPolicy::<f64>::new(cfg, 0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_logits_are_finite() {
        let p = TransformerPolicy::<f32>::new(tiny(11), 3).unwrap();
        let trace = p.forward(&[1, 2, 3, 4, 5, 6]).unwrap();
        for t in 0..6 {
            let row: Vec<f64> = trace.logits_row(t, 11).iter().map(|x| x.f64()).collect();
            assert!(row.iter().all(|x| x.is_finite()));
            let total: f64 = log_softmax(&row).iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_symbol_vocabulary_has_zero_logprobs() {
        let p = TransformerPolicy::<f64>::new(tiny(1), 0).unwrap();
        let lp = p.sequence_logprobs(&[0, 0, 0, 0]).unwrap();
        assert_eq!(lp.len(), 3);
        assert!(lp.iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn overflow_and_short_sequences_are_errors() {
        let p = TransformerPolicy::<f64>::new(tiny(5), 0).unwrap();
        assert!(matches!(p.sequence_logprobs(&[1; 17]), Err(Error::ContextOverflow { .. })));
        assert!(p.sequence_logprobs(&[1]).is_err());
        assert!(matches!(p.start(&[1; 17]), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let p = TransformerPolicy::<f64>::new(tiny(9), 5).unwrap();
        let seq = [3, 1, 4, 1, 5, 2, 6, 5];
        let trace = p.forward(&seq).unwrap();
        let mut state = p.start(&seq[..1]).unwrap();
        for t in 0..seq.len() {
            let got = p.next_logits(&state);
            for (a, b) in got.iter().zip(trace.logits_row(t, 9)) {
                assert!((a - b).abs() < 1e-12);
            }
            if t + 1 < seq.len() {
                p.advance(&mut state, seq[t + 1]).unwrap();
            }
        }
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let p = TransformerPolicy::<f64>::new(tiny(5), 0).unwrap();
        let mut g = p.zero_gradients();
        assert!(matches!(p.backward(&LossGraph::empty(), &mut g), Err(Error::NoRecordedForward)));
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let p = TransformerPolicy::<f64>::new(tiny(5), 0).unwrap();
        let seq = WeightedSequence::new(vec![1, 2, 3], vec![0.0; 3]);
        let graph = p.record_loss(&[seq]).unwrap();
        assert_eq!(graph.value(), 0.0);
        let mut g = p.zero_gradients();
        p.backward(&graph, &mut g).unwrap();
        assert!(g.is_all_zero());
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let p = TransformerPolicy::<f64>::new(tiny(7), 1).unwrap();
        let a = WeightedSequence::new(vec![1, 2, 3, 4], vec![0.0, 1.0, 0.5, 0.0]);
        let b = WeightedSequence::new(vec![6, 5, 4], vec![0.0, 0.0, 2.0]);
        let grad_of = |seqs: &[WeightedSequence]| {
            let mut g = p.zero_gradients();
            p.backward(&p.record_loss(seqs).unwrap(), &mut g).unwrap();
            g
        };
        let mut sum = grad_of(std::slice::from_ref(&a));
        sum.add_assign(&grad_of(std::slice::from_ref(&b)));
        let joint = grad_of(&[a, b]);
        for (x, y) in sum.data.iter().zip(&joint.data) {
            assert!((x - y).abs() < 1e-13);
        }
    }
}
