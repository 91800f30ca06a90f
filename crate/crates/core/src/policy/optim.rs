//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::transformer::{Gradients, TensorSpec, TransformerPolicy};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    /// RL-stage optimizer settings.
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-6,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip_norm: Some(0.1),
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    /// Factor applied to the gradient by clipping (1 when not clipped).
    pub clip_scale: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
    trainable: Option<Vec<bool>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, num_parameters: usize) -> Self {
        AdamW {
            config,
            m: vec![T::zero(); num_parameters],
            v: vec![T::zero(); num_parameters],
            step: 0,
            trainable: None,
        }
    }

    /// Restricts updates to tensors accepted by `keep`; the rest stay frozen.
    pub fn with_trainable(mut self, layout: &[TensorSpec], keep: impl Fn(&TensorSpec) -> bool) -> Self {
        let mut mask = vec![false; self.m.len()];
        for spec in layout.iter().filter(|s| keep(s)) {
            mask[spec.range()].iter_mut().for_each(|b| *b = true);
        }
        self.trainable = Some(mask);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips `grads` to the configured global norm, then applies one
    /// decoupled-weight-decay Adam update to `params`.
    pub fn step(&mut self, params: &mut [T], grads: &Gradients<T>) -> Result<StepStats> {
        self.step_with_layout(params, grads, &[])
    }

    pub fn step_policy(&mut self, policy: &mut TransformerPolicy<T>, grads: &Gradients<T>) -> Result<StepStats> {
        let layout = policy.layout().to_vec();
        self.step_with_layout(policy.parameters_mut(), grads, &layout)
    }

    fn step_with_layout(&mut self, params: &mut [T], grads: &Gradients<T>, layout: &[TensorSpec]) -> Result<StepStats> {
        if params.len() != self.m.len() || grads.data.len() != self.m.len() {
            return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            let bad = grads.data.iter().position(|g| !g.is_finite()).unwrap_or(0);
            let tensor = layout
                .iter()
                .find(|s| s.range().contains(&bad))
                .map(|s| s.name.clone())
                .unwrap_or_else(|| format!("parameter #{bad}"));
            return Err(Error::NonFiniteGradient { tensor, norm });
        }
        let clip_scale = match self.config.grad_clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };

        self.step += 1;
        let cfg = self.config;
        let (b1, b2) = cfg.betas;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let scale = T::of(clip_scale);
        let decay = T::of(1.0 - cfg.lr * cfg.weight_decay);
        let step_size = T::of(cfg.lr / bias1);
        let bias2_sqrt = T::of(bias2.sqrt());
        let eps = T::of(cfg.eps);

        for i in 0..params.len() {
            if let Some(mask) = &self.trainable {
                if !mask[i] {
                    continue;
                }
            }
            let g = grads.data[i] * scale;
            self.m[i] = b1t * self.m[i] + one_b1 * g;
            self.v[i] = b2t * self.v[i] + one_b2 * g * g;
            let denom = self.v[i].sqrt() / bias2_sqrt + eps;
            params[i] = params[i] * decay - step_size * self.m[i] / denom;
        }
        Ok(StepStats { grad_norm: norm, clip_scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut params = vec![0.5f64, -1.25, 3.0];
        let before = params.clone();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, 3);
        opt.step(&mut params, &Gradients::zeros(3)).unwrap();
        assert_eq!(params, before);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn clipping_scales_norm_ten_to_point_one() {
        let mut params = vec![0.0f64; 2];
        let grads = Gradients { data: vec![6.0, 8.0] };
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        let stats = opt.step(&mut params, &grads).unwrap();
        assert_eq!(stats.grad_norm, 10.0);
        assert!((stats.clip_scale - 0.01).abs() < 1e-15);
        // first moment after one step is (1 - beta1) * clipped gradient
        assert!((opt.m[0] - 0.1 * 0.06).abs() < 1e-15);
        assert!((opt.m[1] - 0.1 * 0.08).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut params = vec![1.0f32; 2];
        let grads = Gradients { data: vec![1.0, f32::NAN] };
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        let err = opt.step(&mut params, &grads).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        assert_eq!(params, vec![1.0, 1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        // f(x) = (x - 3)^2
        let mut x = vec![-2.0f64];
        let mut opt = AdamW::new(
            AdamWConfig { lr: 0.05, grad_clip_norm: None, ..Default::default() },
            1,
        );
        for _ in 0..1000 {
            let g = Gradients { data: vec![2.0 * (x[0] - 3.0)] };
            opt.step(&mut x, &g).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-2, "x = {}", x[0]);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut x = vec![2.0f64];
        let mut opt = AdamW::new(
            AdamWConfig { lr: 0.1, weight_decay: 0.5, grad_clip_norm: None, ..Default::default() },
            1,
        );
        opt.step(&mut x, &Gradients::zeros(1)).unwrap();
        assert!((x[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
