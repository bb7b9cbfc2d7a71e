//! Adam updates over mini-batches of teacher-forcing examples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vidtune_core::{CoreError, Result};

use crate::model::Example;
use crate::scalar::Scalar;
use crate::weights::ModelWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Linear ramp from 0 over this many steps.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            warmup_steps: 0,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    /// Mean cross-entropy per loss position (nats).
    pub loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

/// Adam with bias correction. Moments are kept flat, one buffer per tensor
/// in [`ModelWeights::tensors`] order.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: OptimizerConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: usize,
}

impl<F: Scalar> Adam<F> {
    pub fn new(weights: &ModelWeights<F>, config: OptimizerConfig) -> Self {
        let zeros: Vec<Vec<F>> = weights.tensors().iter().map(|(_, t)| vec![F::zero(); t.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        if c.warmup_steps == 0 {
            c.learning_rate
        } else {
            c.learning_rate * ((self.step + 1) as f64 / c.warmup_steps as f64).min(1.0)
        }
    }

    pub fn apply(&mut self, weights: &mut ModelWeights<F>, grads: &ModelWeights<F>) {
        let lr = F::of(self.current_lr());
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let corr1 = F::of(1.0 - c.beta1.powi(self.step as i32));
        let corr2 = F::of(1.0 - c.beta2.powi(self.step as i32));
        let eps = F::of(c.epsilon);
        let g = grads.tensors();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        weights.for_each_mut(|_, mut w| {
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for (((w, &g), m), v) in w.iter_mut().zip(g[idx].1.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let update = (*m / corr1) / ((*v / corr2).sqrt() + eps);
                *w -= lr * update;
            }
            idx += 1;
        });
    }
}

/// Gradient of the mean loss over every loss position of the batch.
/// Examples are processed in parallel and reduced in batch order, so the
/// result does not depend on the worker count.
pub fn batch_gradient<F: Scalar>(weights: &ModelWeights<F>, batch: &[Example]) -> Result<(ModelWeights<F>, f64, usize)> {
    let tokens: usize = batch.iter().map(Example::n_loss_tokens).sum();
    if tokens == 0 {
        return Err(CoreError::Domain("batch has no loss positions".into()));
    }
    let scale = 1.0 / tokens as f64;
    let parts: Vec<(ModelWeights<F>, f64)> = batch
        .par_iter()
        .map(|ex| {
            let mut g = weights.zeros_like();
            let (loss, _) = weights.loss_and_grad(ex, scale, &mut g)?;
            Ok((g, loss))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut total, mut loss) = iter.next().expect("non-empty batch");
    for (g, l) in iter {
        total.add_assign(&g);
        loss += l;
    }
    Ok((total, loss / tokens as f64, tokens))
}

/// One optimisation step. A non-finite loss or gradient leaves `weights`
/// untouched and reports a divergence.
pub fn train_step<F: Scalar>(weights: &mut ModelWeights<F>, batch: &[Example], opt: &mut Adam<F>) -> Result<StepStats> {
    let (mut grads, loss, tokens) = batch_gradient(weights, batch)?;
    let grad_norm = grads.squared_norm().sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(CoreError::Divergence {
            step: opt.steps_taken(),
            detail: format!(
                "loss {loss}, gradient norm {grad_norm}, learning rate {}, {tokens} tokens",
                opt.current_lr()
            ),
        });
    }
    let clip = opt.config.grad_clip;
    if clip > 0.0 && grad_norm > clip {
        grads.scale(F::of(clip / grad_norm));
    }
    let learning_rate = opt.current_lr();
    opt.apply(weights, &grads);
    Ok(StepStats {
        step: opt.steps_taken(),
        loss,
        tokens,
        grad_norm,
        learning_rate,
    })
}

/// Mean loss per position over `examples`, without gradients.
pub fn evaluate_loss<F: Scalar>(weights: &ModelWeights<F>, examples: &[Example]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = examples.par_iter().map(|e| weights.loss(e)).collect::<Result<_>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), &(l, c)| (s + l, n + c));
    if n == 0 {
        return Err(CoreError::Domain("no loss positions".into()));
    }
    Ok(sum / n as f64)
}
