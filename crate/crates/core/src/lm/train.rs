//! Mini-batch training with gradient accumulation, global-norm clipping and
//! validation-perplexity early stopping.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use super::batch::{masked_example, Example};
use super::config::{OptimizerKind, TrainConfig};
use super::model::LanguageModel;
use super::params::Float;
use super::LmError;
use crate::seed;

/// Examples per gradient work unit; fixed so the summation order (and the
/// result) does not depend on the thread count.
const GROUP_SIZE: usize = 4;

/// Supplies training examples; `draw` seeds any per-visit randomness.
pub trait ExampleSource: Sync {
    fn len(&self) -> usize;
    fn example(&self, index: usize, draw: u64) -> Example;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ExampleSource for [Example] {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }
    fn example(&self, index: usize, _draw: u64) -> Example {
        self[index].clone()
    }
}

impl ExampleSource for Vec<Example> {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }
    fn example(&self, index: usize, _draw: u64) -> Example {
        self[index].clone()
    }
}

/// Token sequences re-masked on every visit.
pub struct MaskedSource {
    pub sequences: Vec<Vec<u32>>,
    pub mask_rate: f64,
}

impl ExampleSource for MaskedSource {
    fn len(&self) -> usize {
        self.sequences.len()
    }
    fn example(&self, index: usize, draw: u64) -> Example {
        let mut rng = seed::rng(draw);
        masked_example(&self.sequences[index], self.mask_rate, &mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub perplexity: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub validations: Vec<ValidationRecord>,
    pub steps: usize,
    pub epochs_started: usize,
    pub initial_perplexity: f64,
    pub best_perplexity: f64,
    pub best_step: usize,
    pub stop: StopReason,
    /// Mean training loss of each optimizer step.
    pub step_losses: Vec<f64>,
}

enum Optimizer<T> {
    Sgd,
    Adam { m: Vec<T>, v: Vec<T>, t: i32 },
}

impl<T: Float> Optimizer<T> {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 },
        }
    }

    fn apply(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        match self {
            Optimizer::Sgd => {
                let lr = T::c(lr);
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                let (b1, b2, eps) = (T::c(B1), T::c(B2), T::c(1e-8));
                let step = T::c(lr / c1);
                let c2 = T::c(c2);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (T::one() - b1) * g;
                    v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                    params[i] -= step * m[i] / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Summed loss, label count, and summed gradient over a set of examples.
pub fn accumulate_gradient<T: Float>(
    model: &LanguageModel<T>,
    examples: &[Example],
    grad: &mut [T],
) -> Result<(f64, usize), LmError> {
    let parts: Vec<Result<(Vec<T>, f64, usize), LmError>> = examples
        .par_chunks(GROUP_SIZE)
        .map(|group| {
            let mut buf = vec![T::zero(); model.num_params()];
            let mut loss = 0.0;
            let mut count = 0;
            for ex in group {
                let (l, c) = model.loss_and_grad(ex, &mut buf)?;
                loss += l;
                count += c;
            }
            Ok((buf, loss, count))
        })
        .collect();
    let mut loss = 0.0;
    let mut count = 0;
    for part in parts {
        let (buf, l, c) = part?;
        for (g, b) in grad.iter_mut().zip(buf) {
            *g += b;
        }
        loss += l;
        count += c;
    }
    Ok((loss, count))
}

/// Summed loss and label count over examples (no gradient).
pub fn total_loss<T: Float>(model: &LanguageModel<T>, examples: &[Example]) -> Result<(f64, usize), LmError> {
    let parts: Vec<Result<(f64, usize), LmError>> = examples.par_iter().map(|ex| model.loss(ex)).collect();
    let mut loss = 0.0;
    let mut count = 0;
    for p in parts {
        let (l, c) = p?;
        loss += l;
        count += c;
    }
    Ok((loss, count))
}

/// `exp` of the token-weighted mean loss.
pub fn perplexity<T: Float>(model: &LanguageModel<T>, examples: &[Example]) -> Result<f64, LmError> {
    let (loss, count) = total_loss(model, examples)?;
    if count == 0 {
        return Err(LmError::EmptyLossMask);
    }
    Ok((loss / count as f64).exp())
}

fn clip_global_norm<T: Float>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g.f() * g.f()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Train in place; on return the model holds the best-validation parameters.
pub fn train_model<T: Float, S: ExampleSource + ?Sized>(
    model: &mut LanguageModel<T>,
    train: &S,
    valid: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainReport, LmError> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(LmError::EmptySplit);
    }
    let n_params = model.num_params();
    let mut optimizer = Optimizer::<T>::new(cfg.optimizer, n_params);
    let mut grad = vec![T::zero(); n_params];

    let initial = perplexity(model, valid)?;
    info!(perplexity = initial, "initial validation");
    let mut report = TrainReport {
        validations: vec![ValidationRecord { step: 0, perplexity: initial, improved: true }],
        steps: 0,
        epochs_started: 0,
        initial_perplexity: initial,
        best_perplexity: initial,
        best_step: 0,
        stop: StopReason::MaxEpochs,
        step_losses: Vec::new(),
    };
    let mut best_params = model.params().to_vec();
    let mut stale = 0usize;
    let mut micro = 0usize;
    let mut window = (0.0f64, 0usize);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut order_rng = seed::derived_rng(cfg.seed, "order");

    let mut take_step = |model: &mut LanguageModel<T>,
                         grad: &mut Vec<T>,
                         window: &mut (f64, usize),
                         report: &mut TrainReport|
     -> Result<(), LmError> {
        let (loss, count) = std::mem::take(window);
        report.steps += 1;
        if count > 0 {
            let mean = loss / count as f64;
            if !mean.is_finite() {
                return Err(LmError::Diverged { step: report.steps, loss: mean });
            }
            let inv = T::c(1.0 / count as f64);
            grad.iter_mut().for_each(|g| *g *= inv);
            let norm = clip_global_norm(grad, cfg.max_grad_norm);
            optimizer.apply(model.params_mut(), grad, cfg.learning_rate);
            report.step_losses.push(mean);
            debug!(step = report.steps, loss = mean, grad_norm = norm, "step");
        }
        grad.iter_mut().for_each(|g| *g = T::zero());
        Ok(())
    };

    'epochs: for epoch in 0..cfg.max_epochs {
        report.epochs_started = epoch + 1;
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let examples: Vec<Example> = chunk
                .iter()
                .map(|&i| train.example(i, seed::derive(cfg.seed, &format!("draw/{epoch}/{i}"))))
                .collect();
            let (loss, count) = accumulate_gradient(model, &examples, &mut grad)?;
            if !loss.is_finite() {
                return Err(LmError::Diverged { step: report.steps, loss });
            }
            window.0 += loss;
            window.1 += count;
            micro += 1;
            if micro < cfg.grad_accum_steps {
                continue;
            }
            micro = 0;
            take_step(model, &mut grad, &mut window, &mut report)?;
            if report.steps % cfg.validate_every_n_steps == 0 {
                let ppl = perplexity(model, valid)?;
                if !ppl.is_finite() {
                    return Err(LmError::Diverged { step: report.steps, loss: ppl.ln() });
                }
                let improved = ppl < report.best_perplexity;
                report.validations.push(ValidationRecord { step: report.steps, perplexity: ppl, improved });
                info!(step = report.steps, perplexity = ppl, improved, "validation");
                if improved {
                    report.best_perplexity = ppl;
                    report.best_step = report.steps;
                    best_params.copy_from_slice(model.params());
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.early_stop_patience {
                        report.stop = StopReason::EarlyStop;
                        break 'epochs;
                    }
                }
            }
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                report.stop = StopReason::MaxSteps;
                break 'epochs;
            }
        }
    }
    if report.stop == StopReason::MaxEpochs && micro > 0 {
        take_step(model, &mut grad, &mut window, &mut report)?;
    }
    if report.stop != StopReason::EarlyStop
        && report.validations.last().map(|v| v.step) != Some(report.steps)
    {
        let ppl = perplexity(model, valid)?;
        let improved = ppl < report.best_perplexity;
        report.validations.push(ValidationRecord { step: report.steps, perplexity: ppl, improved });
        if improved {
            report.best_perplexity = ppl;
            report.best_step = report.steps;
            best_params.copy_from_slice(model.params());
        }
    }
    model.params_mut().copy_from_slice(&best_params);
    Ok(report)
}
