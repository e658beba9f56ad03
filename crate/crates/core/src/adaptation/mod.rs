//! Rule-violation losses and test-time adaptation of a small classifier.
//!
//! Each iteration samples a minibatch of test rows, averages the clipped
//! violation loss over all rules and, when it is positive, takes one
//! gradient-descent step on the model's scale and shift parameters.

mod loss;
mod model;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{draw_batch, Dataset};
use crate::error::{Error, Result};
use crate::schema::ConcreteRule;

pub use loss::{bound_loss, rule_loss, total_loss, BatchOutput, LossTerm};
pub use model::{argmax, score_column, softmax, Checkpoint, Features, ParamGrad, SoftmaxModel, MODEL_FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Rescales the gradient to at most this norm.
    pub grad_clip: Option<f64>,
    /// Temperature of the surrogate F1 consequent scores.
    pub temperature: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            iterations: 1000,
            batch_size: 64,
            learning_rate: 1e-2,
            seed: 0,
            grad_clip: None,
            temperature: 1.0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::arg("iterations and batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::arg("gradient clip must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::arg("temperature must be positive"));
        }
        Ok(())
    }
}

/// Iterations covering `epochs` passes over `rows` samples in batches of
/// `batch_size`.
pub fn iterations_for_epochs(epochs: usize, rows: usize, batch_size: usize) -> usize {
    epochs * rows.div_ceil(batch_size.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub iteration: usize,
    pub loss: f64,
    pub batch_violations: u64,
    pub update_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptationTrace {
    pub steps: Vec<TraceStep>,
}

impl AdaptationTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,batch_violations,update_norm\n");
        for t in &self.steps {
            let _ = writeln!(s, "{},{},{},{}", t.iteration, t.loss, t.batch_violations, t.update_norm);
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|t| t.loss).collect()
    }

    /// Trailing moving average of the loss over `window` iterations, one value
    /// per full window.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let losses = self.losses();
        if window == 0 || losses.len() < window {
            return Vec::new();
        }
        losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    }
}

/// Adaptation stopped early; carries the trace up to the failure.
#[derive(Debug)]
pub struct AdaptFailure {
    pub error: Error,
    pub trace: AdaptationTrace,
}

impl std::fmt::Display for AdaptFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "adaptation stopped after {} iterations: {}", self.trace.steps.len(), self.error)
    }
}

impl std::error::Error for AdaptFailure {}

/// Loss and its gradient in the adaptable parameters on the given rows.
pub fn loss_and_grad(
    model: &SoftmaxModel,
    rules: &[ConcreteRule],
    dataset: &Dataset,
    x: &Features,
    rows: &[usize],
    temperature: f64,
) -> Result<(LossTerm, ParamGrad)> {
    let probs = model.forward(x, rows);
    let out = BatchOutput {
        dataset,
        rows,
        probs: &probs,
        classes: &model.classes,
        temperature,
    };
    let term = total_loss(rules, &out)?;
    let grad = model.backward(x, rows, &probs, &term.grad_probs);
    Ok((term, grad))
}

/// Test-time adaptation of `model`'s scale and shift on unlabeled `test` rows.
pub fn adapt(
    model: &SoftmaxModel,
    rules: &[ConcreteRule],
    test: &Dataset,
    config: &AdaptationConfig,
) -> Result<(SoftmaxModel, AdaptationTrace), AdaptFailure> {
    let fail = |error, trace| AdaptFailure { error, trace };
    if let Err(e) = config.validate() {
        return Err(fail(e, AdaptationTrace::default()));
    }
    if test.rows() == 0 {
        return Err(fail(Error::arg("no test rows to adapt on"), AdaptationTrace::default()));
    }
    let x = Features::from_dataset(test, &model.features).map_err(|e| fail(e, AdaptationTrace::default()))?;
    let mut model = model.clone();
    let mut trace = AdaptationTrace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for iteration in 0..config.iterations {
        let batch = draw_batch(&mut rng, test.rows(), config.batch_size);
        let (term, mut grad) = match loss_and_grad(&model, rules, test, &x, &batch.indices, config.temperature) {
            Ok(r) => r,
            Err(e) => return Err(fail(e, trace)),
        };
        if !term.value.is_finite() {
            return Err(fail(Error::NonFinite(format!("loss at iteration {iteration}")), trace));
        }
        let mut update_norm = 0.0;
        if term.value > 0.0 {
            if !grad.is_finite() {
                return Err(fail(Error::NonFinite(format!("gradient at iteration {iteration}")), trace));
            }
            let norm = grad.norm();
            if let Some(clip) = config.grad_clip {
                if norm > clip {
                    let s = clip / norm;
                    grad.scale.iter_mut().chain(grad.shift.iter_mut()).for_each(|g| *g *= s);
                }
            }
            let lr = config.learning_rate;
            for (p, g) in model.scale.iter_mut().zip(&grad.scale) {
                *p -= lr * g;
            }
            for (p, g) in model.shift.iter_mut().zip(&grad.shift) {
                *p -= lr * g;
            }
            update_norm = lr * grad.norm();
        }
        trace.steps.push(TraceStep {
            iteration,
            loss: term.value,
            batch_violations: term.violations,
            update_norm,
        });
    }
    Ok((model, trace))
}

/// Largest relative difference between the analytic gradient of the total
/// loss and central finite differences with the given step, over every
/// adaptable parameter. Relative errors use a denominator floor of 1e-6.
pub fn grad_check(
    model: &SoftmaxModel,
    rules: &[ConcreteRule],
    dataset: &Dataset,
    rows: &[usize],
    temperature: f64,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::arg(format!("finite-difference step must lie in (0, 1e-2], got {step}")));
    }
    let x = Features::from_dataset(dataset, &model.features)?;
    let (term, grad) = loss_and_grad(model, rules, dataset, &x, rows, temperature)?;
    if term.value == 0.0 {
        return Err(Error::arg("gradient check needs a positive loss on the batch"));
    }
    let loss_at = |m: &SoftmaxModel| loss_and_grad(m, rules, dataset, &x, rows, temperature).map(|r| r.0.value);
    let mut worst: f64 = 0.0;
    let f = model.n_features();
    for j in 0..2 * f {
        let (mut up, mut dn) = (model.clone(), model.clone());
        let (analytic, pu, pd) = if j < f {
            (grad.scale[j], &mut up.scale[j], &mut dn.scale[j])
        } else {
            (grad.shift[j - f], &mut up.shift[j - f], &mut dn.shift[j - f])
        };
        *pu += step;
        *pd -= step;
        let numeric = (loss_at(&up)? - loss_at(&dn)?) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}
