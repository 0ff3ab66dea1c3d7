//! Cross-entropy SGD training, optionally with DP-SGD (per-example clipping
//! plus Gaussian noise).

mod backward;

pub use backward::{example_gradients, Gradients, ParamGrad};
pub use crate::data::LabeledDataset;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelSpec};
use crate::seeds::mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "train config needs learning_rate > 0, epochs >= 1, batch_size >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    pub enabled: bool,
    /// Per-example L2 bound `C`.
    pub clip_norm: f32,
    /// `sigma`; the added noise has std `sigma * C / batch`.
    pub noise_multiplier: f32,
    /// Reported privacy budget. Bookkeeping only; no accountant runs.
    pub epsilon_label: f32,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            enabled: false,
            clip_norm: 1.0,
            noise_multiplier: 0.5,
            epsilon_label: 0.0,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) || !(self.noise_multiplier >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "dp config needs clip_norm > 0 and noise_multiplier >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean cross-entropy and mean gradients over `batch`.
pub fn loss_and_gradients(model: &ModelSpec, batch: &[(&crate::Tensor, usize)]) -> Result<(f32, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0f64;
    for &(x, y) in batch {
        let (l, g, _) = example_gradients(model, x, y)?;
        loss += l as f64;
        total.add_assign(&g)?;
    }
    total.scale(1.0 / batch.len() as f32);
    Ok(((loss / batch.len() as f64) as f32, total))
}

/// `theta <- theta - lr * g` for every parameter.
pub fn sgd_step(model: &ModelSpec, grads: &Gradients, lr: f32) -> Result<ModelSpec> {
    if grads.layers.len() != model.layers().len() {
        return Err(Error::AlignmentError(format!(
            "{} gradient entries for {} layers",
            grads.layers.len(),
            model.layers().len()
        )));
    }
    let mut out = model.clone();
    for (layer, g) in out.layers_mut().iter_mut().zip(&grads.layers) {
        let (weights, bias) = match layer {
            LayerSpec::Conv2d(c) => (&mut c.weights, &mut c.bias),
            LayerSpec::Dense(d) => (&mut d.weights, &mut d.bias),
            _ => {
                if g.is_some() {
                    return Err(Error::AlignmentError(format!(
                        "gradient supplied for parameterless {} layer",
                        layer.kind_name()
                    )));
                }
                continue;
            }
        };
        let g = g.as_ref().ok_or_else(|| {
            Error::AlignmentError("missing gradient for parameterised layer".into())
        })?;
        if g.weights.len() != weights.len() || g.bias.len() != bias.len() {
            return Err(Error::AlignmentError("gradient size mismatch".into()));
        }
        weights
            .data_mut()
            .iter_mut()
            .zip(&g.weights)
            .for_each(|(w, d)| *w -= lr * d);
        bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= lr * d);
    }
    Ok(out)
}

/// Aggregated DP-SGD gradient plus the largest per-example norm after clipping.
#[derive(Clone, Debug)]
pub struct Sanitized {
    pub grads: Gradients,
    pub max_clipped_norm: f64,
}

/// Clips each example's gradient to L2 norm `C`, averages, then adds
/// `N(0, (sigma * C / batch)^2)` noise per coordinate from `rng`, in canonical
/// parameter order.
pub fn dp_sanitize<R: Rng + ?Sized>(
    per_example: &[Gradients],
    dp: &DpConfig,
    rng: &mut R,
) -> Result<Sanitized> {
    let first = per_example.first().ok_or(Error::EmptyInput)?;
    dp.validate()?;
    let batch = per_example.len();
    let c = dp.clip_norm as f64;
    let mut sum = first.clone();
    sum.scale(0.0);
    let mut max_clipped_norm = 0.0f64;
    for g in per_example {
        let norm = g.l2_norm();
        let factor = if norm > c { c / norm } else { 1.0 };
        let mut clipped = g.clone();
        clipped.scale(factor as f32);
        max_clipped_norm = max_clipped_norm.max(clipped.l2_norm());
        sum.add_assign(&clipped)?;
    }
    sum.scale(1.0 / batch as f32);

    let std = dp.noise_multiplier as f64 * c / batch as f64;
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for p in sum.params_mut() {
            for v in p.iter_mut() {
                *v += normal.sample(rng) as f32;
            }
        }
    }
    Ok(Sanitized {
        grads: sum,
        max_clipped_norm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    /// Largest per-example gradient norm after clipping, DP runs only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_clipped_norm: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelSpec,
    pub log: Vec<EpochRecord>,
}

/// Minibatch SGD over `data`, shuffled every epoch from `cfg.seed`.
///
/// Loss and accuracy in the log are measured on the forward passes used for
/// the updates, before each step.
pub fn train(model: &ModelSpec, data: &LabeledDataset, cfg: &TrainConfig, dp: &DpConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dp.enabled {
        dp.validate()?;
    }
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 0xd9]));
    let mut model = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut max_norm: Option<f64> = None;
        for chunk in order.chunks(cfg.batch_size) {
            let mut per_example = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (x, y) = data.get(i);
                let (l, g, pred) = example_gradients(&model, x, y)?;
                loss_sum += l as f64;
                correct += (pred == y) as usize;
                per_example.push(g);
            }
            let step = if dp.enabled {
                let s = dp_sanitize(&per_example, dp, &mut noise_rng)?;
                max_norm = Some(max_norm.unwrap_or(0.0).max(s.max_clipped_norm));
                s.grads
            } else {
                let mut mean = Gradients::zeros_like(&model);
                for g in &per_example {
                    mean.add_assign(g)?;
                }
                mean.scale(1.0 / per_example.len() as f32);
                mean
            };
            model = sgd_step(&model, &step, cfg.learning_rate)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            max_clipped_norm: max_norm,
        };
        log::info!(
            "epoch {} loss {:.4} acc {:.3}",
            record.epoch,
            record.mean_loss,
            record.train_accuracy
        );
        log.push(record);
    }
    Ok(TrainOutcome { model, log })
}

/// Fraction of `data` the model labels correctly.
pub fn accuracy(model: &ModelSpec, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut correct = 0usize;
    for (x, &y) in data.inputs().iter().zip(data.labels()) {
        correct += (crate::nn::model_forward(model, x, false)?.predicted_label == y) as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}
