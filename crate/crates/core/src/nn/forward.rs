use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::kernels::{
    argmax, avgpool_forward, conv2d_forward, dense_forward, maxpool_forward, relu_forward,
    softmax,
};
use super::spec::{LayerSpec, ModelSpec};

/// Outputs of one inference, with optional per-layer timestamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentedOutput {
    pub logits: Vec<f32>,
    /// Hard label: argmax of `logits`, lowest index on ties.
    pub predicted_label: usize,
    /// One entry per layer when instrumented, empty otherwise.
    pub layer_times_ns: Vec<u64>,
    /// Last timestamp minus first; zero when not instrumented.
    pub total_time_ns: u64,
    /// Max-update executions per max-pool layer, in layer order.
    pub branch_not_taken: Vec<u64>,
}

impl InstrumentedOutput {
    pub fn total_updates(&self) -> u64 {
        self.branch_not_taken.iter().sum()
    }
}

struct LayerResult {
    output: Tensor,
    pool: Option<(Vec<usize>, u64)>,
}

fn apply_layer(layer: &LayerSpec, x: &Tensor) -> Result<LayerResult> {
    let plain = |output| LayerResult { output, pool: None };
    Ok(match layer {
        LayerSpec::Conv2d(conv) => plain(conv2d_forward(x, conv)?),
        LayerSpec::Relu => plain(relu_forward(x)),
        LayerSpec::MaxPool { window, variant } => {
            let out = maxpool_forward(x, window, *variant)?;
            LayerResult {
                output: out.output,
                pool: Some((out.argmax, out.update_count)),
            }
        }
        LayerSpec::AvgPool { window } => plain(avgpool_forward(x, window)?),
        LayerSpec::Flatten => plain(x.clone().reshape(Shape::new(vec![x.len()])?)?),
        LayerSpec::Dense(dense) => plain(dense_forward(x, dense)?),
        LayerSpec::Softmax => plain(softmax(x)),
    })
}

fn check_input(model: &ModelSpec, input: &Tensor) -> Result<()> {
    if input.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "model expects input {}, got {}",
            model.input_shape(),
            input.shape()
        )));
    }
    Ok(())
}

/// Runs every layer in order. When `instrument` is set, a monotonic timestamp
/// is read before the first layer and after every layer.
pub fn model_forward(model: &ModelSpec, input: &Tensor, instrument: bool) -> Result<InstrumentedOutput> {
    check_input(model, input)?;
    let layers = model.layers();
    let mut stamps: Vec<Instant> = Vec::with_capacity(if instrument { layers.len() + 1 } else { 0 });
    let mut branch_not_taken = Vec::with_capacity(model.max_pool_count());

    if instrument {
        stamps.push(Instant::now());
    }
    let mut x = input.clone();
    for layer in layers {
        let r = apply_layer(layer, &x)?;
        if instrument {
            stamps.push(Instant::now());
        }
        if let Some((_, count)) = r.pool {
            branch_not_taken.push(count);
        }
        x = r.output;
    }

    let (layer_times_ns, total_time_ns) = if instrument {
        let times = stamps
            .windows(2)
            .map(|w| w[1].duration_since(w[0]).as_nanos() as u64)
            .collect();
        let total = stamps[stamps.len() - 1].duration_since(stamps[0]).as_nanos() as u64;
        (times, total)
    } else {
        (Vec::new(), 0)
    };
    let logits = x.into_data();
    Ok(InstrumentedOutput {
        predicted_label: argmax(&logits),
        logits,
        layer_times_ns,
        total_time_ns,
        branch_not_taken,
    })
}

/// Max-update counts per max-pool layer, without timing. Layers after the
/// last max pool cannot change the counts and are not run.
pub fn pool_update_counts(model: &ModelSpec, input: &Tensor) -> Result<Vec<u64>> {
    check_input(model, input)?;
    let layers = model.layers();
    let mut counts = Vec::with_capacity(model.max_pool_count());
    let Some(last) = layers.iter().rposition(|l| matches!(l, LayerSpec::MaxPool { .. })) else {
        return Ok(counts);
    };
    let mut x = input.clone();
    for layer in &layers[..=last] {
        let r = apply_layer(layer, &x)?;
        if let Some((_, count)) = r.pool {
            counts.push(count);
        }
        x = r.output;
    }
    Ok(counts)
}

/// Every intermediate activation of a forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Tensor>,
    /// Selected indices for max-pool layers, `None` elsewhere.
    pub pool_argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("input is always present")
    }
}

pub fn forward_trace(model: &ModelSpec, input: &Tensor) -> Result<ForwardTrace> {
    check_input(model, input)?;
    let mut activations = Vec::with_capacity(model.layers().len() + 1);
    let mut pool_argmax = Vec::with_capacity(model.layers().len());
    activations.push(input.clone());
    for layer in model.layers() {
        let r = apply_layer(layer, activations.last().unwrap())?;
        pool_argmax.push(r.pool.map(|(idx, _)| idx));
        activations.push(r.output);
    }
    Ok(ForwardTrace {
        activations,
        pool_argmax,
    })
}
